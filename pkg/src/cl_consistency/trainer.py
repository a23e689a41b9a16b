"""Experience replay with a consistency regularizer, plus the SGD and Joint baselines."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .buffer import ReservoirBuffer
from .data import Dataset, TaskStream
from .model import MlpClassifier, cross_entropy, forward, sgd_step
from .regularizers import RegularizerSpec, make_regularizer

log = logging.getLogger(__name__)

EVAL_THREADS_ENV = "CL_CONSISTENCY_EVAL_THREADS"

# losses that are undefined on a single buffered example
_NEEDS_PAIRS = {"InfoNCE", "BarlowTwins"}


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    buffer_capacity: int = 500
    batch_size: int = 32
    epochs_per_task: int = 1
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.regularizer, dict):
            self.regularizer = RegularizerSpec(**self.regularizer)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.buffer_capacity < 0:
            raise ValueError("buffer_capacity must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def beta(self) -> float:
        return self.regularizer.beta

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    loss_er: list[float] = field(default_factory=list)
    loss_cr: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    accuracy_matrix: list[list[float]] = field(default_factory=list)  # [after task][task]
    pre_task_accuracy: list[float] = field(default_factory=list)
    random_init_accuracy: list[float] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.loss_total)

    @property
    def final_accuracies(self) -> list[float]:
        return self.accuracy_matrix[-1] if self.accuracy_matrix else []


def _accuracy(model: MlpClassifier, data: Dataset) -> float:
    pred = np.argmax(model.logits(data.x), axis=1)
    return 100.0 * float(np.mean(pred == data.y))


def evaluate_tasks(model: MlpClassifier, stream: TaskStream) -> list[float]:
    """Top-1 accuracy on every task's test set, optionally thread-parallel."""
    threads = int(os.environ.get(EVAL_THREADS_ENV, "1") or 1)
    tests = [t.test for t in stream.tasks]
    if threads <= 1 or len(tests) == 1:
        return [_accuracy(model, d) for d in tests]
    snapshot = model.copy()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda d: _accuracy(snapshot, d), tests))


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    order_seq, buffer_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(order_seq), np.random.default_rng(buffer_seq)


def _batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class _Stepper:
    """One optimisation step of the replay objective."""

    def __init__(self, model: MlpClassifier, config: TrainConfig, buffer: ReservoirBuffer, train_log: TrainLog):
        self.model = model
        self.config = config
        self.buffer = buffer
        self.log = train_log
        self.reg = make_regularizer(config.regularizer)
        self.kind = config.regularizer.kind
        self.beta = config.regularizer.beta
        self.use_cr = self.beta > 0 and self.kind != "None"

    def _forward(self, x: np.ndarray, where: str):
        out = forward(self.model, x)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteLossError(f"non-finite logits at {where}, step {self.log.n_steps}: parameters diverged")
        return out

    def __call__(self, x: np.ndarray, y: np.ndarray, where: str) -> None:
        cfg, buf = self.config, self.buffer
        logits = self._forward(x, where)
        l_er = cross_entropy(logits, y)
        l_cr = None
        if not buf.is_empty():
            bx, by, _ = buf.sample_arrays(cfg.batch_size)
            l_er = l_er + cfg.alpha * cross_entropy(self._forward(bx, where), by)
            if self.use_cr and not (self.kind in _NEEDS_PAIRS and len(buf) < 2):
                cx, _, cz = buf.sample_arrays(cfg.batch_size)
                l_cr = self.reg(self._forward(cx, where), cz)
        total = l_er if l_cr is None else l_er + self.beta * l_cr

        er_val = l_er.item()
        cr_val = 0.0 if l_cr is None else l_cr.item()
        total_val = total.item()
        if not np.isfinite(total_val):
            raise NonFiniteLossError(
                f"non-finite loss at {where}, step {self.log.n_steps}: "
                f"L_er={er_val!r}, L_cr={cr_val!r}, L={total_val!r}")
        self.log.loss_er.append(er_val)
        self.log.loss_cr.append(cr_val)
        self.log.loss_total.append(total_val)

        total.backward()
        sgd_step(self.model, cfg.learning_rate)
        # the stored logits come from the same pre-update forward pass
        buf.observe_batch(x, y, logits.data)


def train_continual(stream: TaskStream, model: MlpClassifier, config: TrainConfig) -> tuple[MlpClassifier, TrainLog]:
    """Train through the stream task by task, evaluating after each one.

    Only evaluation is scheduled by task boundaries; the reservoir and the
    losses never see task identity.
    """
    if model.n_classes != stream.n_classes:
        raise ValueError(f"model has {model.n_classes} outputs but the stream has {stream.n_classes} classes")
    if model.input_dim != stream.input_dim:
        raise ValueError(f"model expects {model.input_dim} inputs, stream provides {stream.input_dim}")

    order_rng, buffer_rng = _rngs(config.seed)
    buffer = ReservoirBuffer(config.buffer_capacity, model.n_classes, rng=buffer_rng)
    train_log = TrainLog()
    step = _Stepper(model, config, buffer, train_log)

    train_log.random_init_accuracy = evaluate_tasks(model, stream)
    for t, task in enumerate(stream.tasks):
        train_log.pre_task_accuracy.append(
            train_log.random_init_accuracy[t] if t == 0 else _accuracy(model, task.test))
        for epoch in range(config.epochs_per_task):
            for idx in _batches(len(task.train), config.batch_size, order_rng, not stream.ordered):
                step(task.train.x[idx], task.train.y[idx], f"task {t}, epoch {epoch}")
        train_log.accuracy_matrix.append(evaluate_tasks(model, stream))
        log.debug("task %d done: %s", t, train_log.accuracy_matrix[-1])
    return model, train_log


def train_joint(stream: TaskStream, model: MlpClassifier, config: TrainConfig) -> tuple[MlpClassifier, TrainLog]:
    """Upper bound: plain SGD on the shuffled union of every task's data."""
    if model.n_classes != stream.n_classes:
        raise ValueError(f"model has {model.n_classes} outputs but the stream has {stream.n_classes} classes")
    if model.input_dim != stream.input_dim:
        raise ValueError(f"model expects {model.input_dim} inputs, stream provides {stream.input_dim}")
    union = stream.all_train()
    order_rng, buffer_rng = _rngs(config.seed)
    plain = TrainConfig(alpha=config.alpha, buffer_capacity=0, batch_size=config.batch_size,
                        epochs_per_task=config.epochs_per_task, learning_rate=config.learning_rate,
                        seed=config.seed)
    buffer = ReservoirBuffer(0, model.n_classes, rng=buffer_rng)
    train_log = TrainLog()
    step = _Stepper(model, plain, buffer, train_log)
    train_log.random_init_accuracy = evaluate_tasks(model, stream)
    for epoch in range(config.epochs_per_task):
        for idx in _batches(len(union), config.batch_size, order_rng, True):
            step(union.x[idx], union.y[idx], f"joint epoch {epoch}")
    train_log.accuracy_matrix.append(evaluate_tasks(model, stream))
    return model, train_log
