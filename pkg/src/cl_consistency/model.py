"""MLP backbone, cross-entropy objective, SGD and checkpoint I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, log_softmax

CHECKPOINT_MAGIC = b"CLMLP001"


@dataclass
class MlpClassifier:
    """Fully connected classifier; ReLU on hidden layers, raw logits out."""

    layer_sizes: list[int]
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass, used for evaluation and buffer snapshots."""
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        _check_input(self, h.shape)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def copy(self) -> "MlpClassifier":
        return MlpClassifier(
            list(self.layer_sizes),
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )


def init_mlp(layer_sizes, seed: int) -> MlpClassifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least an input and an output size")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpClassifier(sizes, weights, biases)


def _check_input(model: MlpClassifier, shape) -> None:
    if len(shape) != 2 or shape[1] != model.input_dim:
        raise ValueError(f"expected input of shape (B, {model.input_dim}), got {tuple(shape)}")


def forward(model: MlpClassifier, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_input(model, x.shape)
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = h.relu()
    return h


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), labels] = 1.0
    return -(log_softmax(logits) * one_hot).sum() * (1.0 / n)


def sgd_step(model: MlpClassifier, lr: float) -> None:
    for p in model.parameters():
        if p.grad is not None:
            p.data = p.data - lr * p.grad
        p.grad = None


def save_checkpoint(model: MlpClassifier, path) -> None:
    """Binary dump: magic, layer count, sizes, then row-major float64 params."""
    sizes = model.layer_sizes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpClassifier:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack_from("<I", raw, 8)
    sizes = list(struct.unpack_from(f"<{n}I", raw, 12))
    offset = 12 + 4 * n
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(Tensor(w.reshape(fan_in, fan_out).astype(np.float64), requires_grad=True))
        biases.append(Tensor(b.astype(np.float64), requires_grad=True))
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    return MlpClassifier(sizes, weights, biases)
