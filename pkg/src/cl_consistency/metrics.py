"""Evaluation metrics: accuracy, calibration, transfer, recency bias, robustness."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import softmax
from .data import CLASS_IL, CORRUPTIONS, Dataset, TaskStream, corrupt_dataset
from .model import MlpClassifier


def _probs(logits: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64)).data


def top1_accuracy(model: MlpClassifier, test_set: Dataset) -> float:
    """Percentage of samples whose arg-max logit is the label (ties: lowest index)."""
    if len(test_set) == 0:
        raise ValueError("top-1 accuracy of an empty test set")
    return accuracy_from_logits(model.logits(test_set.x), test_set.y)


def accuracy_from_logits(logits, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("top-1 accuracy of an empty test set")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class ReliabilityReport:
    n_bins: int
    counts: list[int]
    confidence: list[float]   # mean confidence per bin, 0 for empty bins
    accuracy: list[float]     # fraction correct per bin, 0 for empty bins
    ece: float                # percent

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])
            for m in range(self.n_bins):
                w.writerow([m + 1, f"{m / self.n_bins:.6f}", f"{(m + 1) / self.n_bins:.6f}",
                            self.counts[m], f"{self.confidence[m]:.6f}", f"{self.accuracy[m]:.6f}"])


def reliability(confidences, correct, n_bins: int = 10) -> ReliabilityReport:
    """Equal-width bins on (0, 1]; a confidence c goes to bin ceil(c * M), c = 0 to bin 1."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if conf.size and (conf.min() < 0 or conf.max() > 1 or not np.all(np.isfinite(conf))):
        raise ValueError("confidences must lie in [0, 1]")
    upper = np.arange(1, n_bins + 1) / n_bins
    bins = np.searchsorted(upper, conf, side="left")
    counts = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    hit_sum = np.bincount(bins, weights=hit.astype(np.float64), minlength=n_bins)
    nonempty = counts > 0
    mean_conf = np.where(nonempty, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(nonempty, hit_sum / np.maximum(counts, 1), 0.0)
    n = max(conf.size, 1)
    ece_value = 100.0 * float(np.sum(counts / n * np.abs(mean_acc - mean_conf)))
    return ReliabilityReport(n_bins, counts.tolist(), mean_conf.tolist(), mean_acc.tolist(), ece_value)


def ece(confidences, correct, n_bins: int = 10) -> float:
    """Expected calibration error in percent."""
    return reliability(confidences, correct, n_bins).ece


def model_reliability(model: MlpClassifier, data: Dataset, n_bins: int = 10) -> ReliabilityReport:
    probs = _probs(model.logits(data.x))
    pred = np.argmax(probs, axis=1)
    return reliability(probs.max(axis=1), pred == data.y, n_bins)


def forward_transfer(pre_task_acc, random_init_acc, include_first: bool = False) -> float:
    """Mean gain of pre-training accuracy over a random network, tasks 2..T."""
    pre = np.asarray(pre_task_acc, dtype=np.float64).reshape(-1)
    if pre.size == 0:
        raise ValueError("forward transfer needs at least one task")
    base = np.broadcast_to(np.asarray(random_init_acc, dtype=np.float64), pre.shape)
    start = 0 if include_first else 1
    if pre.size <= start:
        raise ValueError("forward transfer over tasks 2..T needs at least two tasks")
    return float(np.mean(pre[start:] - base[start:]))


def task_probabilities(model: MlpClassifier, stream: TaskStream) -> list[float]:
    """Average softmax mass each task's class block receives over all test samples."""
    if stream.scenario != CLASS_IL:
        raise ValueError(f"task probabilities need a Class-IL stream, got {stream.scenario}")
    probs = _probs(model.logits(stream.all_test().x))
    mass = np.array([probs[:, list(t.classes)].sum(axis=1).mean() for t in stream.tasks])
    return (mass / mass.sum()).tolist()


@dataclass
class RobustnessTable:
    clean: float
    cells: dict[str, dict[int, float]]   # kind -> severity -> accuracy; severity 0 is clean
    mra: float                            # mean over corrupted cells (severity >= 1)

    def to_dict(self) -> dict:
        return {"clean": self.clean, "mra": self.mra,
                "cells": {k: {str(s): a for s, a in v.items()} for k, v in self.cells.items()}}

    def ranking(self) -> list[tuple[str, float]]:
        """Corruption kinds sorted by ascending mean accuracy."""
        means = {k: float(np.mean([a for s, a in v.items() if s > 0])) for k, v in self.cells.items()}
        return sorted(means.items(), key=lambda kv: kv[1])


def robust_accuracy(model: MlpClassifier, test_set: Dataset, kinds=CORRUPTIONS,
                    severities=(1, 2, 3, 4, 5), seed: int = 0) -> RobustnessTable:
    clean = top1_accuracy(model, test_set)
    cells: dict[str, dict[int, float]] = {}
    corrupted = []
    for ki, kind in enumerate(kinds):
        row = {0: clean}
        for sev in severities:
            noisy = corrupt_dataset(test_set, kind, sev, seed=seed * 1000 + ki * 10 + sev)
            row[sev] = top1_accuracy(model, noisy)
            corrupted.append(row[sev])
        cells[kind] = row
    mra = float(np.mean(corrupted)) if corrupted else clean
    return RobustnessTable(clean, cells, mra)


@dataclass
class MetricsReport:
    avg_top1: float
    per_task_top1: list[float]
    ece: float
    forward_transfer: float | None = None
    task_probabilities: list[float] | None = None
    robustness: dict | None = None
    relative_gains: dict | None = None
    reliability: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in data.items() if k in names})


def compute_metrics(model: MlpClassifier, stream: TaskStream, train_log, n_bins: int = 10,
                    include_first_task: bool = False) -> MetricsReport:
    per_task = list(train_log.final_accuracies)
    rel = model_reliability(model, stream.all_test(), n_bins)
    fwt = None
    needed = 1 if include_first_task else 2
    if len(train_log.pre_task_accuracy) >= needed:
        fwt = forward_transfer(train_log.pre_task_accuracy, train_log.random_init_accuracy, include_first_task)
    probs = task_probabilities(model, stream) if stream.scenario == CLASS_IL and len(stream) >= 2 else None
    return MetricsReport(
        avg_top1=float(np.mean(per_task)),
        per_task_top1=per_task,
        ece=rel.ece,
        forward_transfer=fwt,
        task_probabilities=probs,
        reliability=asdict(rel),
    )


def _get(report, name):
    return report[name] if isinstance(report, dict) else getattr(report, name)


def relative_gains(cr, er) -> dict:
    """Percentage gains of a regularised run over a reference run.

    Returns accuracy, recency-bias and calibration gains; recency is None when
    either run lacks task probabilities.
    """
    acc_cr, acc_er = _get(cr, "avg_top1"), _get(er, "avg_top1")
    if acc_er == 0:
        raise ValueError("accuracy gain undefined: reference accuracy is 0")
    gains = {"accuracy": 100.0 * (acc_cr - acc_er) / acc_er}

    probs_cr, probs_er = _get(cr, "task_probabilities"), _get(er, "task_probabilities")
    if probs_cr and probs_er:
        if len(probs_cr) < 2 or len(probs_er) < 2:
            raise ValueError("recency gain needs at least two tasks")
        keep_cr = 1.0 - (probs_cr[-1] - probs_cr[0])
        keep_er = 1.0 - (probs_er[-1] - probs_er[0])
        if keep_er == 0:
            raise ValueError("recency gain undefined: reference has 1 - (T_last - T_first) = 0")
        gains["recency"] = 100.0 * (keep_cr - keep_er) / keep_er
    else:
        gains["recency"] = None

    ece_cr, ece_er = _get(cr, "ece"), _get(er, "ece")
    if ece_er == 100:
        raise ValueError("calibration gain undefined: reference ECE is 100")
    gains["calibration"] = 100.0 * ((100.0 - ece_cr) - (100.0 - ece_er)) / (100.0 - ece_er)
    return gains
