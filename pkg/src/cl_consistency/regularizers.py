"""Consistency losses between current logits and logits stored in the buffer.

Every loss takes ``(current, stored)``. ``current`` is a Tensor that carries
gradients; ``stored`` is always treated as a constant target, so no gradient
ever reaches it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import EPS, Tensor, l2_normalize, log_softmax, softmax

LossFn = Callable[[Tensor, object], Tensor]

KINDS = ("L1", "L2", "Linf", "MSE", "KLDiv", "MI", "InfoNCE", "BYOL", "DINO", "BarlowTwins", "None")
_KIND_LOOKUP = {k.lower(): k for k in KINDS}
_KIND_LOOKUP.update({"kl": "KLDiv", "simclr": "InfoNCE", "barlow": "BarlowTwins", "er": "None",
                     "none": "None", "l_inf": "Linf", "linf": "Linf", "l_1": "L1", "l_2": "L2"})

DEFAULT_TEMPERATURE = {"InfoNCE": 0.5, "DINO": 1.0}


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "None"
    temperature: float | None = None  # per-kind default when unset
    offdiag_weight: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.offdiag_weight < 0:
            raise ValueError("offdiag_weight must be non-negative")

    @property
    def tau(self) -> float:
        if self.temperature is not None:
            return float(self.temperature)
        return DEFAULT_TEMPERATURE.get(self.kind, 1.0)


def canonical_kind(kind) -> str:
    if kind is None:
        return "None"
    try:
        return _KIND_LOOKUP[str(kind).lower()]
    except KeyError:
        raise ValueError(f"unknown regularizer kind {kind!r}; choose from {', '.join(KINDS)}") from None


def _pair(current, stored) -> tuple[Tensor, Tensor]:
    current = current if isinstance(current, Tensor) else Tensor(current)
    target = Tensor(stored.data if isinstance(stored, Tensor) else stored)
    if current.shape != target.shape:
        raise ValueError(f"shape mismatch: {current.shape} vs {target.shape}")
    if current.ndim != 2:
        raise ValueError("consistency losses expect (batch, classes) logits")
    return current, target


def _row_norm(v: Tensor) -> Tensor:
    """Euclidean norm of each row with a zero subgradient at the origin."""
    norm = np.sqrt((v.data ** 2).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)

    def backward(g):
        v._accumulate(g[:, None] * v.data / safe[:, None] * (norm > 0)[:, None])

    return Tensor._make(norm, (v,), backward)


def lp_loss(current, stored, p=2) -> Tensor:
    """Mean over the batch of the Minkowski distance ``||current - stored||_p``."""
    current, target = _pair(current, stored)
    diff = current - target
    if p in (1, "1"):
        dist = diff.abs().sum(axis=1)
    elif p in (2, "2"):
        dist = _row_norm(diff)
    elif p in (math.inf, "inf", "Linf", "linf"):
        dist = diff.abs().max(axis=1)
    else:
        raise ValueError(f"p must be 1, 2 or inf, got {p!r}")
    return dist.mean()


def mse_loss(current, stored) -> Tensor:
    """Mean squared difference over every element of the batch."""
    current, target = _pair(current, stored)
    return ((current - target) ** 2).mean()


def kl_div_loss(current, stored) -> Tensor:
    """Batch mean of KL(softmax(current) || softmax(stored))."""
    current, target = _pair(current, stored)
    log_p_hat = log_softmax(current)
    log_p = log_softmax(target)
    p_hat = log_p_hat.exp()
    return (p_hat * (log_p_hat - log_p)).sum(axis=1).mean()


def _safe_log(t: Tensor) -> Tensor:
    # 0 * log 0 is taken as 0: zero entries are logged as log 1
    return (t + (t.data <= 0).astype(np.float64)).log()


def mutual_information(p_hat, p) -> Tensor:
    """Mutual information of the batch-averaged, symmetrised joint of two
    row-stochastic matrices of shape (B, C)."""
    p_hat = p_hat if isinstance(p_hat, Tensor) else Tensor(p_hat)
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p_hat.shape != p.shape:
        raise ValueError(f"shape mismatch: {p_hat.shape} vs {p.shape}")
    b = p_hat.shape[0]
    joint = (p_hat.T @ p) * (1.0 / b)
    joint = (joint + joint.T) * 0.5
    rows = joint.sum(axis=1, keepdims=True)
    cols = joint.sum(axis=0, keepdims=True)
    return (joint * (_safe_log(joint) - _safe_log(rows) - _safe_log(cols))).sum()


def mi_loss(current, stored) -> Tensor:
    """Negative mutual information between current and stored predictions."""
    current, target = _pair(current, stored)
    if current.shape[1] < 2:
        raise ValueError("mutual information needs at least two classes")
    return -mutual_information(softmax(current), softmax(target))


def info_nce_loss(current, stored, tau: float = 0.5) -> Tensor:
    """Symmetric in-batch contrastive loss on L2-normalised predictions.

    Each row's positive is its counterpart in the other view; the negatives
    are the remaining 2B - 2 rows of both views.
    """
    current, target = _pair(current, stored)
    b = current.shape[0]
    if b < 2:
        raise ValueError("InfoNCE requires in-batch negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    h = l2_normalize(current)
    g = l2_normalize(target)
    scale = 1.0 / tau
    off_diag = 1.0 - np.eye(b)

    cross = (h @ g.T) * scale          # cross[j, k] = <h_j, g_k> / tau
    same_h = (h @ h.T) * scale
    same_g = (g.data @ g.data.T) * scale
    positives = (cross * np.eye(b)).sum(axis=1)

    # similarities are bounded by 1/tau, so shifting by it keeps exp() finite
    e_cross = (cross - scale).exp()
    denom_h = e_cross.sum(axis=1) + ((same_h - scale).exp() * off_diag).sum(axis=1)
    denom_g = e_cross.sum(axis=0) + Tensor((np.exp(same_g - scale) * off_diag).sum(axis=1))
    loss_h = -positives + scale + denom_h.log()
    loss_g = -positives + scale + denom_g.log()
    return (loss_h.mean() + loss_g.mean()) * 0.5


def byol_loss(current, stored) -> Tensor:
    """Mean of 2 - 2 cos(current_j, stored_j)."""
    current, target = _pair(current, stored)
    cos = (l2_normalize(current) * l2_normalize(target)).sum(axis=1)
    return (2.0 - 2.0 * cos).mean()


def dino_loss(current, stored, tau: float = 1.0) -> Tensor:
    """Cross-entropy against the stored prediction's softmax, no centering."""
    current, target = _pair(current, stored)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    teacher = softmax(l2_normalize(target) * (1.0 / tau))
    student = log_softmax(l2_normalize(current) * (1.0 / tau))
    return -(student * teacher.data).sum(axis=1).mean()


def _standardize(t: Tensor) -> Tensor:
    centered = t - t.mean(axis=0, keepdims=True)
    var = (centered ** 2).mean(axis=0, keepdims=True)
    return centered / var.sqrt()


def barlow_twins_loss(current, stored, offdiag_weight: float = 1.0) -> Tensor:
    """Push the batch cross-correlation of standardised predictions to identity."""
    current, target = _pair(current, stored)
    b, c = current.shape
    if b < 2:
        raise ValueError("degenerate batch statistics: need at least two rows")
    for side in (current.data, target.data):
        if np.any(side.std(axis=0) <= EPS):
            raise ValueError("degenerate batch statistics: zero-variance column")
    corr = (_standardize(current).T @ _standardize(target)) * (1.0 / b)
    eye = np.eye(c)
    on_diag = (((1.0 - corr) * eye) ** 2).sum()
    off_diag = ((corr * (1.0 - eye)) ** 2).sum()
    return on_diag + offdiag_weight * off_diag


def zero_loss(current, stored) -> Tensor:
    return Tensor(0.0)


def make_regularizer(spec: RegularizerSpec | str) -> LossFn:
    if not isinstance(spec, RegularizerSpec):
        spec = RegularizerSpec(kind=spec)
    kind = spec.kind
    if kind == "L1":
        return lambda cur, st: lp_loss(cur, st, 1)
    if kind == "L2":
        return lambda cur, st: lp_loss(cur, st, 2)
    if kind == "Linf":
        return lambda cur, st: lp_loss(cur, st, math.inf)
    if kind == "MSE":
        return mse_loss
    if kind == "KLDiv":
        return kl_div_loss
    if kind == "MI":
        return mi_loss
    if kind == "InfoNCE":
        return lambda cur, st: info_nce_loss(cur, st, spec.tau)
    if kind == "BYOL":
        return byol_loss
    if kind == "DINO":
        return lambda cur, st: dino_loss(cur, st, spec.tau)
    if kind == "BarlowTwins":
        return lambda cur, st: barlow_twins_loss(cur, st, spec.offdiag_weight)
    if kind == "None":
        return zero_loss
    raise ValueError(f"unknown regularizer kind {kind!r}")
