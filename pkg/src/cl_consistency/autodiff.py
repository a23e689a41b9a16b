"""Minimal dense tensor with reverse-mode automatic differentiation.

Every tensor wraps a float64 numpy array. Operations on tensors that require
gradients record a closure which pushes the upstream gradient into the
parents; :meth:`Tensor.backward` replays those closures in reverse
topological order. Graphs are built per step and dropped with their tensors.

Subgradient conventions at non-smooth points: ``sign(0) = 0``,
``relu'(0) = 0`` and ties in ``max`` go to the first index.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
EPS = 1e-12


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph plumbing -------------------------------------------------
    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + grad

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        # interior gradients are per-call; only leaves accumulate across calls
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        out = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out / other.data, other.shape))

        return Tensor._make(out, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return _lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)

        def backward(g):
            self._accumulate(g * p * self.data ** (p - 1.0))

        return Tensor._make(self.data ** p, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = _lift(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul shape mismatch: {self.shape} @ {other.shape}")

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), backward)

    # -- unary functions --------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: self._accumulate(g * out))

    def log(self) -> "Tensor":
        return Tensor._make(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: self._accumulate(g * 0.5 / out))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(np.where(mask, self.data, 0.0), (self,),
                            lambda g: self._accumulate(g * mask))

    def abs(self) -> "Tensor":
        return Tensor._make(np.abs(self.data), (self,),
                            lambda g: self._accumulate(g * np.sign(self.data)))

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._make(out, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        """Maximum along ``axis``; the gradient goes to the first maximal entry."""
        if axis is None:
            flat = self.data.reshape(-1)
            idx = int(np.argmax(flat))

            def backward_all(g):
                dense = np.zeros(flat.shape, dtype=DTYPE)
                dense[idx] = np.asarray(g).reshape(-1)[0]
                self._accumulate(dense.reshape(self.shape))

            out = flat[idx]
            if keepdims:
                out = np.reshape(out, (1,) * self.ndim)
            return Tensor._make(out, (self,), backward_all)

        idx = np.argmax(self.data, axis=axis)
        out = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            dense = np.zeros_like(self.data)
            np.put_along_axis(dense, np.expand_dims(idx, axis), g, axis=axis)
            self._accumulate(dense)

        return Tensor._make(out if keepdims else np.squeeze(out, axis=axis), (self,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: self._accumulate(g.T))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(self.data.reshape(shape), (self,),
                            lambda g: self._accumulate(g.reshape(self.shape)))

    def __getitem__(self, index) -> "Tensor":
        def backward(g):
            dense = np.zeros_like(self.data)
            np.add.at(dense, index, g)
            self._accumulate(dense)

        return Tensor._make(self.data[index], (self,), backward)

    # -- composite row ops ------------------------------------------------
    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis=axis)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return log_softmax(self, axis=axis)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _check_finite(x: Tensor) -> None:
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite logits")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Row-wise softmax, stabilised by subtracting the row max."""
    logits = _lift(logits)
    _check_finite(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        logits._accumulate(out * (g - inner))

    return Tensor._make(out, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = _lift(logits)
    _check_finite(logits)
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        logits._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (logits,), backward)


def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    v = _lift(v)
    norm = np.sqrt((v.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm <= EPS):
        raise ValueError("degenerate prediction vector")
    out = v.data / norm

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        v._accumulate((g - out * inner) / norm)

    return Tensor._make(out, (v,), backward)


def check_gradients(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-4) -> float:
    """Largest relative gap between backprop and central differences.

    The gap for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = _as_array(point.data if isinstance(point, Tensor) else point).copy()
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ValueError("check_gradients needs a scalar-valued function")
    if out.requires_grad:
        out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(Tensor(base.copy())).item()
        flat[i] = orig - eps
        down = fn(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (up - down) / (2 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
