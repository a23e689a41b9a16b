"""Reservoir-sampled replay memory of (input, label, logits) triples."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BufferEntry:
    x: np.ndarray
    y: int
    z: np.ndarray  # logits recorded when the example entered the buffer


class ReservoirBuffer:
    """Fixed-capacity uniform sample of everything observed so far.

    No task information is consulted: every stream example is kept with
    probability ``capacity / seen_count``.
    """

    def __init__(self, capacity: int, n_classes: int | None = None, seed: int | None = 0,
                 rng: np.random.Generator | None = None):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = int(capacity)
        self.n_classes = n_classes
        self.entries: list[BufferEntry] = []
        self.seen_count = 0
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def observe(self, x, y, z) -> None:
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if self.n_classes is None:
            self.n_classes = z.shape[0]
        elif z.shape[0] != self.n_classes:
            raise ValueError(f"logit vector has length {z.shape[0]}, expected {self.n_classes}")
        if self.entries and np.shape(x) != self.entries[0].x.shape:
            raise ValueError(f"input shape {np.shape(x)} differs from buffered {self.entries[0].x.shape}")

        if self.capacity == 0:
            self.seen_count += 1
            return
        if len(self.entries) < self.capacity:
            self.entries.append(BufferEntry(_frozen(x), int(y), _frozen(z)))
        else:
            slot = int(self.rng.integers(0, self.seen_count + 1))
            if slot < self.capacity:
                self.entries[slot] = BufferEntry(_frozen(x), int(y), _frozen(z))
        self.seen_count += 1

    def observe_batch(self, xs, ys, zs) -> None:
        """Observe a batch in order; slot draws for the batch are made at once."""
        xs = np.asarray(xs, dtype=np.float64)
        zs = np.asarray(zs, dtype=np.float64)
        ys = np.asarray(ys).reshape(-1)
        if zs.ndim != 2 or len(xs) != len(ys) or len(zs) != len(ys):
            raise ValueError("observe_batch expects aligned xs, ys and 2-D zs")
        if self.n_classes is None:
            self.n_classes = zs.shape[1]
        elif zs.shape[1] != self.n_classes:
            raise ValueError(f"logit vector has length {zs.shape[1]}, expected {self.n_classes}")
        if self.entries and xs.shape[1:] != self.entries[0].x.shape:
            raise ValueError(f"input shape {xs.shape[1:]} differs from buffered {self.entries[0].x.shape}")

        n = len(ys)
        start = 0
        if self.capacity:
            start = min(n, self.capacity - len(self.entries))
            for i in range(start):
                self.entries.append(BufferEntry(_frozen(xs[i]), int(ys[i]), _frozen(zs[i])))
        else:
            start = n
        self.seen_count += start
        rest = n - start
        if rest:
            highs = self.seen_count + 1 + np.arange(rest)
            slots = self.rng.integers(0, highs)
            for i in np.flatnonzero(slots < self.capacity):
                j = start + i
                self.entries[slots[i]] = BufferEntry(_frozen(xs[j]), int(ys[j]), _frozen(zs[j]))
            self.seen_count += rest

    def sample_minibatch(self, k: int) -> list[BufferEntry]:
        if not self.entries:
            raise ValueError("sample from empty buffer")
        n = len(self.entries)
        if k >= n:
            idx = self.rng.permutation(n)
        else:
            idx = self.rng.choice(n, size=k, replace=False)
        return [self.entries[i] for i in idx]

    def sample_arrays(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Like :meth:`sample_minibatch` but stacked into (x, y, z) arrays."""
        batch = self.sample_minibatch(k)
        return (np.stack([e.x for e in batch]),
                np.array([e.y for e in batch], dtype=np.int64),
                np.stack([e.z for e in batch]))

    # -- persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "n_classes": self.n_classes,
            "seen_count": self.seen_count,
            "rng_state": self.rng.bit_generator.state,
            "entries": [{"x": e.x.tolist(), "y": e.y, "z": e.z.tolist()} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReservoirBuffer":
        state = data["rng_state"]
        bitgen = getattr(np.random, state["bit_generator"])()
        bitgen.state = state
        buf = cls(data["capacity"], data.get("n_classes"), rng=np.random.Generator(bitgen))
        buf.seen_count = int(data["seen_count"])
        buf.entries = [BufferEntry(_frozen(e["x"]), int(e["y"]), _frozen(e["z"])) for e in data["entries"]]
        return buf

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def restore(cls, path) -> "ReservoirBuffer":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
