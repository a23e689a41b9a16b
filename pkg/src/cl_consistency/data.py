"""Datasets, continual-learning stream protocols and image corruptions.

Images are stored flattened, row-major, with pixel values in [0, 1].
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CLASS_IL = "ClassIL"
DOMAIN_IL = "DomainIL"
MNIST360 = "MNIST360"
JOINT = "Joint"

MNIST360_PAIRS = tuple((d, d + 1) for d in range(8))
MNIST360_REPETITIONS = 6


class Example(NamedTuple):
    x: np.ndarray
    y: int


@dataclass
class Dataset:
    """Labelled examples held as an (N, D) feature matrix and (N,) labels."""

    x: np.ndarray
    y: np.ndarray
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.ndim != 2:
            self.x = self.x.reshape(len(self.x), -1)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i) -> Example:
        return Example(self.x[i], int(self.y[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def images(self) -> np.ndarray:
        if self.image_shape is None:
            raise ValueError("dataset has no image shape")
        return self.x.reshape((len(self),) + tuple(self.image_shape))

    def subset(self, index) -> "Dataset":
        return Dataset(self.x[index], self.y[index], self.image_shape)

    def where_label(self, labels) -> "Dataset":
        return self.subset(np.isin(self.y, list(labels)))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                       parts[0].image_shape)


@dataclass
class Task:
    train: Dataset
    test: Dataset
    classes: tuple[int, ...]
    angle: float | None = None
    name: str = ""


@dataclass
class TaskStream:
    tasks: list[Task]
    scenario: str
    n_classes: int
    boundaries_visible: bool = False
    ordered: bool = False  # True when within-task order is part of the protocol
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].train.dim

    def all_test(self) -> Dataset:
        return Dataset.concat([t.test for t in self.tasks])

    def all_train(self) -> Dataset:
        return Dataset.concat([t.train for t in self.tasks])


# ---------------------------------------------------------------------------
# ingestion

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped)."""
    images = _read_bytes(images_path)
    labels = _read_bytes(labels_path)
    if len(images) < 16 or struct.unpack_from(">I", images, 0)[0] != IDX_IMAGES_MAGIC:
        raise ValueError(f"{images_path}: not an IDX file")
    if len(labels) < 8 or struct.unpack_from(">I", labels, 0)[0] != IDX_LABELS_MAGIC:
        raise ValueError(f"{labels_path}: not an IDX file")
    n, rows, cols = struct.unpack_from(">III", images, 4)
    (n_labels,) = struct.unpack_from(">I", labels, 4)
    if n != n_labels:
        raise ValueError(f"image count {n} does not match label count {n_labels}")
    pixels = np.frombuffer(images, dtype=np.uint8, offset=16)
    ys = np.frombuffer(labels, dtype=np.uint8, offset=8)
    if pixels.size != n * rows * cols or ys.size != n:
        raise ValueError("IDX payload size does not match its header")
    return Dataset(pixels.reshape(n, rows * cols) / 255.0, ys.astype(np.int64), (rows, cols))


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write ``dataset`` as an IDX pair; pixels are quantised to bytes."""
    rows, cols = dataset.image_shape
    pixels = np.clip(np.rint(dataset.x * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        fh.write(dataset.y.astype(np.uint8).tobytes())


def load_csv(path, image_shape=None) -> Dataset:
    """CSV with a header row; column ``label`` is the class, the rest features."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column")
        li = header.index("label")
        xs, ys = [], []
        for row in reader:
            if not row:
                continue
            ys.append(int(row[li]))
            xs.append([float(v) for j, v in enumerate(row) if j != li])
    x = np.array(xs, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError(f"{path}: feature values must lie in [0, 1]")
    if image_shape is None:
        side = math.isqrt(x.shape[1]) if x.size else 0
        image_shape = (side, side) if side * side == x.shape[1] and side else None
    return Dataset(x, np.array(ys), image_shape)


def make_blobs(n_classes: int = 4, dim: int = 16, n_per_class: int = 100, seed: int = 0,
               spread: float = 0.08) -> Dataset:
    """Gaussian blobs clipped to [0, 1]; square ``dim`` gives an image shape."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, dim))
    x = np.concatenate([c + spread * rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    order = rng.permutation(len(y))
    side = math.isqrt(dim)
    shape = (side, side) if side * side == dim else None
    return Dataset(np.clip(x[order], 0.0, 1.0), y[order], shape)


def load_digits(side: int = 8, pad: int = 0) -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, scaled to [0, 1].

    ``side`` resamples the glyph bilinearly, ``pad`` adds a zero border so
    rotations do not clip the strokes.
    """
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    imgs = bunch.images / 16.0
    if side != 8:
        imgs = np.stack([ndimage.zoom(im, side / 8.0, order=1, grid_mode=True, mode="grid-constant")
                         for im in imgs])
        imgs = np.clip(imgs, 0.0, 1.0)
    if pad:
        imgs = np.pad(imgs, ((0, 0), (pad, pad), (pad, pad)))
    h, w = imgs.shape[1:]
    return Dataset(imgs.reshape(len(imgs), h * w), bunch.target, (h, w))


def train_test_split(data: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split: the same fraction of every class goes to the test side."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in data.classes:
        idx = np.flatnonzero(data.y == c)
        rng.shuffle(idx)
        test_idx.extend(idx[: int(round(test_fraction * len(idx)))])
    mask = np.zeros(len(data), dtype=bool)
    mask[test_idx] = True
    return data.subset(~mask), data.subset(mask)


# ---------------------------------------------------------------------------
# image transforms

def rotate_image(img, angle: float) -> np.ndarray:
    """Rotate a square image about its centre; bilinear, zero fill.

    Output pixel (r, c) samples the source at
    ``(cy + cos(a) dr - sin(a) dc, cx + sin(a) dr + cos(a) dc)`` where
    ``dr, dc`` are offsets from the centre.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"rotation needs a square image, got {img.shape}")
    if angle == 0:
        return img.copy()
    return rotate_images(img[None], np.array([angle]))[0]


def _source_coords(n: int, angle: float) -> np.ndarray:
    center = (n - 1) / 2.0
    dr, dc = np.meshgrid(np.arange(n) - center, np.arange(n) - center, indexing="ij")
    cos, sin = math.cos(angle), math.sin(angle)
    coords = np.stack([center + cos * dr - sin * dc, center + sin * dr + cos * dc])
    snapped = np.rint(coords)
    # snap float noise so exact quarter turns move whole pixels
    return np.where(np.abs(coords - snapped) < 1e-9, snapped, coords)


def rotate_images(imgs: np.ndarray, angles) -> np.ndarray:
    """Rotate a stack of square images, one angle per image."""
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 3 or imgs.shape[1] != imgs.shape[2]:
        raise ValueError(f"rotation needs square images, got {imgs.shape[1:]}")
    angles = np.broadcast_to(np.asarray(angles, dtype=np.float64), (len(imgs),))
    out = np.empty_like(imgs)
    for i, (im, a) in enumerate(zip(imgs, angles)):
        if a == 0:
            out[i] = im
        else:
            out[i] = ndimage.map_coordinates(im, _source_coords(im.shape[0], float(a)), order=1,
                                             mode="grid-constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def rotate_dataset(data: Dataset, angles) -> Dataset:
    imgs = rotate_images(data.images(), angles)
    return Dataset(imgs.reshape(len(data), -1), data.y.copy(), data.image_shape)


# parameter per severity 1..5
CORRUPTION_SEVERITY = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.16, 0.20),   # noise std
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),         # photon count scale
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),    # salt-and-pepper fraction
    "box_blur": (2, 3, 4, 5, 6),                        # square kernel width
    "motion_blur": (2, 3, 4, 5, 6),                     # horizontal kernel length
    "contrast": (0.6, 0.5, 0.4, 0.3, 0.15),             # contrast factor
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),            # additive shift
    "pixelate": (2, 3, 4, 5, 6),                        # block width
}
CORRUPTIONS = tuple(CORRUPTION_SEVERITY)


def _pixelate(img: np.ndarray, block: int) -> np.ndarray:
    h, w = img.shape[-2:]
    out = np.empty_like(img)
    for r in range(0, h, block):
        for c in range(0, w, block):
            cell = img[..., r:r + block, c:c + block]
            out[..., r:r + block, c:c + block] = cell.mean(axis=(-2, -1), keepdims=True)
    return out


def corrupt(img, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply a procedural corruption to an image or a stack of images.

    The last two axes are spatial. Output is clipped to [0, 1].
    """
    if kind not in CORRUPTION_SEVERITY:
        raise ValueError(f"unknown corruption {kind!r}; choose from {', '.join(CORRUPTIONS)}")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be 1..5, got {severity}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2:
        raise ValueError("corrupt() needs at least a 2-D image")
    level = CORRUPTION_SEVERITY[kind][severity - 1]
    rng = np.random.default_rng(seed)
    spatial = (1,) * (img.ndim - 2)

    if kind == "gaussian_noise":
        out = img + rng.normal(0.0, level, size=img.shape)
    elif kind == "shot_noise":
        out = rng.poisson(np.clip(img, 0, 1) * level) / level
    elif kind == "impulse_noise":
        out = img.copy()
        hit = rng.random(img.shape) < level
        out[hit] = rng.integers(0, 2, size=int(hit.sum()))
    elif kind == "box_blur":
        out = ndimage.uniform_filter(img, size=spatial + (level, level), mode="nearest")
    elif kind == "motion_blur":
        out = ndimage.uniform_filter(img, size=spatial + (1, level), mode="nearest")
    elif kind == "contrast":
        mean = img.mean(axis=(-2, -1), keepdims=True)
        out = (img - mean) * level + mean
    elif kind == "brightness":
        out = img + level
    else:
        out = _pixelate(img, level)
    return np.clip(out, 0.0, 1.0)


def corrupt_dataset(data: Dataset, kind: str, severity: int, seed: int = 0) -> Dataset:
    imgs = corrupt(data.images(), kind, severity, seed)
    return Dataset(imgs.reshape(len(data), -1), data.y.copy(), data.image_shape)


# ---------------------------------------------------------------------------
# stream protocols

def _contiguous_labels(train: Dataset, test: Dataset) -> int:
    classes = sorted(set(train.classes) | set(test.classes))
    if classes != list(range(len(classes))):
        raise ValueError(f"labels must be 0..C-1, got {classes}")
    return len(classes)


def split_class_il(train: Dataset, test: Dataset, n_tasks: int) -> TaskStream:
    """Disjoint contiguous class blocks in ascending label order."""
    n_classes = _contiguous_labels(train, test)
    if n_tasks < 1 or n_classes % n_tasks:
        raise ValueError(f"{n_classes} classes cannot be split evenly into {n_tasks} tasks")
    per = n_classes // n_tasks
    tasks = []
    for t in range(n_tasks):
        block = tuple(range(t * per, (t + 1) * per))
        tasks.append(Task(train.where_label(block), test.where_label(block), block,
                          name=f"classes {block[0]}-{block[-1]}"))
    return TaskStream(tasks, CLASS_IL, n_classes)


def _require_square(data: Dataset) -> None:
    shape = data.image_shape
    if shape is None or len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"rotation protocols need square images, got {shape}")


def rotated_domain_il(train: Dataset, test: Dataset, n_tasks: int, seed: int = 0) -> TaskStream:
    """Every task is the full dataset rotated by one angle drawn from [0, pi)."""
    _require_square(train)
    _require_square(test)
    n_classes = _contiguous_labels(train, test)
    angles = np.random.default_rng(seed).uniform(0.0, math.pi, size=n_tasks)
    classes = tuple(range(n_classes))
    tasks = [Task(rotate_dataset(train, a), rotate_dataset(test, a), classes, float(a),
                  name=f"rotation {math.degrees(a):.1f} deg") for a in angles]
    return TaskStream(tasks, DOMAIN_IL, n_classes, meta={"angles": [float(a) for a in angles]})


def _block_range(index: int, n_blocks: int) -> tuple[float, float]:
    width = 2 * math.pi / n_blocks
    return index * width, (index + 1) * width


def mnist360_stream(train: Dataset, test: Dataset, seed: int = 0, samples_per_block: int | None = None,
                    test_per_block: int | None = None, repetitions: int = MNIST360_REPETITIONS) -> TaskStream:
    """Consecutive digit pairs under a rotation that grows through the stream.

    The pair sequence {0,1}, {1,2}, ..., {7,8} is repeated ``repetitions``
    times. Block ``g`` of the ``8 * repetitions`` blocks covers rotations
    ``[g, g + 1) * 2 pi / n_blocks`` and its samples are ordered by
    increasing angle, so each pair's appearances together span the circle.
    """
    _require_square(train)
    for d in range(9):
        if not np.any(train.y == d) or not np.any(test.y == d):
            raise ValueError(f"MNIST-360 needs digit {d} in both splits")
    rng = np.random.default_rng(seed)
    n_blocks = len(MNIST360_PAIRS) * repetitions
    appearances = {d: sum(d in p for p in MNIST360_PAIRS) * repetitions for d in range(9)}

    pools = {d: rng.permutation(np.flatnonzero(train.y == d)) for d in range(9)}
    cursor = {d: 0 for d in range(9)}

    def draw(d: int, k: int) -> np.ndarray:
        pool = pools[d]
        picked = []
        while len(picked) < k:
            if cursor[d] >= len(pool):
                pools[d] = pool = rng.permutation(pool)
                cursor[d] = 0
            take = min(k - len(picked), len(pool) - cursor[d])
            picked.extend(pool[cursor[d]:cursor[d] + take])
            cursor[d] += take
        return np.asarray(picked, dtype=np.int64)

    tasks = []
    for g in range(n_blocks):
        pair = MNIST360_PAIRS[g % len(MNIST360_PAIRS)]
        lo, hi = _block_range(g, n_blocks)
        if samples_per_block is None:
            per_digit = [max(1, int(np.sum(train.y == d)) // appearances[d]) for d in pair]
        else:
            per_digit = [samples_per_block // 2, samples_per_block - samples_per_block // 2]
        idx = np.concatenate([draw(d, k) for d, k in zip(pair, per_digit)])
        idx = idx[rng.permutation(len(idx))]
        angles = lo + (hi - lo) * np.arange(len(idx)) / len(idx)
        block_train = rotate_dataset(train.subset(idx), angles)

        test_idx = np.flatnonzero(np.isin(test.y, pair))
        if test_per_block is not None and test_per_block < len(test_idx):
            test_idx = np.sort(rng.choice(test_idx, size=test_per_block, replace=False))
        test_angles = rng.uniform(lo, hi, size=len(test_idx))
        block_test = rotate_dataset(test.subset(test_idx), test_angles)
        tasks.append(Task(block_train, block_test, pair, lo, name=f"digits {pair} @ {math.degrees(lo):.1f} deg"))
    return TaskStream(tasks, MNIST360, 9, ordered=True,
                      meta={"pairs": [list(t.classes) for t in tasks], "repetitions": repetitions})


def joint_stream(stream: TaskStream) -> TaskStream:
    """Collapse a stream into a single task holding all training data."""
    classes = tuple(sorted({c for t in stream.tasks for c in t.classes}))
    task = Task(stream.all_train(), stream.all_test(), classes, name="joint")
    return TaskStream([task], JOINT, stream.n_classes, meta={"source": stream.scenario})
