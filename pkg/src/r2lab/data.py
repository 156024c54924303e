"""Datasets: IDX image/label files and a seeded synthetic generator."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DomainError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x C x H x W in [0, 1]
    labels: np.ndarray  # N int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    def batches(self, batch_size, seed=None):
        """Yield (images, labels) minibatches; shuffled iff ``seed`` is given."""
        n = len(self)
        order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _read(path):
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as f:
        return f.read()


def _parse_idx(raw, magic, path):
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    got, = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    body = len(raw) - header
    if body != expected:
        raise FormatError(f"{path}: payload has {body} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=None, split="train"):
    """Read an IDX image/label pair (MNIST layout) into a Dataset."""
    images = _parse_idx(_read(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read(labels_path), IDX_LABELS, labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images vs {len(labels)} labels")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels, num_classes, split)


def write_idx(path, array):
    """Write a uint8 array as IDX (3-d images or 1-d labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    if array.ndim not in (1, 3):
        raise DomainError("IDX writer handles 1-d labels or 3-d images")
    header = struct.pack(">I" + "I" * array.ndim, magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def _active_mask(dim, active):
    side = int(round(np.sqrt(dim)))
    if side * side != dim or active >= 1.0:
        return np.ones(dim, dtype=bool)
    width = max(1, int(round(side * active)))
    lo = (side - width) // 2
    mask = np.zeros((side, side), dtype=bool)
    mask[lo:lo + width, lo:lo + width] = True
    return mask.ravel()


def class_means(classes, dim, density=0.1, separation=3.0, noise=0.3, means_seed=1234,
                active=1.0):
    """Sparse binary class prototypes scaled so that the closest pair of
    means sits ``separation * noise`` apart.

    For square ``dim`` only the central ``active`` fraction of the image
    side carries prototype pixels.
    """
    rng = np.random.default_rng(means_seed)
    proto = (rng.random((classes, dim)) < density) & _active_mask(dim, active)
    proto = proto.astype(np.float64)
    diff = proto[:, None, :] - proto[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    closest = dist[~np.eye(classes, dtype=bool)].min()
    if closest == 0:
        raise DomainError("two class prototypes coincide; raise density or dim")
    return proto * (separation * noise / closest)


def synth_gaussian(n, classes=10, dim=784, seed=0, separation=3.0, noise=0.3,
                   density=0.1, means_seed=1234, split="train", clip=False, active=1.0):
    """Class-conditional isotropic Gaussians around fixed sparse means.

    Means depend only on ``means_seed`` so differently seeded splits share
    them. Pixels outside the central ``active`` window are constant zero
    (like the empty border of MNIST digits). With ``clip`` the samples are
    clamped into [0, 1]. Images are shaped N x 1 x s x s when ``dim`` is a
    perfect square, else N x 1 x 1 x dim.
    """
    if n <= 0:
        raise DomainError("synthetic dataset needs n >= 1")
    if classes < 2:
        raise DomainError("need at least two classes")
    means = class_means(classes, dim, density, separation, noise, means_seed, active)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    x = means[labels] + noise * rng.standard_normal((n, dim))
    x[:, ~_active_mask(dim, active)] = 0.0
    if clip:
        x = np.clip(x, 0.0, 1.0)
    side = int(round(np.sqrt(dim)))
    shape = (n, 1, side, side) if side * side == dim else (n, 1, 1, dim)
    return Dataset(x.reshape(shape), labels.astype(np.int64), classes, split)
