"""Datasets: IDX files, normalization, batching and synthetic point clouds."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .dynamics import InputEncoding
from .numerics import rng_stream

IDX_UBYTE = 0x08
_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}

# where the official files live; the library itself never downloads
OFFICIAL_URLS = {
    "mnist": "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "fashion-mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}


class IDXFormatError(ValueError):
    pass


def _open(path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx_raw(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into an array of its native type."""
    with _open(path) as f:
        blob = f.read()
    if len(blob) < 4:
        raise IDXFormatError(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise IDXFormatError(f"{path}: bad magic {blob[:4].hex()}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IDXFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, blob[4:header])
    dt = _IDX_DTYPES[dtype_code]
    need = int(np.prod(dims)) * dt.itemsize
    if len(blob) - header < need:
        raise IDXFormatError(f"{path}: payload has {len(blob) - header} bytes, expected {need}")
    return np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """IDX tensor as float64; unsigned-byte payloads are scaled to [0, 1]."""
    raw = read_idx_raw(path)
    if raw.dtype == np.dtype(">u1"):
        return raw.astype(np.float64) / 255.0
    return raw.astype(np.float64)


def load_idx_labels(path) -> np.ndarray:
    raw = read_idx_raw(path)
    if raw.ndim != 1:
        raise IDXFormatError(f"{path}: label files are one-dimensional, got shape {raw.shape}")
    return raw.astype(np.int64)


def save_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file. Float input in [0, 1] is scaled by 255."""
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = np.rint(a * 255.0)
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValueError("IDX ubyte payload must lie in [0, 255]")
    a = a.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, IDX_UBYTE, a.ndim))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes(order="C"))


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) or (N, D)
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    mean: float = 0.0
    std: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.n_classes, self.split, self.mean, self.std, self.name)

    def normalized(self, mean: Optional[float] = None, std: Optional[float] = None) -> "Dataset":
        """Global-statistics normalization; statistics are fitted here unless given."""
        mean = float(self.images.mean()) if mean is None else mean
        std = float(self.images.std()) if std is None else std
        if not np.isfinite(std) or std <= 0:
            raise ValueError("normalization needs a positive, finite std")
        return Dataset((self.images - mean) / std, self.labels, self.n_classes, self.split, mean, std, self.name)


def load_idx_dataset(images_path, labels_path, n_classes: int = 10, split: str = "train",
                     name: str = "", limit: Optional[int] = None) -> Dataset:
    images = load_idx(images_path)
    labels = load_idx_labels(labels_path)
    if images.ndim == 3:
        images = images[..., None]
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels, n_classes, split, name=name)


def load_cifar_binary(path, n_classes: int = 10, split: str = "train") -> Dataset:
    """CIFAR-10/100 binary batches: one label byte (CIFAR-100: coarse + fine) then 3072 CHW bytes."""
    raw = np.fromfile(path, dtype=np.uint8)
    label_bytes = 1 if n_classes == 10 else 2
    rec = label_bytes + 3072
    if raw.size % rec:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of the {rec}-byte record")
    raw = raw.reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return Dataset(images, labels, n_classes, split)


def encode_constant_current(image: np.ndarray, mean: float = 0.0, std: float = 1.0) -> InputEncoding:
    """The normalized image as the same input current at every step."""
    if not (np.isfinite(mean) and np.isfinite(std)) or std <= 0:
        raise ValueError("normalization needs finite mean and positive std")
    return InputEncoding.constant((np.asarray(image, dtype=np.float64) - mean) / std)


def random_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Per-sample random crop (zero padding ``pad``) and horizontal flip, (N, H, W, C)."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, ::-1] if flip[i] else crop
    return out


@dataclass
class BatchIterator:
    """Shuffled mini-batches; every epoch is a fresh permutation of the data."""

    dataset: Dataset
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    epoch: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def order(self, epoch: Optional[int] = None) -> np.ndarray:
        e = self.epoch if epoch is None else epoch
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return rng_stream(self.seed, 1000 + e).permutation(n)

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        idx = self.order()
        aug_rng = rng_stream(self.seed, 5000 + self.epoch) if self.augment else None
        for start in range(0, len(idx), self.batch_size):
            b = idx[start:start + self.batch_size]
            x = self.dataset.images[b]
            if aug_rng is not None:
                x = random_crop_flip(x, aug_rng)
            yield x, self.dataset.labels[b]
        self.epoch += 1


def synth_dataset(kind: str, n: int, seed: int = 0, dim: int = 2, n_classes: int = 2,
                  separation: float = 5.0) -> Dataset:
    """Reproducible labelled point clouds.

    ``blobs``: Gaussian clusters (unit std) whose centres sit ``separation``
    apart. ``xor``: the four corners of the unit square first (labels 0, 1,
    1, 0), then jittered copies.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = rng_stream(seed, 7)
    if kind == "blobs":
        centres = np.zeros((n_classes, dim))
        if dim >= n_classes:
            centres[np.arange(n_classes), np.arange(n_classes)] = separation / np.sqrt(2)
        elif dim >= 2:
            # neighbours on a circle, ``separation`` apart
            r = separation / (2 * np.sin(np.pi / n_classes))
            ang = 2 * np.pi * np.arange(n_classes) / n_classes
            centres[:, 0], centres[:, 1] = r * np.cos(ang), r * np.sin(ang)
        else:
            centres[:, 0] = separation * np.arange(n_classes)
        centres -= centres.mean(axis=0)
        labels = np.arange(n) % n_classes
        labels = labels[rng.permutation(n)]
        x = centres[labels] + rng.standard_normal((n, dim))
        return Dataset(x, labels, n_classes, name="blobs")
    if kind == "xor":
        corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        corner_labels = np.array([0, 1, 1, 0])
        reps = np.arange(n) % 4
        x = corners[reps].copy()
        if n > 4:
            x[4:] += 0.1 * rng.standard_normal((n - 4, 2))
        return Dataset(x, corner_labels[reps], 2, name="xor")
    raise ValueError(f"unknown synthetic dataset {kind!r}")
