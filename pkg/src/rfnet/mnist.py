"""MNIST ingestion: IDX container parsing, normalization and balanced subsets."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# IDX type code -> numpy big-endian dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxFormatError(IdxError):
    pass


class IdxTruncationError(IdxError):
    def __init__(self, path, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{path}: truncated payload, expected {expected} bytes, got {actual}"
        )


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, path="<bytes>") -> np.ndarray:
    """Decode an IDX byte string into an array with its declared shape."""
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    zero, type_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or type_code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{buf[:4].hex()}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: header declares {ndim} dims but file ends early")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = _IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - header
    if actual != expected:
        raise IdxTruncationError(path, expected, actual)
    arr = np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _TYPE_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim)
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_IDX_TYPES[code]).tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    path = os.fspath(path)
    data = encode_idx(arr)
    if path.endswith(".gz"):
        # no mtime and no embedded name keep the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile("", "wb", fileobj=raw, mtime=0) as fh:
            fh.write(data)
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def _read_magic(path, magic, ndim):
    buf = _read_bytes(path)
    if len(buf) >= 4 and struct.unpack(">I", buf[:4])[0] != magic:
        raise IdxFormatError(
            f"{path}: magic {struct.unpack('>I', buf[:4])[0]} != expected {magic}"
        )
    arr = parse_idx(buf, path)
    if arr.ndim != ndim:
        raise IdxFormatError(f"{path}: expected {ndim} dims, found {arr.ndim}")
    return arr


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images ``[N, rows, cols]`` from an IDX3 file (magic 2051)."""
    return _read_magic(path, IMAGE_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    """Raw uint8 labels ``[N]`` from an IDX1 file (magic 2049)."""
    return _read_magic(path, LABEL_MAGIC, 1)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, 1, H, W] float64, mean-subtracted
    labels: np.ndarray  # [N] int64
    mean: float

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)

    def select(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.mean)


def _as_dataset(raw_images, labels, mean):
    x = np.asarray(raw_images, dtype=np.float64) / 255.0 - mean
    return Dataset(x[:, None, :, :], np.asarray(labels, dtype=np.int64), mean)


def normalize(raw_train, raw_test):
    """Scale both splits to [0,1] and subtract the scalar training mean.

    Each argument is an ``(images, labels)`` pair of raw uint8 arrays.  The
    test split is never consulted when computing the mean.
    """
    train_images, train_labels = raw_train
    test_images, test_labels = raw_test
    if len(train_images) == 0:
        raise ValueError("training split is empty")
    mean = float(np.mean(np.asarray(train_images, dtype=np.float64) / 255.0))
    return (
        _as_dataset(train_images, train_labels, mean),
        _as_dataset(test_images, test_labels, mean),
    )


def _find(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {data_dir}")


def load_mnist(data_dir):
    """Read the four standard MNIST files from ``data_dir`` and normalize."""
    raw = []
    for img_stem, lbl_stem in (TRAIN_FILES, TEST_FILES):
        images = read_idx_images(_find(data_dir, img_stem))
        labels = read_idx_labels(_find(data_dir, lbl_stem))
        if len(images) != len(labels):
            raise IdxFormatError(
                f"{img_stem}: {len(images)} images vs {len(labels)} labels"
            )
        raw.append((images, labels))
    return normalize(raw[0], raw[1])


def balanced_quotas(counts: np.ndarray, n: int) -> np.ndarray:
    """Per-class sample quotas summing to ``n``.

    Quotas are as equal as possible; the remainder goes round-robin to the
    lowest class ids, and any class that runs out passes its deficit on to
    the classes that still have samples left.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if n > counts.sum():
        raise ValueError(f"requested {n} samples, only {counts.sum()} available")
    quotas = np.zeros_like(counts)
    left = n
    while left > 0:
        open_ = np.flatnonzero(quotas < counts)
        share, rem = divmod(left, len(open_))
        add = np.full(len(open_), share)
        add[:rem] += 1
        add = np.minimum(add, counts[open_] - quotas[open_])
        quotas[open_] += add
        left -= int(add.sum())
    return quotas


def subset_indices(labels, n, seed, num_classes=10):
    """Indices of a class-balanced subset; below ``num_classes`` samples the lowest ids get one each."""
    labels = np.asarray(labels)
    if n < 1:
        raise ValueError(f"subset size must be positive, got {n}")
    if n > len(labels):
        raise ValueError(f"subset size {n} exceeds dataset size {len(labels)}")
    rng = np.random.default_rng(seed)
    counts = np.bincount(labels, minlength=num_classes)
    quotas = balanced_quotas(counts, n)
    picked = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        picked.append(rng.choice(members, size=quotas[c], replace=False))
    idx = np.concatenate(picked)
    return rng.permutation(idx)


def take_subset(dataset: Dataset, n: int, seed: int, num_classes: int = 10) -> Dataset:
    """Class-balanced random subset of ``n`` samples, without replacement."""
    return dataset.select(subset_indices(dataset.labels, n, seed, num_classes))
