import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfnet import mnist

DATA_DIR = os.environ.get("RFNET_DATA_DIR", os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
HAVE_MNIST = os.path.exists(os.path.join(DATA_DIR, "train-images-idx3-ubyte.gz")) or \
    os.path.exists(os.path.join(DATA_DIR, "train-images-idx3-ubyte"))


def idx_images(n, rows=28, cols=28, payload=None):
    head = struct.pack(">HBB3I", 0, 8, 3, n, rows, cols)
    if payload is None:
        payload = bytes(range(256)) * (n * rows * cols // 256) + bytes(n * rows * cols % 256)
    return head + payload


def test_parse_single_image():
    buf = bytes([0, 0, 8, 3]) + struct.pack(">3I", 1, 28, 28) + bytes(range(256)) * 3 + bytes(16)
    arr = mnist.parse_idx(buf)
    assert arr.shape == (1, 28, 28) and arr.dtype == np.uint8
    assert arr[0, 0, 5] == 5


def test_read_labels(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(struct.pack(">II", 2049, 3) + bytes([0, 5, 9]))
    assert mnist.read_idx_labels(p).tolist() == [0, 5, 9]


def test_wrong_magic(tmp_path):
    p = tmp_path / "labels"
    p.write_bytes(struct.pack(">II", 2049, 3) + bytes([0, 5, 9]))
    with pytest.raises(mnist.IdxFormatError):
        mnist.read_idx_images(p)
    p.write_bytes(b"\x01\x02\x08\x01" + struct.pack(">I", 0))
    with pytest.raises(mnist.IdxFormatError):
        mnist.read_idx_labels(p)


def test_truncated_names_byte_counts(tmp_path):
    p = tmp_path / "images"
    full = idx_images(2)
    p.write_bytes(full[:-100])
    with pytest.raises(mnist.IdxTruncationError) as info:
        mnist.read_idx_images(p)
    assert info.value.expected == 2 * 784 and info.value.actual == 2 * 784 - 100
    assert "1568" in str(info.value) and "1468" in str(info.value)


def test_extra_bytes_rejected():
    with pytest.raises(mnist.IdxTruncationError):
        mnist.parse_idx(idx_images(1) + b"\x00")


def test_gzip_transparent(tmp_path):
    raw = idx_images(3)
    (tmp_path / "a").write_bytes(raw)
    with gzip.open(tmp_path / "a.gz", "wb") as fh:
        fh.write(raw)
    np.testing.assert_array_equal(mnist.read_idx_images(tmp_path / "a"),
                                  mnist.read_idx_images(tmp_path / "a.gz"))


@given(st.lists(st.integers(0, 255), min_size=0, max_size=50))
def test_label_roundtrip_bytes(labels):
    raw = struct.pack(">II", 2049, len(labels)) + bytes(labels)
    arr = mnist.parse_idx(raw)
    assert mnist.encode_idx(arr) == raw


@pytest.mark.parametrize("dtype", ["u1", "i1", ">i2", ">i4", ">f4", ">f8"])
def test_encode_dtypes_roundtrip(dtype):
    a = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
    if dtype == "u1":
        a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    b = mnist.parse_idx(mnist.encode_idx(a))
    np.testing.assert_array_equal(a, b)
    assert mnist.encode_idx(b) == mnist.encode_idx(a)


def test_write_idx_gzip_reproducible(tmp_path):
    a = np.arange(50, dtype=np.uint8)
    mnist.write_idx(tmp_path / "x.gz", a)
    mnist.write_idx(tmp_path / "y.gz", a)
    assert (tmp_path / "x.gz").read_bytes() == (tmp_path / "y.gz").read_bytes()


# -- normalization -------------------------------------------------------

def test_normalize_extremes():
    lbl = np.zeros(2, dtype=np.uint8)
    tr, te = mnist.normalize((np.zeros((2, 4, 4), np.uint8), lbl), (np.zeros((2, 4, 4), np.uint8), lbl))
    assert tr.mean == 0.0 and np.all(tr.images == 0.0) and np.all(te.images == 0)
    full = np.full((2, 4, 4), 255, np.uint8)
    tr, te = mnist.normalize((full, lbl), (full, lbl))
    assert tr.mean == 1.0 and np.all(tr.images == 0.0)
    assert tr.images.shape == (2, 1, 4, 4) and tr.labels.dtype == np.int64


def test_test_split_never_moves_mean():
    rng = np.random.default_rng(0)
    train = (rng.integers(0, 256, (5, 4, 4)).astype(np.uint8), np.arange(5, dtype=np.uint8))
    calm = (np.zeros((3, 4, 4), np.uint8), np.zeros(3, np.uint8))
    wild = (np.full((3, 4, 4), 255, np.uint8), np.zeros(3, np.uint8))
    m1 = mnist.normalize(train, calm)[0].mean
    a, b = mnist.normalize(train, wild)
    assert m1 == a.mean == b.mean
    np.testing.assert_allclose(b.images, 1.0 - m1)


def test_normalize_rejects_empty():
    with pytest.raises(ValueError):
        mnist.normalize((np.zeros((0, 4, 4), np.uint8), np.zeros(0)), (np.zeros((1, 4, 4)), [0]))


def test_dataset_length_check():
    with pytest.raises(ValueError):
        mnist.Dataset(np.zeros((2, 1, 4, 4)), np.zeros(3, dtype=np.int64), 0.0)


# -- subsets -------------------------------------------------------------

def fake_labels(n=1000, seed=0):
    return np.random.default_rng(seed).integers(0, 10, n)


def test_subset_300_is_balanced():
    idx = mnist.subset_indices(fake_labels(), 300, seed=3)
    counts = np.bincount(fake_labels()[idx], minlength=10)
    assert counts.tolist() == [30] * 10
    assert len(set(idx.tolist())) == 300


def test_subset_same_seed_same_indices():
    a = mnist.subset_indices(fake_labels(), 120, seed=9)
    b = mnist.subset_indices(fake_labels(), 120, seed=9)
    c = mnist.subset_indices(fake_labels(), 120, seed=10)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_subset_full_is_permutation():
    labels = fake_labels(50)
    idx = mnist.subset_indices(labels, 50, seed=0)
    assert sorted(idx.tolist()) == list(range(50))


def test_subset_errors():
    with pytest.raises(ValueError):
        mnist.subset_indices(fake_labels(), 0, seed=0)
    with pytest.raises(ValueError):
        mnist.subset_indices(fake_labels(20), 21, seed=0)


def test_subset_smaller_than_class_count():
    labels = fake_labels()
    got = np.sort(labels[mnist.subset_indices(labels, 8, seed=0)])
    assert got.tolist() == list(range(8))


@given(n=st.integers(1, 400))
def test_remainder_rule(n):
    labels = fake_labels(600, seed=1)
    counts = np.bincount(labels[mnist.subset_indices(labels, n, seed=0)], minlength=10)
    assert counts.sum() == n
    q, r = divmod(n, 10)
    # round-robin remainder to the lowest class ids
    assert counts.tolist() == [q + 1] * r + [q] * (10 - r)


def test_quotas_redistribute_deficit():
    counts = np.array([1, 50, 50])
    q = mnist.balanced_quotas(counts, 30)
    assert q.tolist() == [1, 15, 14]
    with pytest.raises(ValueError):
        mnist.balanced_quotas(counts, 102)


def test_take_subset_dataset():
    ds = mnist.Dataset(np.arange(40.0).reshape(40, 1, 1, 1), np.arange(40) % 10, 0.5)
    sub = mnist.take_subset(ds, 20, seed=1)
    assert len(sub) == 20 and sub.mean == 0.5
    np.testing.assert_array_equal(sub.images[:, 0, 0, 0].astype(int) % 10, sub.labels)


# -- the real files --------------------------------------------------------

@pytest.mark.skipif(not HAVE_MNIST, reason="MNIST files not present (run scripts/fetch_mnist.py)")
def test_real_mnist():
    tr, te = mnist.load_mnist(DATA_DIR)
    assert tr.images.shape == (60000, 1, 28, 28) and te.images.shape == (10000, 1, 28, 28)
    assert abs(tr.mean - 0.1307) <= 0.001
    assert set(np.unique(tr.labels)) == set(range(10))
    raw = mnist._read_bytes(mnist._find(DATA_DIR, "t10k-labels-idx1-ubyte"))
    assert mnist.encode_idx(mnist.parse_idx(raw)) == raw
