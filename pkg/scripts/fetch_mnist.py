"""Materialize MNIST as gzipped IDX files without direct internet access.

The only reachable source in restricted environments is usually a PyPI
mirror, so this pulls the ``mnist-hub`` wheel (which bundles the classic
``mnist.pkl.gz`` 50k/10k/10k split), recombines train+validation into the
official 60k training split and writes the four standard IDX files.

Pixel values in the pickle are ``uint8 / 256`` so the conversion back is
exact.  Usage::

    python scripts/fetch_mnist.py --out data/mnist
"""
import argparse
import glob
import gzip
import os
import pickle
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

from rfnet.mnist import write_idx


def _load_pickle_from_wheel(wheel_dir):
    wheels = glob.glob(os.path.join(wheel_dir, "mnist_hub-*.whl"))
    if not wheels:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", wheel_dir, "mnist-hub==0.1.4"],
            check=True,
        )
        wheels = glob.glob(os.path.join(wheel_dir, "mnist_hub-*.whl"))
    with zipfile.ZipFile(wheels[0]) as zf:
        blob = zf.read("mnist/data/mnist.pkl.gz")
    return pickle.loads(gzip.decompress(blob), encoding="latin1")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--wheel-dir", default=None,
                    help="directory holding (or receiving) the mnist-hub wheel")
    args = ap.parse_args(argv)

    wheel_dir = args.wheel_dir or tempfile.mkdtemp(prefix="mnist_hub_")
    (x_tr, y_tr), (x_va, y_va), (x_te, y_te) = _load_pickle_from_wheel(wheel_dir)

    def to_u8(x):
        scaled = np.asarray(x, dtype=np.float64) * 256.0
        u8 = np.rint(scaled)
        assert np.array_equal(u8, scaled), "pickle pixels are not k/256"
        return u8.astype(np.uint8).reshape(-1, 28, 28)

    train_x = np.concatenate([to_u8(x_tr), to_u8(x_va)])
    train_y = np.concatenate([y_tr, y_va]).astype(np.uint8)
    test_x, test_y = to_u8(x_te), np.asarray(y_te, dtype=np.uint8)

    os.makedirs(args.out, exist_ok=True)
    files = {
        "train-images-idx3-ubyte.gz": train_x,
        "train-labels-idx1-ubyte.gz": train_y,
        "t10k-images-idx3-ubyte.gz": test_x,
        "t10k-labels-idx1-ubyte.gz": test_y,
    }
    for name, arr in files.items():
        write_idx(os.path.join(args.out, name), arr)
        print(f"wrote {name} {arr.shape}")


if __name__ == "__main__":
    main()
