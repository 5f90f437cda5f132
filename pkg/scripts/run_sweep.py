"""Train the fixed-basis and free-kernel networks on balanced MNIST subsets.

Thin wrapper over ``rfnet sweep`` that defaults to the shipped small-data
config and prints whether the fixed-basis advantage holds and grows as
training data shrinks::

    python scripts/run_sweep.py --data-dir data/mnist
"""
import argparse
import csv
import glob
import os
import sys

import numpy as np

from rfnet.cli import main as rfnet_main
from rfnet.config import builtin_config_path


def gaps(sweep_csv):
    acc = {}
    with open(sweep_csv) as fh:
        for row in csv.DictReader(fh):
            acc.setdefault((int(row["size"]), row["variant"]), []).append(float(row["test_acc"]))
    sizes = sorted({s for s, _ in acc})
    return {s: float(np.mean(acc[s, "rfnn"]) - np.mean(acc[s, "cnn"])) for s in sizes}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default=None)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--config", default=builtin_config_path("small_data_sweep.ini"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cmd = ["sweep", "--config", args.config, "--out", args.out, "--seed", str(args.seed)]
    if args.data_dir:
        cmd += ["--data-dir", args.data_dir]
    rc = rfnet_main(cmd)
    if rc:
        return rc
    run = max(glob.glob(os.path.join(args.out, f"*-seed{args.seed}-sweep*")), key=os.path.getmtime)
    g = gaps(os.path.join(run, "sweep.csv"))
    for size, gap in g.items():
        print(f"size {size:>6}: rfnn - cnn = {gap:+.4f}")
    sizes = sorted(g)
    ok = g[sizes[0]] > 0 and all(g[a] > g[b] for a, b in zip(sizes, sizes[1:]))
    print("advantage grows as data shrinks:", "yes" if ok else "no")
    return 0


if __name__ == "__main__":
    sys.exit(main())
