"""``rfnet`` command line: basis, steer, train, eval, sweep, inspect-checkpoint."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint as ckpt
from . import scalespace as ss
from .config import HELP, SCHEMA, ConfigError, load_config
from .mnist import IdxError, load_mnist, take_subset
from .net import Network
from .training import NumericalError, RunMetrics, TrainState, evaluate, subset_sweep, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_IO = 6


class DataError(RuntimeError):
    pass


def _say(msg=""):
    print(msg, flush=True)


# -- argument parsing ------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--config", metavar="PATH", help="INI run configuration")
    p.add_argument("--seed", type=int, help="seed for init, shuffling and subsets")
    p.add_argument("--data-dir", metavar="PATH",
                   help="MNIST directory (overrides data.dir and $RFNET_DATA_DIR)")
    p.add_argument("--out", metavar="DIR", default="runs", help="parent of the run directory")
    g = p.add_argument_group("config overrides")
    for section, keys in SCHEMA.items():
        for key in keys:
            name = f"{section}.{key}"
            g.add_argument(f"--{name}", dest=name, metavar="VALUE",
                           help=HELP.get(name, f"override [{section}] {key}"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rfnet", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("basis", help="write the basis kernels in the RFK1 text format")
    p.add_argument("action", choices=["dump"])
    p.add_argument("--order", type=int, default=3, help="maximum derivative order")
    p.add_argument("--sigma", type=float, nargs="+", default=[1.0], help="scale(s)")
    p.add_argument("--truncation", type=float, default=4.0, help="radius = ceil(truncation*sigma)")
    p.add_argument("--no-normalize", action="store_true", help="keep raw (non unit-L2) kernels")
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")

    p = sub.add_parser("steer", help="steer a 2nd/3rd order kernel and check it against rotated sampling")
    p.add_argument("--order", type=int, required=True, help="2 or 3")
    p.add_argument("--theta", type=float, required=True, help="angle in radians")
    p.add_argument("--sigma", type=float, default=2.0, help="kernel scale")
    p.add_argument("--radius", type=int, default=None, help="half-width (default ceil(4 sigma))")
    p.add_argument("--out", metavar="FILE", default=None, help="write the steered kernel here")

    p = sub.add_parser("train", help="train one network")
    _add_run_flags(p)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a saved checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True, help="checkpoint file")

    p = sub.add_parser("sweep", help="train both variants over training-set sizes")
    _add_run_flags(p)

    p = sub.add_parser("inspect-checkpoint", help="describe a checkpoint file")
    p.add_argument("path", help="checkpoint file")
    return ap


def _run_config(args):
    overrides = {name: getattr(args, name) for s, keys in SCHEMA.items() for name in
                 (f"{s}.{k}" for k in keys) if getattr(args, name) is not None}
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.data_dir is not None:
        overrides["data.dir"] = args.data_dir
    return load_config(args.config, overrides)


def _run_dir(parent, seed, tag=""):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(parent, f"{stamp}-seed{seed}{tag}")
    path, k = base, 1
    while os.path.exists(path):
        path = f"{base}.{k}"
        k += 1
    os.makedirs(path)
    return path


def _load_data(cfg):
    try:
        train_set, test_set = load_mnist(cfg.data.dir)
    except (OSError, IdxError) as exc:
        raise DataError(str(exc)) from None
    try:
        if cfg.data.train_size:
            train_set = take_subset(train_set, cfg.data.train_size, cfg.seed)
        if cfg.data.test_size:
            test_set = take_subset(test_set, cfg.data.test_size, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return train_set, test_set


def _echo_config(cfg, run_dir=None):
    text = cfg.to_ini()
    _say("# effective configuration")
    _say(text)
    if run_dir is not None:
        with open(os.path.join(run_dir, "effective_config.ini"), "w") as fh:
            fh.write(text)


# -- commands --------------------------------------------------------------

def cmd_basis(args):
    spec = ss.BasisSpec(args.order, tuple(args.sigma), args.truncation, not args.no_normalize)
    basis = ss.basis_2d(spec)
    os.makedirs(args.out, exist_ok=True)
    manifest = []
    for i, k in enumerate(basis):
        name = f"phi{i:02d}_x{k.order_x}_y{k.order_y}_s{k.sigma:g}.rfk"
        ss.write_kernel(os.path.join(args.out, name), k)
        manifest.append(f"{name} {k.order_x} {k.order_y} {k.sigma!r} {k.radius}")
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(manifest) + "\n")
    _say(f"wrote {len(basis)} kernels to {args.out} (checksum {basis.checksum()[:16]})")
    return EXIT_OK


def cmd_steer(args):
    if args.order not in ss.STEERING:
        raise ConfigError(f"steering is available for orders 2 and 3, not {args.order}")
    radius = ss.default_radius(args.sigma) if args.radius is None else args.radius
    spec = ss.BasisSpec(args.order, (args.sigma,), normalize=False)
    basis = ss.basis_2d(spec)
    kernel, coeffs = ss.steer(basis, args.order, args.theta)
    if radius != kernel.radius:
        spec = ss.BasisSpec(args.order, (args.sigma,), radius / args.sigma, normalize=False)
        kernel, coeffs = ss.steer(ss.basis_2d(spec), args.order, args.theta)
    ref = ss.rotated_grid_kernel(args.order, args.theta, args.sigma, kernel.radius)
    err = float(np.max(np.abs(kernel.taps - ref)))
    names = ["".join("x" * a + "y" * b) for a, b in ss.steering_orders(args.order)]
    _say(f"theta = {args.theta!r} rad, sigma = {args.sigma!r}, radius = {kernel.radius}")
    for n, c in zip(names, coeffs):
        _say(f"  G_{n:<4} {c: .12f}")
    _say(f"max abs error vs rotated-grid sampling: {err:.3e}")
    if args.out:
        ss.write_kernel(args.out, kernel)
        _say(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _run_config(args)
    run_dir = _run_dir(args.out, cfg.seed)
    _echo_config(cfg, run_dir)
    train_set, test_set = _load_data(cfg)
    state = None
    if args.resume:
        net, state = ckpt.load_checkpoint(args.resume)
        if net.config != cfg.network_config():
            raise ConfigError("checkpoint architecture differs from the effective config")
    else:
        net = Network(cfg.network_config())
    _say(f"run directory: {run_dir}")
    _say(f"parameters: {net.param_count()}  train: {len(train_set)}  test: {len(test_set)}")
    ck_path = os.path.join(run_dir, "checkpoint.rfnn")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    timing_path = os.path.join(run_dir, "timing.csv")
    extra = {"train": cfg.to_ini()}

    def on_epoch(st, metrics):
        ckpt.save_checkpoint(net, ck_path, st, extra)
        metrics.write_csv(metrics_path, with_seconds=False)
        metrics.write_timing(timing_path)

    if state is None:
        state = TrainState.fresh(net, cfg.seed)
    ckpt.save_checkpoint(net, ck_path, state, extra)
    RunMetrics().write_csv(metrics_path, with_seconds=False)
    RunMetrics().write_timing(timing_path)
    metrics, state = train(net, train_set, cfg.train, test_set, state, log=_say, on_epoch=on_epoch)
    _say(metrics.table())
    _say(f"wrote {ck_path} and {metrics_path}")
    return EXIT_OK


def _report(net, test_set):
    acc, loss = evaluate(net, test_set)
    return f"samples {len(test_set)}  accuracy {acc:.6f}  mean_loss {loss:.6f}"


def cmd_eval(args):
    cfg = _run_config(args)
    _echo_config(cfg)
    net, _ = ckpt.load_checkpoint(args.checkpoint)
    _, test_set = _load_data(cfg)
    _say(f"checkpoint {args.checkpoint}")
    _say(_report(net, test_set))
    return EXIT_OK


def cmd_sweep(args):
    cfg = _run_config(args)
    run_dir = _run_dir(args.out, cfg.seed, "-sweep")
    _echo_config(cfg, run_dir)
    train_set, test_set = _load_data(cfg)
    _say(f"run directory: {run_dir}")
    result = subset_sweep(train_set, test_set, cfg.sweep_config(), cfg.network_config(),
                          cfg.train, log=_say)
    with open(os.path.join(run_dir, "sweep.csv"), "w") as fh:
        fh.write(result.to_csv())
    with open(os.path.join(run_dir, "metadata.json"), "w") as fh:
        json.dump(result.metadata, fh, indent=2, sort_keys=True)
    _say(result.table())
    _say(f"balanced subsets; remainder classes per size: {result.metadata['remainder']}")
    _say(f"wrote {os.path.join(run_dir, 'sweep.csv')}")
    return EXIT_OK


def cmd_inspect(args):
    with open(args.path, "rb") as fh:
        buf = fh.read()
    ck = ckpt.decode(buf, args.path)
    _say(f"file      {args.path} ({len(buf)} bytes)")
    _say(f"format    RFNN v{ckpt.VERSION}")
    _say(f"epoch     {ck.epoch}")
    _say(f"config    {json.dumps(ck.config.to_dict(), sort_keys=True)}")
    total = 0
    for k, p in enumerate(ck.params):
        total += p.size
        _say(f"  param[{k}] shape {tuple(p.shape)} l2 {float(np.linalg.norm(p)):.6g}")
    _say(f"parameters {total}")
    _say(f"velocity  {'present' if ck.velocity else 'absent'}")
    _say(f"rng       {'present' if ck.rng_state is not None else 'absent'}")
    return EXIT_OK


COMMANDS = {
    "basis": cmd_basis,
    "steer": cmd_steer,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as exc:
        # remaining domain errors come from invalid settings
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
