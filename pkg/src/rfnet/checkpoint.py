"""Binary checkpoints: parameters, optimizer momentum, epoch and RNG state.

Layout (all integers little-endian)::

    b"RFNN" | u32 version | u32 len | config JSON
    | u32 count | count x (u32 ndim | ndim x u32 dim | f64 data)   parameters
    | u32 count | ...                                             velocity
    | u64 epoch | u32 len | RNG state JSON

JSON blocks are written with sorted keys and no whitespace so that
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .net import Network, NetworkConfig

MAGIC = b"RFNN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class MagicMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: list          # float64 arrays in Network.parameters() order
    velocity: list        # same shapes as params, or empty
    epoch: int
    rng_state: dict | None
    extra: dict | None = None  # free-form JSON (e.g. the training config)

    def build(self) -> Network:
        """Network with these parameters loaded."""
        net = Network(self.config)
        named = net.parameters()
        if len(named) != len(self.params):
            raise CheckpointError(
                f"checkpoint holds {len(self.params)} arrays, network expects {len(named)}"
            )
        for (name, p, _), q in zip(named, self.params):
            if p.shape != q.shape:
                raise CheckpointError(f"{name}: shape {q.shape} != expected {p.shape}")
            p[...] = q
        return net


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_arrays(arrays) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def encode(ckpt: Checkpoint) -> bytes:
    header = {"network": ckpt.config.to_dict()}
    if ckpt.extra is not None:
        header["extra"] = ckpt.extra
    cfg = _dumps(header)
    rng = _dumps(ckpt.rng_state)
    return b"".join([
        MAGIC, struct.pack("<I", VERSION),
        struct.pack("<I", len(cfg)), cfg,
        _pack_arrays(ckpt.params),
        _pack_arrays(ckpt.velocity),
        struct.pack("<Q", ckpt.epoch),
        struct.pack("<I", len(rng)), rng,
    ])


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise Truncated(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def arrays(self, what):
        (count,) = self.unpack("<I", what + " count")
        out = []
        for k in range(count):
            (ndim,) = self.unpack("<I", f"{what}[{k}] rank")
            dims = self.unpack(f"<{ndim}I", f"{what}[{k}] dims")
            size = int(np.prod(dims, dtype=np.int64))
            raw = self.take(8 * size, f"{what}[{k}] data")
            out.append(np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64))
        return out


def decode(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise MagicMismatch(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<I", "config length")
    header = json.loads(r.take(n, "config"))
    params = r.arrays("params")
    velocity = r.arrays("velocity")
    (epoch,) = r.unpack("<Q", "epoch")
    (n,) = r.unpack("<I", "rng length")
    rng_state = json.loads(r.take(n, "rng state"))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(NetworkConfig.from_dict(header["network"]), params, velocity,
                      epoch, rng_state, header.get("extra"))


def from_network(net: Network, state=None, extra=None) -> Checkpoint:
    params = [p.copy() for _, p, _ in net.parameters()]
    if state is None:
        return Checkpoint(net.config, params, [], 0, None, extra)
    return Checkpoint(net.config, params, [v.copy() for v in state.velocity],
                      state.epoch, state.rng_state, extra)


def save_checkpoint(net: Network, path, state=None, extra=None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(from_network(net, state, extra)))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), path)


def load_checkpoint(path):
    """``(net, state)``; ``state`` is None when no optimizer state was stored."""
    from .training import TrainState

    ck = read_checkpoint(path)
    net = ck.build()
    state = None
    if ck.rng_state is not None:
        velocity = ck.velocity or [np.zeros_like(p) for _, p, _ in net.parameters()]
        state = TrainState(ck.epoch, [v.copy() for v in velocity], ck.rng_state)
    return net, state
