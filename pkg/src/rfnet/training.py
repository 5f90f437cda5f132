"""Mini-batch SGD with momentum and weight decay, the epoch loop and the subset sweep."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ops as T
from .mnist import Dataset, balanced_quotas, subset_indices
from .net import Network, NetworkConfig


class NumericalError(FloatingPointError):
    """Non-finite values showed up in gradients or the loss."""


class BasisMutationError(RuntimeError):
    """Fixed basis taps changed while training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 64
    epochs: int = 60
    lr_drop_epochs: tuple = (30, 45)
    lr_drop_factor: float = 10.0
    seed: int = 0
    eval_every: int = 1  # 0: evaluate the test split after the last epoch only

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr_drop_factor > 0:
            raise ValueError("lr_drop_factor must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.learning_rate / self.lr_drop_factor ** drops


def sgd_step(params, grads, velocity, cfg: TrainConfig, lr=None, decays=None):
    """One in-place momentum step over parallel lists of arrays.

    ``g = grad + wd * p`` (only where ``decays`` is true), ``v = mu * v + g``,
    ``p = p - lr * v``.  Returns ``(params, velocity)``.
    """
    lr = cfg.learning_rate if lr is None else lr
    if decays is None:
        decays = [True] * len(params)
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError(
                f"non-finite gradient in parameter {k} (shape {g.shape}): "
                f"{bad} bad entries, |param|max={np.max(np.abs(params[k])):.3g}"
            )
    for p, g, v, d in zip(params, grads, velocity, decays):
        step = g + cfg.weight_decay * p if d and cfg.weight_decay else g
        v *= cfg.momentum
        v += step
        p -= lr * v
    return params, velocity


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float | None
    seconds: float


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    header = ("epoch", "train_loss", "train_acc", "test_acc", "seconds")

    def __len__(self):
        return len(self.records)

    def append(self, rec: EpochRecord):
        for acc in (rec.train_acc, rec.test_acc):
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.records.append(rec)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def rows(self, with_seconds=True):
        for r in self.records:
            row = [str(r.epoch), repr(r.train_loss), repr(r.train_acc),
                   "" if r.test_acc is None else repr(r.test_acc)]
            if with_seconds:
                row.append(f"{r.seconds:.3f}")
            yield row

    def to_csv(self, with_seconds=True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header if with_seconds else self.header[:-1])
        w.writerows(self.rows(with_seconds))
        return buf.getvalue()

    def write_csv(self, path, with_seconds=True):
        with open(path, "w") as fh:
            fh.write(self.to_csv(with_seconds))

    def write_timing(self, path):
        """Wall-clock seconds per epoch, kept apart so metrics files stay reproducible."""
        with open(path, "w") as fh:
            fh.write("epoch,seconds\n")
            fh.writelines(f"{r.epoch},{r.seconds:.3f}\n" for r in self.records)

    def table(self) -> str:
        lines = [f"{'epoch':>5} {'loss':>10} {'train':>7} {'test':>7} {'sec':>8}"]
        for r in self.records:
            test = "-" if r.test_acc is None else f"{r.test_acc:.4f}"
            lines.append(f"{r.epoch:>5} {r.train_loss:>10.5f} {r.train_acc:>7.4f} "
                         f"{test:>7} {r.seconds:>8.2f}")
        return "\n".join(lines)


@dataclass
class TrainState:
    """Everything besides the parameters that a resumed run needs."""

    epoch: int
    velocity: list
    rng_state: dict

    @classmethod
    def fresh(cls, net: Network, seed: int):
        velocity = [np.zeros_like(p) for _, p, _ in net.parameters()]
        return cls(0, velocity, np.random.default_rng(seed).bit_generator.state)


def evaluate(net: Network, dataset: Dataset, batch_size: int = 64):
    """``(accuracy, mean loss)`` of argmax predictions; parameters are untouched."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct, total_loss = 0, 0.0
    for s in range(0, len(dataset), batch_size):
        x = dataset.images[s:s + batch_size]
        y = dataset.labels[s:s + batch_size]
        logits = net.forward(x)
        loss, _ = T.softmax_xent(logits, y)
        total_loss += float(np.sum(loss))
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / len(dataset), total_loss / len(dataset)


def train(net: Network, dataset: Dataset, cfg: TrainConfig, test: Dataset | None = None,
          state: TrainState | None = None, log=None, on_epoch=None):
    """Run epochs ``state.epoch .. cfg.epochs - 1`` and return ``(metrics, state)``.

    Shuffling draws from a generator whose state is carried in ``state``, so
    a run resumed from a saved state continues exactly where it stopped.
    ``on_epoch(state, metrics)`` is called after every finished epoch.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if state is None:
        state = TrainState.fresh(net, cfg.seed)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    named = net.parameters()
    params = [p for _, p, _ in named]
    decays = [d for _, _, d in named]
    checksum = net.basis_checksum()
    metrics = RunMetrics()
    n = len(dataset)

    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            loss, logits, _ = net.loss_and_grad(x, y, need_input=False)
            if not math.isfinite(loss):
                raise NumericalError(f"loss became {loss} at epoch {epoch}, batch offset {s}")
            sgd_step(params, net.gradients(), state.velocity, cfg, lr, decays)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
        if net.basis_checksum() != checksum:
            raise BasisMutationError(f"basis taps changed during epoch {epoch}")
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        last = epoch + 1 == cfg.epochs
        test_acc = None
        if test is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            test_acc = evaluate(net, test)[0]
        rec = EpochRecord(epoch, loss_sum / n, correct / n, test_acc, time.perf_counter() - t0)
        metrics.append(rec)
        if log is not None:
            test_s = "-" if test_acc is None else f"{test_acc:.4f}"
            log(f"epoch {epoch:3d} lr {lr:.4g} loss {rec.train_loss:.5f} "
                f"train {rec.train_acc:.4f} test {test_s} ({rec.seconds:.1f}s)")
        if on_epoch is not None:
            on_epoch(state, metrics)
    return metrics, state


@dataclass(frozen=True)
class SweepConfig:
    """Dataset-size sweep; ``step_budget > 0`` sets epochs per size to a fixed step count."""

    sizes: tuple = (300, 1000, 5000)
    repeats: int = 3
    variants: tuple = ("rfnn", "cnn")
    step_budget: int = 0
    drop_fractions: tuple = (0.5, 0.75)
    test_subset: int = 0  # class-balanced test subset size, 0 for the full split
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "variants", tuple(str(v) for v in self.variants))
        object.__setattr__(self, "drop_fractions", tuple(float(f) for f in self.drop_fractions))
        if not self.sizes or min(self.sizes) < 1:
            raise ValueError("sweep sizes must be positive")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        for v in self.variants:
            if v not in ("rfnn", "cnn"):
                raise ValueError(f"unknown variant {v!r}")
        if self.step_budget < 0 or self.test_subset < 0:
            raise ValueError("step_budget and test_subset must be >= 0")
        if any(not 0 < f < 1 for f in self.drop_fractions):
            raise ValueError("drop_fractions must lie in (0, 1)")

    def train_config_for(self, size: int, base: TrainConfig, repeat: int) -> TrainConfig:
        seed = self.seed + repeat
        if self.step_budget == 0:
            return replace(base, seed=seed)
        per_epoch = -(-size // base.batch_size)
        epochs = max(1, round(self.step_budget / per_epoch))
        drops = {max(1, round(f * epochs)) for f in self.drop_fractions}
        drops = tuple(sorted(d for d in drops if d < epochs))
        return replace(base, epochs=epochs, lr_drop_epochs=drops, seed=seed, eval_every=0)


@dataclass
class SweepResult:
    rows: list  # dicts with size, variant, repeat, test_acc
    metadata: dict

    def summary(self):
        """``{(size, variant): (mean, std)}`` over repeats (population std)."""
        out = {}
        for r in self.rows:
            out.setdefault((r["size"], r["variant"]), []).append(r["test_acc"])
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("size", "variant", "repeat", "test_acc"))
        for r in self.rows:
            w.writerow((r["size"], r["variant"], r["repeat"], repr(r["test_acc"])))
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'size':>6} {'variant':>7} {'mean':>7} {'std':>7}"]
        for (size, variant), (m, s) in sorted(self.summary().items()):
            lines.append(f"{size:>6} {variant:>7} {m:>7.4f} {s:>7.4f}")
        return "\n".join(lines)


def subset_sweep(train_set: Dataset, test_set: Dataset, sweep: SweepConfig,
                 net_cfg: NetworkConfig, train_cfg: TrainConfig, log=None,
                 num_classes: int = 10) -> SweepResult:
    """Train every variant on the same balanced subset per (size, repeat)."""
    for size in sweep.sizes:
        if size > len(train_set):
            raise ValueError(f"sweep size {size} exceeds training set size {len(train_set)}")
    if sweep.test_subset:
        test_set = test_set.select(subset_indices(test_set.labels, sweep.test_subset,
                                                  sweep.seed, num_classes))
    counts = np.bincount(train_set.labels, minlength=num_classes)
    metadata = {
        "balanced": True,
        "test_size": len(test_set),
        "remainder": {},
        "epochs": {},
    }
    rows = []
    for size in sweep.sizes:
        quotas = balanced_quotas(counts, size)
        metadata["remainder"][str(size)] = [int(c) for c in np.flatnonzero(quotas > quotas.min())]
        for repeat in range(sweep.repeats):
            cfg = sweep.train_config_for(size, train_cfg, repeat)
            metadata["epochs"][str(size)] = cfg.epochs
            subset = train_set.select(subset_indices(train_set.labels, size, cfg.seed, num_classes))
            for variant in sweep.variants:
                net = Network(replace(net_cfg, variant=variant, seed=cfg.seed))
                t0 = time.perf_counter()
                train(net, subset, cfg)
                acc = evaluate(net, test_set)[0]
                rows.append(dict(size=size, variant=variant, repeat=repeat, test_acc=acc))
                if log is not None:
                    log(f"size {size:>6} repeat {repeat} {variant:>4}: test_acc {acc:.4f} "
                        f"({cfg.epochs} epochs, {time.perf_counter() - t0:.0f}s)")
    return SweepResult(rows, metadata)
