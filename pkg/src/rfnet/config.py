"""INI run configuration: sections ``arch``, ``train``, ``data`` and ``sweep``.

Every key may be overridden from the command line as ``--section.key``.
Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from importlib import resources

from .net import NetworkConfig
from .training import SweepConfig, TrainConfig

DATA_ENV = "RFNET_DATA_DIR"
DEFAULT_DATA_DIR = "data/mnist"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dir: str = DEFAULT_DATA_DIR
    train_size: int = 0  # class-balanced training subset, 0 for all
    test_size: int = 0   # class-balanced test subset, 0 for all

    def __post_init__(self):
        if self.train_size < 0 or self.test_size < 0:
            raise ValueError("train_size and test_size must be >= 0")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(cast):
    def parse(text):
        return tuple(cast(p.strip()) for p in text.split(",") if p.strip())
    parse.__name__ = f"list[{cast.__name__}]"
    return parse


# section -> key -> (dataclass field, parser)
SCHEMA = {
    "arch": {
        "variant": ("variant", str),
        "in_channels": ("in_channels", int),
        "order": ("order", int),
        "scales": ("scales", _list(float)),
        "multiscale": ("multiscale", _bool),
        "widths": ("widths", _list(int)),
        "recombine_per_block": ("recombine_per_block", int),
        "pool": ("pool", _bool),
        "classes": ("classes", int),
        "truncation": ("truncation", float),
        "normalize": ("normalize", _bool),
        "bias": ("bias", _bool),
    },
    "train": {
        "lr": ("learning_rate", float),
        "momentum": ("momentum", float),
        "weight_decay": ("weight_decay", float),
        "batch_size": ("batch_size", int),
        "epochs": ("epochs", int),
        "lr_drops": ("lr_drop_epochs", _list(int)),
        "lr_drop_factor": ("lr_drop_factor", float),
        "seed": ("seed", int),
        "eval_every": ("eval_every", int),
    },
    "data": {
        "dir": ("dir", str),
        "train_size": ("train_size", int),
        "test_size": ("test_size", int),
    },
    "sweep": {
        "sizes": ("sizes", _list(int)),
        "repeats": ("repeats", int),
        "variants": ("variants", _list(str)),
        "step_budget": ("step_budget", int),
        "drop_fractions": ("drop_fractions", _list(float)),
        "test_subset": ("test_subset", int),
    },
}

HELP = {
    "arch.variant": "rfnn (fixed basis) or cnn (free kernels of equal support)",
    "arch.order": "maximum derivative order M of the basis",
    "arch.scales": "comma-separated basis scales",
    "arch.widths": "comma-separated recombination widths, one per block",
    "train.lr": "base learning rate",
    "train.lr_drops": "comma-separated epochs at which the rate is divided",
    "train.eval_every": "test evaluation period in epochs (0: last epoch only)",
    "data.dir": f"MNIST directory (default ${DATA_ENV} or {DEFAULT_DATA_DIR})",
    "data.train_size": "balanced training subset size, 0 for all",
    "data.test_size": "balanced test subset size, 0 for all",
    "sweep.step_budget": "SGD steps per sweep run, 0 to use train.epochs",
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    arch: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def network_config(self, variant=None) -> NetworkConfig:
        arch = self.arch if variant is None else replace(self.arch, variant=variant)
        return replace(arch, seed=self.train.seed)

    def sweep_config(self) -> SweepConfig:
        return replace(self.sweep, seed=self.train.seed)

    def to_ini(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            obj = getattr(self, section)
            lines.append(f"[{section}]")
            for key, (attr, _) in keys.items():
                lines.append(f"{key} = {_fmt(getattr(obj, attr))}")
            lines.append("")
        return "\n".join(lines)


def _parse_value(section, key, text):
    attr, cast = SCHEMA[section][key]
    try:
        return attr, cast(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None


def _read_ini(text, source):
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, text in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[(section, key)] = text
    return values


def builtin_config_path(name: str) -> str:
    """Path of a config shipped with the package, e.g. ``"mnist.ini"``."""
    path = resources.files("rfnet") / "configs" / name
    if not path.is_file():
        raise ConfigError(f"no shipped config named {name!r}")
    return str(path)


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Defaults <- config file <- ``overrides`` (``{"section.key": text}``)."""
    environ = os.environ if environ is None else environ
    raw = {}
    if environ.get(DATA_ENV):
        raw[("data", "dir")] = environ[DATA_ENV]
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        raw.update(_read_ini(text, str(path)))
    for dotted, text in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown option {dotted!r}")
        raw[(section, key)] = text

    parts = {}
    for section in SCHEMA:
        kwargs = {}
        for (sec, key), text in raw.items():
            if sec == section:
                attr, value = _parse_value(sec, key, text)
                kwargs[attr] = value
        parts[section] = kwargs
    try:
        # dataclass validation runs in __post_init__
        return RunConfig(
            arch=NetworkConfig(**parts["arch"]),
            train=TrainConfig(**parts["train"]),
            data=DataConfig(**parts["data"]),
            sweep=SweepConfig(**parts["sweep"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def option_names():
    """Every ``section.key`` accepted on the command line."""
    return [f"{s}.{k}" for s, keys in SCHEMA.items() for k in keys]

