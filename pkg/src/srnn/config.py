"""Experiment configuration: ``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .rnncell import NONLINEARITIES

TASKS = ("copy", "adding", "mnist", "pmnist", "chars")
TRANSITIONS = ("factorized", "plain", "orthogonal")
SPECTRUM_MODES = ("auto", "sigmoid", "direct", "frozen")
INITS = ("orthogonal", "glorot", "identity")
OPTIMIZERS = ("rmsprop", "sgd")

ENUMS = {
    "task": TASKS,
    "transition": TRANSITIONS,
    "spectrum_mode": SPECTRUM_MODES,
    "init": INITS,
    "nonlinearity": NONLINEARITIES,
    "optimizer": OPTIMIZERS,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "copy"
    T: int = 100
    n_hidden: int = 128
    nonlinearity: str = "tanh"
    prelu_alpha: float = 0.7
    prelu_trainable: bool = False
    transition: str = "factorized"
    margin: float | None = 0.1
    spectrum_mode: str = "auto"
    init: str = "orthogonal"
    preact_gain: float = 1.0
    lambda_orth: float = 0.0
    gamma_prior: float = 0.0
    optimizer: str = "rmsprop"
    euclidean_lr: float = 1e-4
    geodesic_lr: float = 1e-6
    spectrum_lr: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    clip_threshold: float | None = 100.0
    weight_decay: float = 1e-4
    batch_size: int = 50
    epochs: int = 100
    epoch_len: int = 100
    val_batches: int = 4
    patience: int | None = 25
    threshold: float | None = None
    stop_at_threshold: bool = False
    copy_positions_only: bool = False
    seed: int = 0
    diag_every: int = 10
    grad_norms: bool = False
    check_norm_bound: bool = False
    checkpoint_every: int = 0
    mnist_images: str | None = None
    mnist_labels: str | None = None
    mnist_limit: int | None = None
    mnist_val: int = 10000
    permutation_seed: int | None = None
    corpus: str | None = None
    max_len: int = 75
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key, allowed in ENUMS.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} = {getattr(self, key)!r} is invalid; expected one of {', '.join(allowed)}")
        if self.margin is not None and not 0.0 <= self.margin <= 1.0:
            raise ConfigError(f"margin must lie in [0, 1] (or be 'none'), got {self.margin}")
        if self.spectrum_mode == "sigmoid" and not self.margin:
            raise ConfigError("spectrum_mode = sigmoid needs a positive margin")
        if self.transition == "orthogonal" and self.init == "glorot":
            raise ConfigError("a hard-orthogonal plain transition needs an orthogonal or identity init")
        if self.nonlinearity == "oplu" and self.n_hidden % 2:
            raise ConfigError("oplu needs an even n_hidden")
        for key in ("T", "n_hidden", "batch_size", "epoch_len", "val_batches", "max_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.task == "copy" and self.T < 10:
            raise ConfigError("copy task needs T >= 10 so the delimiter follows the 10 symbols")
        if self.task == "adding" and self.T < 2:
            raise ConfigError("adding task needs T >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for key in ("lambda_orth", "gamma_prior", "weight_decay", "euclidean_lr", "geodesic_lr", "spectrum_lr"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be nonnegative")
        if self.clip_threshold is not None and self.clip_threshold <= 0:
            raise ConfigError("clip_threshold must be positive (or 'none')")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ConfigError("rmsprop_decay must lie in (0, 1)")

    @property
    def resolved_spectrum_mode(self) -> str:
        if self.spectrum_mode != "auto":
            return self.spectrum_mode
        if self.margin is None:
            return "direct"
        return "frozen" if self.margin == 0 else "sigmoid"

    @property
    def resolved_threshold(self) -> float | None:
        if self.threshold is not None:
            return self.threshold
        return {"copy": 0.95, "adding": 0.05}.get(self.task)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str, typ: str):
    optional = "None" in typ
    if optional and raw.lower() in ("none", "null", ""):
        return None
    if typ.startswith("bool"):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))
