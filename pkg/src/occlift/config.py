"""Canonical defaults, the desk-scale preset, and JSON config loading.

Every default hyperparameter in the package is read from here.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

# published constants
WINDOW_T = 31
TARGET_FRAME = 15
STRIDES = (1, 3, 5, 7)
N_MASKS = 32
ALPHA = 1.8
LNET_HIDDEN = 2048
LNET_LAYERS = 2
LNET_DROPOUT = 0.10
GCN_HIDDEN = (16, 32)
GCN_OUT = 64
WARMUP_ITERS = 1000
LR_WARMUP = 1e-4
LR_PHI = 5e-5
LR_THETA = 1e-4
PCK_THRESHOLD_MM = 150.0

SEED_ENV = "OCCLIFT_SEED"


@dataclass
class TrainConfig:
    warmup_iters: int = WARMUP_ITERS
    total_iters: int = 15000
    lr_warmup: float = LR_WARMUP
    lr_phi: float = LR_PHI
    lr_theta: float = LR_THETA
    batch_size: int = 1
    warmup_batch_size: int = 64
    seed: int = 0
    mode: str = "semi_supervised"  # or "supervised"
    checkpoint_every: int = 0  # 0: only at the end
    log_every: int = 0

    def __post_init__(self):
        for name in ("lr_warmup", "lr_phi", "lr_theta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_iters < 0 or self.total_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.warmup_iters > self.total_iters:
            raise ConfigError(f"warmup_iters={self.warmup_iters} exceeds total_iters={self.total_iters}")
        if self.batch_size < 1 or self.warmup_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.mode not in ("supervised", "semi_supervised"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


@dataclass
class ExperimentConfig:
    """Everything a training run needs besides the dataset."""

    skeleton: str = "h36m17"
    T: int = WINDOW_T
    t_p: int = TARGET_FRAME
    strides: tuple[int, ...] = STRIDES
    n_masks: int = N_MASKS
    alpha: float = ALPHA
    mask_seed: int = 0
    dropout_mode: str = "structured"  # structured | uniform | none
    dropout_rate: float = 0.0  # node-drop rate for dropout_mode="uniform"
    lnet_hidden: int = LNET_HIDDEN
    lnet_layers: int = LNET_LAYERS
    lnet_dropout: float = LNET_DROPOUT
    gcn_hidden: tuple[int, ...] = GCN_HIDDEN
    gcn_out: int = GCN_OUT
    fusion: str = "flatten"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.gcn_hidden = tuple(int(h) for h in self.gcn_hidden)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.dropout_mode not in ("structured", "uniform", "none"):
            raise ConfigError(f"unknown dropout_mode {self.dropout_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        for d in self.strides:
            if not 1 <= d < self.T:
                raise ConfigError(f"temporal stride {d} violates 1 <= stride < T={self.T}")
        if not 0 <= self.t_p < self.T:
            raise ConfigError(f"target frame t_p={self.t_p} outside [0, T={self.T})")
        if self.alpha < 1.0:
            raise ConfigError(f"mask overlap alpha must be >= 1, got {self.alpha}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["gcn_hidden"] = list(self.gcn_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        tknown = {f.name for f in fields(TrainConfig)}
        tunknown = set(d.get("train", {})) - tknown
        if tunknown:
            raise ConfigError(f"unknown train config keys: {sorted(tunknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        train = dict(d.pop("train"))
        train.update(changes.pop("train", {}))
        d.update(changes)
        return ExperimentConfig.from_dict({**d, "train": train})


def desk_preset() -> ExperimentConfig:
    """Single-core scale: narrower LNet, short schedule. Architecture otherwise canonical."""
    return ExperimentConfig(lnet_hidden=256,
                            train=TrainConfig(warmup_iters=1000, total_iters=3000,
                                              batch_size=8, warmup_batch_size=64))


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return ExperimentConfig.from_dict(doc)


def resolve_seed(config_seed: int, cli_seed: int | None = None) -> int:
    """CLI flag, then the environment variable, then the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(config_seed)
