"""Sweep harness: train and evaluate one cell per (parameter value, seed)."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..config import ExperimentConfig
from ..errors import ConfigError
from ..synthdata import DatasetFile
from .metrics import MetricReport, evaluate

SWEEPABLE = ("T", "t_p", "strides", "alpha", "n_masks", "dropout_mode")
CSV_COLUMNS = ["param", "value", "seed", "mpjpe", "nmpjpe", "pmpjpe", "pck3d", "eval_head",
               "wall_seconds"]


@dataclass
class AblationSpec:
    param: str
    values: list
    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def __post_init__(self):
        if self.param not in SWEEPABLE:
            raise ConfigError(f"cannot sweep {self.param!r}; choose from {SWEEPABLE}")
        if not self.values:
            raise ConfigError("ablation needs at least one value")
        if not self.seeds:
            raise ConfigError("ablation needs at least one seed")
        for v in self.values:
            self.config_for(v)  # validates every value up front

    def config_for(self, value) -> ExperimentConfig:
        p = self.param
        if p == "dropout_mode":
            mode, rate = parse_dropout(value)
            return self.base.replace(dropout_mode=mode, dropout_rate=rate)
        if p == "strides":
            return self.base.replace(strides=tuple(value))
        if p == "T":
            T = int(value)
            return self.base.replace(T=T, t_p=min(self.base.t_p, T // 2),
                                     strides=tuple(s for s in self.base.strides if s < T))
        return self.base.replace(**{p: value})


def parse_dropout(value) -> tuple[str, float]:
    """``"structured"``, ``"none"``, ``"uniform:0.3"`` or a bare rate (uniform; 0 means none)."""
    if isinstance(value, (int, float)):
        rate = float(value)
        return ("none", 0.0) if rate == 0.0 else ("uniform", rate)
    text = str(value)
    if text in ("structured", "none"):
        return text, 0.0
    if text.startswith("uniform:"):
        return "uniform", float(text.split(":", 1)[1])
    try:
        return parse_dropout(float(text))
    except ValueError:
        raise ConfigError(f"bad dropout_mode value {value!r}") from None


def format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return "{" + ",".join(str(v) for v in value) + "}"
    return str(value)


def train_and_evaluate(ds: DatasetFile, cfg: ExperimentConfig, seed: int,
                       heads=("lnet", "rnet"), frame_range=None) -> tuple[list[MetricReport], object]:
    """One cell: train on the train split, evaluate on the test split."""
    from ..training import make_tracks, run_training

    trainer = run_training(ds, cfg, seed=seed)
    tracks = make_tracks(ds.split("test"), ds.cameras)
    reports = evaluate(trainer.state, trainer.ops, tracks, heads=heads, partitions=False,
                       frame_range=frame_range)
    return reports, trainer


def common_frames(spec: AblationSpec, ds: DatasetFile) -> tuple[int, int] | None:
    """Target frames every value of a ``t_p`` sweep can score; None for other sweeps."""
    if spec.param != "t_p":
        return None
    T = spec.base.T
    shortest = min(s.n_frames for s in ds.split("test"))
    lo, hi = max(spec.values), shortest - T + 1 + min(spec.values)
    if lo >= hi:
        raise ConfigError(f"t_p values {spec.values} share no target frame")
    return lo, hi


def run_ablation(spec: AblationSpec, ds: DatasetFile, out_csv=None, cell=None) -> list[dict]:
    """Every value x seed; each finished cell is appended to ``out_csv`` immediately.

    ``cell(ds, cfg, seed)`` may replace the default train-and-evaluate step; it
    must return a list of :class:`MetricReport`.
    """
    rows = []
    frame_range = common_frames(spec, ds)
    fh = writer = None
    if out_csv is not None:
        fh = open(Path(out_csv), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        fh.flush()
    try:
        for value in spec.values:
            cfg = spec.config_for(value)
            for seed in spec.seeds:
                t0 = time.perf_counter()
                if cell is None:
                    reports, _ = train_and_evaluate(ds, cfg, seed, frame_range=frame_range)
                else:
                    reports = cell(ds, cfg, seed)
                wall = time.perf_counter() - t0
                for r in reports:
                    row = {"param": spec.param, "value": format_value(value), "seed": seed,
                           "mpjpe": r.mpjpe, "nmpjpe": r.nmpjpe, "pmpjpe": r.pmpjpe,
                           "pck3d": r.pck3d, "eval_head": r.eval_head, "wall_seconds": wall}
                    rows.append(row)
                    if writer is not None:
                        writer.writerow(row)
                if fh is not None:
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return rows
