"""Structured binary node masks simulating spatio-temporally coherent occlusion.

Each mask keeps exactly ``beta = floor(N / alpha)`` of the ``N = T * N_J``
graph nodes. Dropped nodes come in temporally contiguous runs on single
joints, the way a limb stays hidden behind an obstacle for a while.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetParseError
from .numkit import mask_multiply


@dataclass(frozen=True)
class MaskParams:
    n_masks: int
    alpha: float
    n_nodes: int
    n_joints: int
    seed: int = 0
    min_run: int = 3
    max_run: int = 9

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ConfigError(f"mask overlap alpha must be >= 1, got {self.alpha}")
        if self.n_masks < 1:
            raise ConfigError("need at least one mask")
        if self.n_joints < 1 or self.n_nodes % self.n_joints:
            raise ConfigError(f"{self.n_nodes} nodes is not a whole number of "
                              f"{self.n_joints}-joint frames")
        if not 1 <= self.min_run <= self.max_run:
            raise ConfigError("run lengths must satisfy 1 <= min_run <= max_run")
        if not 1 <= self.beta <= self.n_nodes:
            raise ConfigError(f"beta={self.beta} outside [1, {self.n_nodes}]")

    @property
    def beta(self) -> int:
        # small epsilon keeps exact quotients such as 527/1.0 from rounding down
        return int(math.floor(self.n_nodes / self.alpha + 1e-9))

    @property
    def T(self) -> int:
        return self.n_nodes // self.n_joints


@dataclass(frozen=True)
class MaskSet:
    masks: np.ndarray  # (n_masks, N) bool
    params: MaskParams

    def __len__(self):
        return self.masks.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.masks[i]

    def to_dict(self) -> dict:
        return {"params": asdict(self.params),
                "masks": [np.nonzero(m)[0].tolist() for m in self.masks]}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSet":
        try:
            params = MaskParams(**d["params"])
            masks = np.zeros((len(d["masks"]), params.n_nodes), bool)
            for i, idx in enumerate(d["masks"]):
                masks[i, idx] = True
        except (KeyError, TypeError, IndexError) as exc:
            raise DatasetParseError(f"malformed mask set: {exc}") from exc
        masks.flags.writeable = False
        return cls(masks=masks, params=params)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MaskSet":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def generate_masks(params: MaskParams) -> MaskSet:
    rng = np.random.default_rng(params.seed)
    T, nj = params.T, params.n_joints
    n_drop = params.n_nodes - params.beta
    masks = np.ones((params.n_masks, params.n_nodes), bool)
    for i in range(params.n_masks):
        keep = masks[i].reshape(T, nj)
        dropped = 0
        while dropped < n_drop:
            j = int(rng.integers(nj))
            t0 = int(rng.integers(T))
            length = int(rng.integers(params.min_run, params.max_run + 1))
            for t in range(t0, min(t0 + length, T)):
                if keep[t, j]:
                    keep[t, j] = False
                    dropped += 1
                    if dropped == n_drop:
                        break
    masks.flags.writeable = False
    return MaskSet(masks=masks, params=params)


def all_ones(n_nodes: int) -> np.ndarray:
    return np.ones(n_nodes, bool)


def apply_mask(features, mask):
    """Zero the feature rows of dropped nodes, ``H * M``; differentiable in ``features``."""
    m = np.asarray(mask, dtype=np.float64)
    return mask_multiply(features, m[..., None])


def dropped_runs(mask: np.ndarray, n_joints: int) -> list[list[int]]:
    """Lengths of contiguous dropped-frame runs, per joint."""
    grid = ~np.asarray(mask, bool).reshape(-1, n_joints)
    out = []
    for j in range(n_joints):
        col = np.concatenate([[0], grid[:, j].astype(np.int8), [0]])
        d = np.diff(col)
        starts, ends = np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]
        out.append((ends - starts).tolist())
    return out


def mask_stats(ms: MaskSet) -> dict:
    p = ms.params
    beta = p.beta
    pops = ms.masks.sum(axis=1)
    overlap = None
    if len(ms) > 1:
        vals = [np.logical_and(a, b).sum() / beta for a, b in combinations(ms.masks, 2)]
        overlap = float(np.mean(vals))
    hist: dict[int, int] = {}
    per_mask = []
    for m in ms.masks:
        runs = [r for joint in dropped_runs(m, p.n_joints) for r in joint]
        for r in runs:
            hist[r] = hist.get(r, 0) + 1
        per_mask.append({"max_run": max(runs, default=0),
                         "mean_run": float(np.mean(runs)) if runs else 0.0})
    return {
        "n_masks": len(ms), "n_nodes": p.n_nodes, "beta": beta, "alpha": p.alpha,
        "masked_rate": 1.0 - beta / p.n_nodes,
        "popcounts": pops.tolist(),
        "mean_pairwise_overlap": overlap,
        "run_length_histogram": dict(sorted(hist.items())),
        "per_mask": per_mask,
    }


def write_stats_csv(ms: MaskSet, path):
    stats = mask_stats(ms)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mask_id", "popcount", "max_run", "mean_run"])
        for i, (pop, pm) in enumerate(zip(stats["popcounts"], stats["per_mask"])):
            w.writerow([i, pop, pm["max_run"], f"{pm['mean_run']:.6f}"])
