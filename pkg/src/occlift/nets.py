"""Lifting MLP and relation-specific graph refiner.

Both networks are written against :mod:`occlift.numkit` primitives, so the
same code runs in eval mode on plain tensors and in training mode on a tape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import ROOT, Camera, DepthDecomposition, backproject
from .masks import apply_mask
from .numkit import (Tape, Tensor, add, dropout, matmul, maximum, mul, propagate, relu,
                     reshape, take)

# network outputs are in metres; poses and losses are in millimetres
DEPTH_UNIT_MM = 1000.0


@dataclass
class LNetConfig:
    n_joints: int = 17
    hidden_size: int = 2048
    n_hidden: int = 2
    dropout_rate: float = 0.10

    def __post_init__(self):
        if self.hidden_size < 1 or self.n_hidden < 1:
            raise ConfigError("LNet hidden sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"LNet dropout must be in [0, 1), got {self.dropout_rate}")


@dataclass
class RNetConfig:
    T: int = 31
    n_joints: int = 17
    strides: tuple[int, ...] = (1, 3, 5, 7)
    t_p: int = 15
    gcn_hidden: tuple[int, ...] = (16, 32)
    gcn_out: int = 64
    fusion: str = "flatten"  # or "target_rows"

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.gcn_hidden = tuple(int(h) for h in self.gcn_hidden)
        if not 0 <= self.t_p < self.T:
            raise ConfigError(f"target frame t_p={self.t_p} outside [0, T={self.T})")
        if self.gcn_out < 1 or any(h < 1 for h in self.gcn_hidden):
            raise ConfigError("GCN layer sizes must be positive")
        if self.fusion not in ("flatten", "target_rows"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")

    @property
    def n_relations(self) -> int:
        return len(self.strides) + 1

    @property
    def N(self) -> int:
        return self.T * self.n_joints


def lnet_shapes(cfg: LNetConfig) -> dict[str, tuple[int, int] | tuple[int]]:
    dims = [2 * cfg.n_joints] + [cfg.hidden_size] * cfg.n_hidden + [cfg.n_joints]
    out = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        out[f"lnet.{i}.weight"] = (a, b)
        out[f"lnet.{i}.bias"] = (b,)
    return out


def rnet_shapes(cfg: RNetConfig) -> dict[str, tuple[int, ...]]:
    dims = [1, *cfg.gcn_hidden, cfg.gcn_out]
    out = {}
    for r in range(cfg.n_relations):
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            out[f"rnet.rel{r}.{i}.weight"] = (a, b)
            out[f"rnet.rel{r}.{i}.bias"] = (b,)
    rows = cfg.N if cfg.fusion == "flatten" else cfg.n_joints
    out["rnet.fusion.weight"] = (rows * cfg.gcn_out, cfg.n_joints)
    out["rnet.fusion.bias"] = (cfg.n_joints,)
    return out


@dataclass
class ModelState:
    lnet: LNetConfig
    rnet: RNetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    @property
    def lnet_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("lnet.")]

    @property
    def rnet_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("rnet.")]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {**lnet_shapes(self.lnet), **rnet_shapes(self.rnet)}

    def config_dict(self) -> dict:
        return {"lnet": asdict(self.lnet),
                "rnet": {**asdict(self.rnet), "strides": list(self.rnet.strides),
                         "gcn_hidden": list(self.rnet.gcn_hidden)},
                "depth_unit_mm": DEPTH_UNIT_MM}

    def copy(self) -> "ModelState":
        return ModelState(self.lnet, self.rnet, {k: v.copy() for k, v in self.params.items()},
                          self.seed)

    def tensors(self, tape: Tape | None = None, names=None) -> dict[str, Tensor]:
        """Parameters as tensors; those in ``names`` (default: all) go on ``tape``."""
        names = set(self.params) if names is None else set(names)
        out = {}
        for k, v in self.params.items():
            out[k] = tape.param(k, v) if tape is not None and k in names else Tensor(v)
        return out


def init_model(lcfg: LNetConfig, rcfg: RNetConfig, seed: int = 0) -> ModelState:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization of every tensor."""
    if lcfg.n_joints != rcfg.n_joints:
        raise ConfigError("LNet and RNet disagree on the joint count")
    rng = np.random.default_rng(seed)
    shapes = {**lnet_shapes(lcfg), **rnet_shapes(rcfg)}
    params = {}
    fan_in = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            fan_in[name.rsplit(".", 1)[0]] = shape[0]
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(fan_in[name.rsplit(".", 1)[0]])
        params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelState(lcfg, rcfg, params, seed)


def _root_zeroing(n_joints: int) -> np.ndarray:
    s = np.full(n_joints, DEPTH_UNIT_MM)
    s[ROOT] = 0.0
    return s


def lnet_forward(P: Mapping[str, Tensor], x2d, cfg: LNetConfig, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Root-relative depths (mm) from normalized 2D joints.

    ``x2d`` is ``(B, 2*N_J)`` (or ``(B, N_J, 2)``); returns ``(B, N_J)`` with
    the root entry exactly zero.
    """
    x = x2d if isinstance(x2d, Tensor) else Tensor(x2d)
    if x.data.ndim == 3:
        x = reshape(x, (x.shape[0], -1))
    if x.shape[-1] != 2 * cfg.n_joints:
        raise ShapeError(f"LNet expects {2 * cfg.n_joints} inputs, got {x.shape[-1]}")
    if np.isnan(x.data).any():
        raise ShapeError("LNet input contains NaN")
    h = x
    for i in range(cfg.n_hidden):
        h = relu(add(matmul(h, P[f"lnet.{i}.weight"]), P[f"lnet.{i}.bias"]))
        h = dropout(h, cfg.dropout_rate, rng, training)
    i = cfg.n_hidden
    out = add(matmul(h, P[f"lnet.{i}.weight"]), P[f"lnet.{i}.bias"])
    return mul(out, _root_zeroing(cfg.n_joints))


def gcn_forward(P: Mapping[str, Tensor], op, h, r: int, n_layers: int) -> Tensor:
    """Relation ``r``: ``X <- act(A_r X W + b)`` for each layer, no activation last."""
    x = h
    for i in range(n_layers):
        x = add(matmul(propagate(op, x), P[f"rnet.rel{r}.{i}.weight"]), P[f"rnet.rel{r}.{i}.bias"])
        if i < n_layers - 1:
            x = relu(x)
    return x


def rnet_forward(P: Mapping[str, Tensor], ops, d_rel_window, mask, cfg: RNetConfig) -> Tensor:
    """Incremental depths (mm) for the target frame.

    ``d_rel_window`` is ``(B, T, N_J)`` in mm (the lifted window), ``mask``
    ``(N,)`` or ``(B, N)`` binary, ``ops`` one propagation operator per
    relation (spatial first). Returns ``(B, N_J)``.
    """
    d = d_rel_window if isinstance(d_rel_window, Tensor) else Tensor(d_rel_window)
    if d.data.ndim == 2:
        d = reshape(d, (1,) + d.shape)
    B = d.shape[0]
    if d.shape[1:] != (cfg.T, cfg.n_joints):
        raise ShapeError(f"RNet expects windows of shape (T={cfg.T}, N_J={cfg.n_joints}), "
                         f"got {d.shape[1:]}")
    if len(ops) != cfg.n_relations:
        raise ShapeError(f"{len(ops)} adjacency operators for {cfg.n_relations} relations")
    mask = np.asarray(mask)
    if mask.shape[-1] != cfg.N:
        raise ShapeError(f"mask has {mask.shape[-1]} entries, graph has {cfg.N} nodes")
    h = reshape(mul(d, 1.0 / DEPTH_UNIT_MM), (B, cfg.N, 1))
    h = apply_mask(h, np.broadcast_to(mask, (B, cfg.N)))
    n_layers = len(cfg.gcn_hidden) + 1
    z = maximum([gcn_forward(P, op, h, r, n_layers) for r, op in enumerate(ops)])
    if cfg.fusion == "flatten":
        flat = reshape(z, (B, cfg.N * cfg.gcn_out))
    else:
        rows = reshape(z, (B, cfg.T, cfg.n_joints * cfg.gcn_out))
        flat = take(rows, cfg.t_p, axis=1)
    out = add(matmul(flat, P["rnet.fusion.weight"]), P["rnet.fusion.bias"])
    return mul(out, _root_zeroing(cfg.n_joints))


def refine_pose(state: ModelState, ops, x2d_window: np.ndarray, xy_target: np.ndarray,
                d_root: float, cam: Camera, mask=None):
    """Refined 3D pose of the target frame of one window.

    ``x2d_window`` holds the normalized 2D detections ``(T, N_J, 2)``;
    ``xy_target`` the pixel detections of frame ``t_p``; ``d_root`` its root
    depth in mm. Returns ``(camera_frame, world_frame, d_rel_refined)``.
    """
    lc, rc = state.lnet, state.rnet
    x2d_window = np.asarray(x2d_window, dtype=np.float64)
    if x2d_window.shape[0] != rc.T:
        raise ShapeError(f"window has {x2d_window.shape[0]} frames, RNet expects {rc.T}")
    P = state.tensors()
    d_rel = lnet_forward(P, x2d_window.reshape(rc.T, -1), lc).data
    mask = np.ones(rc.N, bool) if mask is None else mask
    delta = rnet_forward(P, ops, d_rel[None], mask, rc).data[0]
    refined = d_rel[rc.t_p] + delta
    cam_pts, world = backproject(cam, xy_target, DepthDecomposition(d_root, refined))
    return cam_pts, world, refined
