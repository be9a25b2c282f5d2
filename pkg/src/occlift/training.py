"""Warm start, joint optimization of both networks, and DLT pseudo-labels.

Losses are computed in the camera frame: the world-frame error is the same
vector rotated, so the mean squared error is identical and the camera frame
saves a transform per step.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, TrainConfig
from .errors import ConfigError, NumericalError, TrainingError
from .geometry import ROOT, Camera, normalize2d, rays, triangulate_points
from .graph import Skeleton, build_graph, normalize, sparse_operators
from .masks import MaskParams, MaskSet, generate_masks
from .nets import (LNetConfig, ModelState, RNetConfig, init_model, lnet_forward,
                   rnet_forward)
from .numkit import (AdamState, Tape, adam_step, add, mse, mul, reshape, save_checkpoint,
                     take)
from .synthdata import DatasetFile, Sequence

log = logging.getLogger(__name__)


@dataclass
class ViewTrack:
    """One sequence seen from one camera, with everything training and evaluation read."""

    seq_id: str
    camera: Camera
    x2d: np.ndarray  # (F, J, 2) normalized detections
    xy: np.ndarray  # (F, J, 2) pixel detections
    rays: np.ndarray  # (F, J, 3) K^-1 (x, y, 1) of the detections
    visible: np.ndarray  # (F, J)
    gt_cam: np.ndarray  # (F, J, 3) ground truth, camera frame
    gt_world: np.ndarray  # (F, J, 3)
    d_root: np.ndarray  # (F,) ground-truth root depth
    labeled: np.ndarray  # (F,) bool
    pseudo_cam: np.ndarray | None = None  # (F, J, 3)
    pseudo_valid: np.ndarray | None = None  # (F, J)
    pseudo_root: np.ndarray | None = None  # (F,) triangulated root depth

    @property
    def n_frames(self) -> int:
        return self.x2d.shape[0]


def make_tracks(seqs: list[Sequence], cams: list[Camera], clean_2d: bool = False) -> list[ViewTrack]:
    """Per-camera views of ``seqs``; ``clean_2d`` swaps detections for exact projections."""
    from .geometry import project

    out = []
    for s in seqs:
        for v, cam in enumerate(cams):
            proj, dec = project(cam, s.gt3d)
            xy = proj if clean_2d else s.detections[v]
            vis = np.ones_like(s.visibility[v]) if clean_2d else s.visibility[v]
            out.append(ViewTrack(
                seq_id=s.id, camera=cam, x2d=normalize2d(xy, cam.width, cam.height), xy=xy,
                rays=rays(cam, xy), visible=vis, gt_cam=cam.to_camera(s.gt3d),
                gt_world=s.gt3d, d_root=np.asarray(dec.d_root, dtype=np.float64),
                labeled=s.labeled.copy()))
    return out


@dataclass
class PseudoLabelReport:
    n_frames: int = 0
    n_joints_total: int = 0
    n_joints_invalid: int = 0
    n_frames_without_root: int = 0
    mean_residual_px: float = float("nan")


def make_pseudo_labels(seqs: list[Sequence], cams: list[Camera],
                       tracks: list[ViewTrack] | None = None):
    """Triangulate every unlabeled frame from the visible views.

    Joints seen by fewer than two cameras are invalid and drop out of the
    loss. The root depth of a pseudo-labeled sample is the triangulated root's
    camera depth; frames whose root cannot be triangulated yield no sample.
    Returns ``(pseudo: dict seq_id -> (world (F,J,3), valid (F,J)), report)``
    and fills the pseudo fields of matching ``tracks``.
    """
    report = PseudoLabelReport()
    pseudo = {}
    resid_all = []
    if len(cams) < 2:
        warnings.warn("pseudo-labels need at least two cameras; no pseudo-labeled samples",
                      stacklevel=2)
    for s in seqs:
        unl = ~s.labeled
        F, J = s.gt3d.shape[:2]
        pts = np.full((F, J, 3), np.nan)
        valid = np.zeros((F, J), bool)
        if len(cams) >= 2 and unl.any():
            p, r, ok = triangulate_points(cams, s.detections[:, unl], s.visibility[:, unl])
            pts[unl] = p
            valid[unl] = ok
            resid_all.append(r[ok])
        pseudo[s.id] = (pts, valid)
        report.n_frames += int(unl.sum())
        report.n_joints_total += int(unl.sum()) * J
        report.n_joints_invalid += int(unl.sum()) * J - int(valid[unl].sum())
        report.n_frames_without_root += int((unl & ~valid[:, ROOT]).sum())
    if resid_all:
        cat = np.concatenate(resid_all)
        report.mean_residual_px = float(cat.mean()) if cat.size else float("nan")
    if tracks is not None:
        for tr in tracks:
            if tr.seq_id not in pseudo:
                continue
            pts, valid = pseudo[tr.seq_id]
            pc = tr.camera.to_camera(np.nan_to_num(pts))
            tr.pseudo_cam = pc
            tr.pseudo_valid = valid.copy()
            tr.pseudo_root = np.where(valid[:, ROOT], pc[:, ROOT, 2], np.nan)
    return pseudo, report


@dataclass
class Sample:
    """Reference to a training window: ``tracks[track][start:start+T]``, target at ``t_p``."""

    track: int
    start: int
    kind: str  # "ground_truth" or "pseudo"


@dataclass
class TrainingSet:
    tracks: list[ViewTrack]
    labeled: list[Sample]
    pseudo: list[Sample]
    labeled_frames: np.ndarray  # (n, 2) rows of (track, frame) for the warm start


def build_training_set(tracks: list[ViewTrack], T: int, t_p: int, mode: str) -> TrainingSet:
    """Stride-1 sliding windows; those running past a sequence end are skipped."""
    lab, pse, frames = [], [], []
    for k, tr in enumerate(tracks):
        F = tr.n_frames
        for f in np.nonzero(tr.labeled)[0]:
            frames.append((k, int(f)))
        for s in range(0, F - T + 1):
            tgt = s + t_p
            if tr.labeled[tgt]:
                lab.append(Sample(k, s, "ground_truth"))
            elif (mode == "semi_supervised" and tr.pseudo_valid is not None
                  and tr.pseudo_valid[tgt, ROOT] and tr.pseudo_valid[tgt].sum() > 1):
                pse.append(Sample(k, s, "pseudo"))
    return TrainingSet(tracks, lab, pse, np.array(frames, dtype=np.int64).reshape(-1, 2))


def _target(tr: ViewTrack, f: int, kind: str):
    """Camera-frame target, per-joint weight and root depth for frame ``f``."""
    if kind == "ground_truth":
        return tr.gt_cam[f], np.ones(tr.gt_cam.shape[1]), tr.d_root[f]
    return tr.pseudo_cam[f], tr.pseudo_valid[f].astype(np.float64), tr.pseudo_root[f]


@dataclass
class Batch:
    x2d: np.ndarray  # (B, T, J, 2)
    rays: np.ndarray  # (B, J, 3) at the target frame
    d_root: np.ndarray  # (B,)
    target: np.ndarray  # (B, J, 3) camera frame
    weight: np.ndarray  # (B, J)
    masks: np.ndarray  # (B, N)


def collate(ts: TrainingSet, samples: list[Sample], T: int, t_p: int, masks: np.ndarray) -> Batch:
    x2d, ry, dr, tg, w = [], [], [], [], []
    for s in samples:
        tr = ts.tracks[s.track]
        f = s.start + t_p
        x2d.append(tr.x2d[s.start:s.start + T])
        ry.append(tr.rays[f])
        t, wt, root = _target(tr, f, s.kind)
        tg.append(t)
        w.append(wt)
        dr.append(root)
    return Batch(np.stack(x2d), np.stack(ry), np.array(dr), np.stack(tg), np.stack(w), masks)


def lifted_camera_points(d_rel, d_root: np.ndarray, ray: np.ndarray):
    """Camera-frame joints ``(d_root + d_rel) * ray`` as a differentiable op."""
    depth = add(d_rel, np.asarray(d_root, dtype=np.float64)[:, None])
    return mul(reshape(depth, depth.shape + (1,)), ray)


class Trainer:
    """Owns the model, both Adam states and every random stream of one run."""

    def __init__(self, cfg: ExperimentConfig, skel: Skeleton, seed: int | None = None,
                 mask_set: MaskSet | None = None):
        self.cfg = cfg
        self.tc: TrainConfig = cfg.train
        self.seed = self.tc.seed if seed is None else int(seed)
        self.skel = skel
        self.lcfg = LNetConfig(n_joints=skel.n_joints, hidden_size=cfg.lnet_hidden,
                               n_hidden=cfg.lnet_layers, dropout_rate=cfg.lnet_dropout)
        self.rcfg = RNetConfig(T=cfg.T, n_joints=skel.n_joints, strides=cfg.strides, t_p=cfg.t_p,
                               gcn_hidden=cfg.gcn_hidden, gcn_out=cfg.gcn_out, fusion=cfg.fusion)
        self.graph = build_graph(skel, cfg.T, cfg.strides)
        self.adjs = normalize(self.graph)
        self.ops = sparse_operators(self.adjs)
        streams = np.random.SeedSequence(self.seed).spawn(4)
        init_seed = int(streams[0].generate_state(1)[0])
        self.state = init_model(self.lcfg, self.rcfg, init_seed)
        self.state.seed = self.seed
        self.sample_rng = np.random.default_rng(streams[1])
        self.dropout_rng = np.random.default_rng(streams[2])
        self.mask_rng = np.random.default_rng(streams[3])
        if cfg.dropout_mode == "structured":
            if mask_set is None:
                mask_set = generate_masks(MaskParams(cfg.n_masks, cfg.alpha, self.graph.N,
                                                     skel.n_joints, seed=cfg.mask_seed))
            if mask_set.masks.shape[1] != self.graph.N:
                raise ConfigError(f"mask set has {mask_set.masks.shape[1]} nodes, "
                                  f"graph has {self.graph.N}")
        self.mask_set = mask_set
        self.opt_phi = AdamState()
        self.opt_theta = AdamState()
        self.step = 0
        self.curve: list[tuple[int, str, float]] = []

    # -- masks ---------------------------------------------------------------
    def draw_masks(self, n: int) -> np.ndarray:
        N = self.graph.N
        mode = self.cfg.dropout_mode
        if mode == "structured":
            idx = self.mask_rng.integers(len(self.mask_set), size=n)
            return self.mask_set.masks[idx]
        if mode == "uniform":
            return self.mask_rng.random((n, N)) >= self.cfg.dropout_rate
        return np.ones((n, N), bool)

    # -- phases --------------------------------------------------------------
    def warmup_loss(self, P, ts: TrainingSet, rows: np.ndarray, training: bool = True):
        x2d = np.stack([ts.tracks[k].x2d[f] for k, f in rows]).reshape(len(rows), -1)
        ry = np.stack([ts.tracks[k].rays[f] for k, f in rows])
        dr = np.array([ts.tracks[k].d_root[f] for k, f in rows])
        tgt = np.stack([ts.tracks[k].gt_cam[f] for k, f in rows])
        d = lnet_forward(P, x2d, self.lcfg, training=training, rng=self.dropout_rng)
        return mse(lifted_camera_points(d, dr, ry), tgt)

    def warmup_lnet(self, ts: TrainingSet, iters: int | None = None, lr: float | None = None):
        """Adam on the LNet weights alone, lifted 3D against ground truth of labeled frames."""
        iters = self.tc.warmup_iters if iters is None else iters
        lr = self.tc.lr_warmup if lr is None else lr
        if len(ts.labeled_frames) == 0:
            raise ConfigError("warm start needs a non-empty labeled set")
        names = self.state.lnet_names
        bs = min(self.tc.warmup_batch_size, len(ts.labeled_frames))
        for _ in range(iters):
            pick = self.sample_rng.choice(len(ts.labeled_frames), size=bs, replace=False)
            tape = Tape()
            P = self.state.tensors(tape, names)
            loss = self._guard(lambda: self.warmup_loss(P, ts, ts.labeled_frames[pick]))
            grads = tape.backward(loss)
            adam_step(self.state.params, grads, self.opt_phi, lr)
            self.step += 1
            self._log("warmup", float(loss.data))
        return self.state

    def window_loss(self, P, batch: Batch, training: bool = True):
        B, T, J, _ = batch.x2d.shape
        d = lnet_forward(P, batch.x2d.reshape(B * T, 2 * J), self.lcfg, training=training,
                         rng=self.dropout_rng)
        win = reshape(d, (B, T, J))
        delta = rnet_forward(P, self.ops, win, batch.masks, self.rcfg)
        refined = add(take(win, self.rcfg.t_p, axis=1), delta)
        pred = lifted_camera_points(refined, batch.d_root, batch.rays)
        return mse(pred, batch.target, batch.weight[..., None])

    def joint_step(self, ts: TrainingSet, samples: list[Sample] | None = None):
        """One Adam step on both networks; returns the batch loss."""
        if samples is None:
            samples = self._draw_samples(ts)
        batch = collate(ts, samples, self.rcfg.T, self.rcfg.t_p, self.draw_masks(len(samples)))
        tape = Tape()
        P = self.state.tensors(tape)
        loss = self._guard(lambda: self.window_loss(P, batch))
        grads = tape.backward(loss)
        g_phi = {k: grads[k] for k in self.state.lnet_names}
        g_theta = {k: grads[k] for k in self.state.rnet_names}
        adam_step(self.state.params, g_phi, self.opt_phi, self.tc.lr_phi)
        adam_step(self.state.params, g_theta, self.opt_theta, self.tc.lr_theta)
        self.step += 1
        value = float(loss.data)
        self._log("joint", value)
        return value

    def _draw_samples(self, ts: TrainingSet) -> list[Sample]:
        pools = [ts.labeled, ts.pseudo] if ts.pseudo and self.tc.mode == "semi_supervised" \
            else [ts.labeled]
        pools = [p for p in pools if p]
        if not pools:
            raise ConfigError("no training windows available")
        out = []
        for i in range(self.tc.batch_size):
            pool = pools[(self.step * self.tc.batch_size + i) % len(pools)]
            out.append(pool[int(self.sample_rng.integers(len(pool)))])
        return out

    def _guard(self, fn):
        try:
            loss = fn()
        except NumericalError as exc:
            raise TrainingError(f"iteration {self.step + 1}: {exc}") from exc
        if not np.isfinite(loss.data):
            raise TrainingError(f"iteration {self.step + 1}: loss is not finite")
        return loss

    def _log(self, phase: str, value: float):
        self.curve.append((self.step, phase, value))
        if self.tc.log_every and self.step % self.tc.log_every == 0:
            log.info("iter %d %s loss %.3f", self.step, phase, value)

    # -- persistence ---------------------------------------------------------
    def checkpoint_config(self) -> dict:
        return {**self.state.config_dict(), "experiment": self.cfg.to_dict(),
                "skeleton": self.skel.to_dict()}

    def save(self, path) -> Path:
        try:
            return save_checkpoint(path, self.state.params,
                                   {"phi": self.opt_phi, "theta": self.opt_theta},
                                   self.step, self.seed, self.checkpoint_config())
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc}") from exc

    def run(self, ts: TrainingSet, out_dir: Path | None = None) -> ModelState:
        tc = self.tc
        ckpt_dir = None
        if out_dir is not None:
            ckpt_dir = Path(out_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        for _ in range(tc.warmup_iters):
            self.warmup_lnet(ts, iters=1)
            self._maybe_checkpoint(ckpt_dir)
        while self.step < tc.total_iters:
            self.joint_step(ts)
            self._maybe_checkpoint(ckpt_dir)
        if ckpt_dir is not None:
            self.save(ckpt_dir / "checkpoint.json")
            write_loss_curve(self.curve, ckpt_dir / "loss_curve.csv")
        return self.state

    def _maybe_checkpoint(self, ckpt_dir):
        k = self.tc.checkpoint_every
        if ckpt_dir is not None and k and self.step % k == 0 and self.step < self.tc.total_iters:
            self.save(ckpt_dir / f"checkpoint_{self.step:06d}.json")


def write_loss_curve(curve, path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "phase", "loss"])
            for it, phase, value in curve:
                w.writerow([it, phase, repr(value)])
    except OSError as exc:
        raise OSError(f"cannot write loss curve {path}: {exc}") from exc
    return path


def prepare(ds: DatasetFile, cfg: ExperimentConfig) -> TrainingSet:
    train = ds.split("train")
    tracks = make_tracks(train, ds.cameras)
    if cfg.train.mode == "semi_supervised":
        make_pseudo_labels(train, ds.cameras, tracks)
    return build_training_set(tracks, cfg.T, cfg.t_p, cfg.train.mode)


def run_training(ds: DatasetFile, cfg: ExperimentConfig, out_dir=None, seed: int | None = None,
                 mask_set: MaskSet | None = None) -> Trainer:
    """Warm start then joint phase; writes checkpoint and loss curve when ``out_dir`` is set."""
    if ds.skeleton.n_joints < 2:
        raise ConfigError("skeleton too small to train")
    trainer = Trainer(cfg, ds.skeleton, seed=seed, mask_set=mask_set)
    ts = prepare(ds, cfg)
    if not ts.labeled_frames.size:
        raise ConfigError("dataset has no labeled training frames")
    trainer.run(ts, out_dir)
    return trainer


def state_from_checkpoint(ckpt: dict) -> tuple[ModelState, ExperimentConfig, Skeleton]:
    """Rebuild model, experiment config and skeleton from a loaded checkpoint."""
    conf = ckpt["config"]
    try:
        cfg = ExperimentConfig.from_dict(conf["experiment"])
        skel = Skeleton.from_dict(conf["skeleton"])
    except KeyError as exc:
        raise ConfigError(f"checkpoint config lacks {exc}") from exc
    lcfg = LNetConfig(n_joints=skel.n_joints, hidden_size=cfg.lnet_hidden,
                      n_hidden=cfg.lnet_layers, dropout_rate=cfg.lnet_dropout)
    rcfg = RNetConfig(T=cfg.T, n_joints=skel.n_joints, strides=cfg.strides, t_p=cfg.t_p,
                      gcn_hidden=cfg.gcn_hidden, gcn_out=cfg.gcn_out, fusion=cfg.fusion)
    state = ModelState(lcfg, rcfg, dict(ckpt["params"]), int(ckpt["seed"]))
    shapes = state.shapes()
    for k, shp in shapes.items():
        if k not in state.params or state.params[k].shape != tuple(shp):
            raise ConfigError(f"checkpoint parameter {k!r} does not match the architecture")
    return state, cfg, skel

