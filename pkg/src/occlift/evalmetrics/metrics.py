"""MPJPE-family errors, 3DPCK, similarity alignment, and model evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..config import PCK_THRESHOLD_MM
from ..errors import EvaluationError, ShapeError
from ..geometry import ROOT, DepthDecomposition, backproject
from ..numkit import svd3_batch

# relative second-singular-value floor below which a frame counts as collinear
COLLINEAR_TOL = 1e-9


def _prep(pred, gt, valid=None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must both be (F, J, 3)")
    if pred.shape[0] == 0 or pred.shape[1] == 0:
        raise EvaluationError("cannot evaluate an empty pose set")
    if valid is None:
        valid = np.ones(pred.shape[:2], bool)
    else:
        valid = np.asarray(valid, bool).reshape(pred.shape[:2])
    if not valid.any():
        raise EvaluationError("no valid joints to evaluate")
    return pred, gt, valid


def root_center(p: np.ndarray) -> np.ndarray:
    return p - p[..., ROOT:ROOT + 1, :]


def joint_errors(pred, gt, center: bool = True) -> np.ndarray:
    """Per-joint Euclidean errors ``(F, J)``, root-centered unless ``center`` is False."""
    pred, gt, _ = _prep(pred, gt)
    if center:
        pred, gt = root_center(pred), root_center(gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt, valid=None, center: bool = True) -> float:
    """Mean joint distance (mm) over valid joints after root-centering both poses.

    ``center=False`` gives the absolute-position variant.
    """
    pred, gt, valid = _prep(pred, gt, valid)
    if center:
        pred, gt = root_center(pred), root_center(gt)
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(err[valid].mean())


def optimal_scale(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-frame least-squares scale of root-centered ``pred`` onto ``gt``."""
    w = valid[..., None].astype(np.float64)
    num = np.sum(w * pred * gt, axis=(1, 2))
    den = np.sum(w * pred * pred, axis=(1, 2))
    if (den <= 0).any():
        f = int(np.nonzero(den <= 0)[0][0])
        raise EvaluationError(f"frame {f}: prediction has zero norm; scale is undefined")
    return num / den


def nmpjpe(pred, gt, valid=None) -> float:
    pred, gt, valid = _prep(pred, gt, valid)
    pred, gt = root_center(pred), root_center(gt)
    s = optimal_scale(pred, gt, valid)
    err = np.linalg.norm(s[:, None, None] * pred - gt, axis=-1)
    return float(err[valid].mean())


@dataclass
class Alignment:
    aligned: np.ndarray  # (F, J, 3)
    scale: np.ndarray  # (F,)
    rotation: np.ndarray  # (F, 3, 3)
    translation: np.ndarray  # (F, 3)
    ok: np.ndarray  # (F,) False for skipped degenerate frames


def similarity_align(pred, gt, valid=None) -> Alignment:
    """Per-frame Umeyama fit of ``s R pred + t`` to ``gt`` over valid joints.

    Frames with fewer than three valid joints, or whose valid predicted joints
    are collinear, are flagged ``ok=False`` and left unaligned.
    """
    pred, gt, valid = _prep(pred, gt, valid)
    F = pred.shape[0]
    w = valid[..., None].astype(np.float64)
    n = valid.sum(axis=1).astype(np.float64)
    nz = np.maximum(n, 1.0)
    mu_p = (w * pred).sum(axis=1) / nz[:, None]
    mu_g = (w * gt).sum(axis=1) / nz[:, None]
    pc = (pred - mu_p[:, None]) * w
    gc = (gt - mu_g[:, None]) * w
    var_p = (pc ** 2).sum(axis=(1, 2)) / nz
    cov = np.einsum("fji,fjk->fik", gc, pc) / nz[:, None, None]  # gt x pred^T
    # collinearity test on the prediction's own spread
    _, sp, _ = svd3_batch(np.einsum("fji,fjk->fik", pc, pc))
    ok = (n >= 3) & (var_p > 0) & (sp[:, 1] > COLLINEAR_TOL * np.maximum(sp[:, 0], 1e-300))
    # converge past 1e-12 so the rotation is orthogonal to rounding, not to the stop rule
    U, S, Vt = svd3_batch(cov, tol=1e-15)
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    d[d == 0] = 1.0
    E = np.ones((F, 3))
    E[:, 2] = d
    R = U @ (E[:, :, None] * Vt)
    s = np.where(ok, (S * E).sum(axis=1) / np.where(var_p > 0, var_p, 1.0), 1.0)
    R[~ok] = np.eye(3)
    t = mu_g - s[:, None] * np.einsum("fik,fk->fi", R, mu_p)
    t[~ok] = 0.0
    aligned = s[:, None, None] * np.einsum("fik,fjk->fji", R, pred) + t[:, None]
    aligned[~ok] = pred[~ok]
    return Alignment(aligned, s, R, t, ok)


def pmpjpe(pred, gt, valid=None, return_skipped: bool = False):
    """Mean joint error after per-frame similarity alignment; degenerate frames skipped."""
    pred, gt, valid = _prep(pred, gt, valid)
    al = similarity_align(pred, gt, valid)
    if not al.ok.any():
        raise EvaluationError("every frame is degenerate (fewer than 3 non-collinear joints)")
    err = np.linalg.norm(al.aligned - gt, axis=-1)
    v = valid & al.ok[:, None]
    value = float(err[v].mean())
    skipped = int((~al.ok).sum())
    return (value, skipped) if return_skipped else value


def pck3d(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM, valid=None) -> float:
    """Fraction of valid joints whose root-centered error is below the threshold."""
    pred, gt, valid = _prep(pred, gt, valid)
    err = np.linalg.norm(root_center(pred) - root_center(gt), axis=-1)
    return float((err[valid] < threshold_mm).mean())


@dataclass
class MetricReport:
    mpjpe: float
    nmpjpe: float
    pmpjpe: float
    pck3d: float
    n_frames: int
    eval_head: str
    per_joint: list[float] = field(default_factory=list)
    skipped_frames: int = 0
    partition: str = "all"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def report(pred, gt, head: str, valid=None, partition: str = "all") -> MetricReport:
    pred, gt, valid = _prep(pred, gt, valid)
    pm, skipped = pmpjpe(pred, gt, valid, return_skipped=True)
    err = joint_errors(pred, gt)
    per_joint = [float(err[:, j][valid[:, j]].mean()) if valid[:, j].any() else float("nan")
                 for j in range(pred.shape[1])]
    return MetricReport(mpjpe=mpjpe(pred, gt, valid), nmpjpe=nmpjpe(pred, gt, valid),
                        pmpjpe=pm, pck3d=pck3d(pred, gt, valid=valid), n_frames=pred.shape[0],
                        eval_head=head, per_joint=per_joint, skipped_frames=skipped,
                        partition=partition)


# -- model evaluation ----------------------------------------------------------

@dataclass
class Predictions:
    lnet: np.ndarray  # (M, J, 3) world
    rnet: np.ndarray  # (M, J, 3) world
    gt: np.ndarray  # (M, J, 3) world
    occluded_fraction: np.ndarray  # (M,) share of occluded joint-frames in each window
    frame: np.ndarray  # (M,) target frame index within its track


def predict_tracks(state, ops, tracks, chunk: int = 256) -> Predictions:
    """Both heads at the target frame of every full window of every track."""
    from ..nets import lnet_forward, rnet_forward

    lc, rc = state.lnet, state.rnet
    P = state.tensors()
    T, t_p = rc.T, rc.t_p
    out_l, out_r, out_g, occ, frames = [], [], [], [], []
    ones = np.ones(rc.N, bool)
    for tr in tracks:
        F = tr.n_frames
        if F < T:
            continue
        d = lnet_forward(P, tr.x2d.reshape(F, -1), lc).data
        starts = np.arange(F - T + 1)
        delta = np.zeros((len(starts), lc.n_joints))
        for a in range(0, len(starts), chunk):
            idx = starts[a:a + chunk]
            win = np.stack([d[s:s + T] for s in idx])
            delta[a:a + chunk] = rnet_forward(P, ops, win, ones, rc).data
        f = starts + t_p
        for refined, sink in ((d[f], out_l), (d[f] + delta, out_r)):
            _, world = backproject(tr.camera, tr.xy[f],
                                   DepthDecomposition(tr.d_root[f], refined))
            sink.append(world)
        out_g.append(tr.gt_world[f])
        frames.append(f)
        hidden = (~tr.visible).astype(np.float64).mean(axis=1)
        csum = np.concatenate([[0.0], np.cumsum(hidden)])
        occ.append((csum[starts + T] - csum[starts]) / T)
    if not out_g:
        raise EvaluationError("no track is long enough for a full window")
    return Predictions(np.concatenate(out_l), np.concatenate(out_r), np.concatenate(out_g),
                       np.concatenate(occ), np.concatenate(frames))


HARD_THRESHOLD = 0.30


def evaluate(state, ops, tracks, heads=("lnet", "rnet"), partitions: bool = True,
             frame_range: tuple[int, int] | None = None) -> list[MetricReport]:
    """Reports per head on all windows, plus the easy/hard split by occlusion share.

    ``frame_range=(lo, hi)`` keeps only target frames in ``[lo, hi)``, so runs
    with different target offsets can be scored on the same frames.
    """
    pr = predict_tracks(state, ops, tracks)
    keep = np.ones(len(pr.frame), bool)
    if frame_range is not None:
        keep = (pr.frame >= frame_range[0]) & (pr.frame < frame_range[1])
        if not keep.any():
            raise EvaluationError(f"no target frame falls in {frame_range}")
    out = []
    for head in heads:
        pred = (pr.lnet if head == "lnet" else pr.rnet)[keep]
        gt = pr.gt[keep]
        out.append(report(pred, gt, head))
        if partitions:
            hard = pr.occluded_fraction[keep] >= HARD_THRESHOLD
            for name, sel in (("easy", ~hard), ("hard", hard)):
                if sel.any():
                    out.append(report(pred[sel], gt[sel], head, partition=name))
    return out
