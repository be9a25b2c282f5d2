"""Pinhole camera, root-relative depth lifting, and DLT triangulation.

Poses are plain arrays: a 3D pose is ``(N_J, 3)`` in millimetres, a 2D pose is
``(N_J, 2)`` in pixels. Every function also accepts extra leading axes (a
stack of frames), which is how the training code uses them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, ShapeError, TriangulationError

ROOT = 0


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    id: str = "cam"
    width: int = 1000
    height: int = 1000

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ConfigError(f"camera {self.id}: K and R must be 3x3")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ConfigError(f"camera {self.id}: R is not a proper rotation")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError(f"camera {self.id}: K must be upper-triangular with "
                              "positive focal lengths")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"camera {self.id}: image size must be positive")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix ``K [R | t]``."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, world: np.ndarray) -> np.ndarray:
        return np.asarray(world, dtype=np.float64) @ self.R.T + self.t

    def to_world(self, cam: np.ndarray) -> np.ndarray:
        return (np.asarray(cam, dtype=np.float64) - self.t) @ self.R

    def to_dict(self) -> dict:
        return {"id": self.id, "K": self.K.tolist(), "R": self.R.tolist(),
                "t": self.t.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(K=np.array(d["K"]), R=np.array(d["R"]), t=np.array(d["t"]), id=str(d["id"]),
                   width=int(d.get("width", 1000)), height=int(d.get("height", 1000)))


def look_at_camera(center, target, focal: float, width: int, height: int,
                   cam_id: str = "cam", up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at ``center`` (mm) with its optical axis through ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K=K, R=R, t=-R @ center, id=cam_id, width=width, height=height)


@dataclass
class DepthDecomposition:
    """Camera depth of each joint split as ``d_root + d_rel[j]``."""

    d_root: np.ndarray | float
    d_rel: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def depth(self) -> np.ndarray:
        return np.asarray(self.d_root)[..., None] + self.d_rel


def project(cam: Camera, world: np.ndarray) -> tuple[np.ndarray, DepthDecomposition]:
    """Pixel coordinates and exact root/relative depth of world-frame joints."""
    world = np.asarray(world, dtype=np.float64)
    if world.shape[-1] != 3:
        raise ShapeError(f"project expects (..., N_J, 3) joints, got {world.shape}")
    pc = cam.to_camera(world)
    z = pc[..., 2]
    if (z <= 0).any():
        bad = np.argwhere(z <= 0)[0]
        raise GeometryError(f"joint {int(bad[-1])} is behind camera {cam.id} (z={z[tuple(bad)]:.3f} mm)")
    hom = pc @ cam.K.T
    xy = hom[..., :2] / hom[..., 2:3]
    d_root = z[..., ROOT]
    d_rel = z - d_root[..., None]
    d_rel[..., ROOT] = 0.0
    return xy, DepthDecomposition(d_root=d_root, d_rel=d_rel)


def rays(cam: Camera, xy: np.ndarray) -> np.ndarray:
    """Viewing rays ``K^-1 (x, y, 1)`` with unit z component."""
    xy = np.asarray(xy, dtype=np.float64)
    if abs(np.linalg.det(cam.K)) < 1e-12:
        raise ConfigError(f"camera {cam.id}: intrinsic matrix is singular")
    hom = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return hom @ np.linalg.inv(cam.K).T


def backproject(cam: Camera, xy: np.ndarray, depth: DepthDecomposition):
    """Invert :func:`project`: returns ``(camera_frame, world_frame)`` joints."""
    z = depth.depth
    if (z <= 0).any():
        bad = np.argwhere(z <= 0)[0]
        raise GeometryError(f"joint {int(bad[-1])} has non-positive depth {z[tuple(bad)]:.3f} mm")
    pc = z[..., None] * rays(cam, xy)
    return pc, cam.to_world(pc)


def normalize2d(xy: np.ndarray, width: float, height: float) -> np.ndarray:
    """Map pixel coordinates onto ``[-1, 1]``."""
    if width <= 0 or height <= 0:
        raise ConfigError("image dimensions must be positive")
    xy = np.asarray(xy, dtype=np.float64)
    scale = np.array([2.0 / width, 2.0 / height])
    return xy * scale - 1.0


def denormalize2d(xy_norm: np.ndarray, width: float, height: float) -> np.ndarray:
    xy_norm = np.asarray(xy_norm, dtype=np.float64)
    return (xy_norm + 1.0) * np.array([width / 2.0, height / 2.0])


def triangulate_points(cams: list[Camera], obs: np.ndarray, visible: np.ndarray | None = None):
    """Per-joint linear (DLT) triangulation without raising.

    ``obs`` is ``(V, ..., 2)`` pixels (e.g. ``(V, N_J, 2)`` or
    ``(V, F, N_J, 2)``), ``visible`` the matching ``(V, ...)`` booleans.
    Returns world points ``(..., 3)``, RMS reprojection residual in pixels
    ``(...)`` and a validity flag ``(...)``; joints seen by fewer than two
    cameras get NaN points and ``valid=False``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    n_views = obs.shape[0]
    if len(cams) != n_views:
        raise ShapeError(f"{len(cams)} cameras for {n_views} observation sets")
    lead = obs.shape[1:-1]
    vis = np.ones((n_views,) + lead, bool) if visible is None else np.asarray(visible, bool)
    if vis.shape != (n_views,) + lead:
        raise ShapeError(f"visibility shape {vis.shape} does not match observations {obs.shape}")
    # condition the system: normalized image coordinates and metres
    Pn = np.stack([np.hstack([c.R, c.t[:, None] / 1000.0]) for c in cams])
    flat = obs.reshape(n_views, -1, 2)
    w = vis.reshape(n_views, -1).astype(np.float64)
    xn = np.stack([rays(c, flat[v])[:, :2] for v, c in enumerate(cams)])
    # rows (M, 2V, 4); hidden views become zero rows, which leave the null space alone
    rx = xn[..., 0:1] * Pn[:, None, 2] - Pn[:, None, 0]
    ry = xn[..., 1:2] * Pn[:, None, 2] - Pn[:, None, 1]
    rows = np.stack([rx, ry], axis=1) * w[:, None, :, None]
    A = np.moveaxis(rows.reshape(2 * n_views, -1, 4), 1, 0)
    valid = w.sum(axis=0) >= 2
    pts = np.full((A.shape[0], 3), np.nan)
    if valid.any():
        _, _, vt = np.linalg.svd(A[valid])
        h = vt[:, -1]
        ok = np.abs(h[:, 3]) > 1e-12
        idx = np.nonzero(valid)[0]
        valid[idx[~ok]] = False
        pts[idx[ok]] = h[ok, :3] / h[ok, 3:4] * 1000.0
    sq = np.zeros(A.shape[0])
    for v, c in enumerate(cams):
        pc = np.nan_to_num(pts) @ c.R.T + c.t
        hom = pc @ c.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = hom[:, :2] / hom[:, 2:3]
        d2 = np.sum((xy - flat[v]) ** 2, axis=1)
        sq += np.where(w[v] > 0, np.nan_to_num(d2), 0.0)
    resid = np.where(valid, np.sqrt(sq / np.maximum(w.sum(axis=0), 1.0)), np.nan)
    return pts.reshape(lead + (3,)), resid.reshape(lead), valid.reshape(lead)


def triangulate_dlt(cams: list[Camera], obs: np.ndarray, visible: np.ndarray | None = None):
    """DLT triangulation of every joint; returns ``(points (N_J,3), residual_px (N_J,))``.

    Raises :class:`TriangulationError` naming the first joint visible in fewer
    than two views.
    """
    obs = np.asarray(obs, dtype=np.float64)
    vis = np.ones(obs.shape[:2], bool) if visible is None else np.asarray(visible, bool)
    counts = vis.sum(axis=0)
    if (counts < 2).any():
        j = int(np.nonzero(counts < 2)[0][0])
        raise TriangulationError(f"joint {j} is visible in {int(counts[j])} view(s); need at least 2")
    pts, resid, valid = triangulate_points(cams, obs, vis)
    if not valid.all():
        j = int(np.nonzero(~valid)[0][0])
        raise TriangulationError(f"joint {j}: degenerate triangulation (point at infinity)")
    return pts, resid
