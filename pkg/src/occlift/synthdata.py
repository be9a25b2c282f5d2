"""Synthetic multi-view motion capture: FK motion, camera rig, corrupted 2D detections.

There are no images anywhere: a dataset starts at per-camera 2D detections
(with visibility flags), calibrated cameras and ground-truth 3D joints.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetParseError, UnsupportedVersionError
from .geometry import Camera, look_at_camera, project
from .graph import Skeleton

FORMAT_VERSION = 1
STYLES = ("walk", "reach", "mixed")
PELVIS_HEIGHT = 950.0
MAX_SPEED = 3500.0  # mm/s, below the 4 m/s budget


def default_rig(n_cameras: int = 4, radius: float = 3000.0, height: float = 1500.0,
                focal: float = 1000.0, size: int = 1000, target=(0.0, 0.0, 900.0)) -> list[Camera]:
    """Cameras evenly spaced on a circle, all aimed at the capture-volume centre."""
    cams = []
    for i in range(n_cameras):
        a = 2.0 * math.pi * i / n_cameras + math.pi / 4
        center = (radius * math.cos(a), radius * math.sin(a), height)
        cams.append(look_at_camera(center, target, focal, size, size, f"cam{i}"))
    return cams


@dataclass
class MotionSequence:
    frames: np.ndarray  # (F, J, 3) world mm
    fps: float
    subject: str
    skeleton: str
    style: str = "walk"
    speed_bound: float = 0.0  # mm/s, analytic upper bound on joint speed


def _rot(axis: int, ang: np.ndarray) -> np.ndarray:
    c, s = np.cos(ang), np.sin(ang)
    R = np.zeros(ang.shape + (3, 3))
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    R[..., axis, axis] = 1.0
    R[..., i, i] = c
    R[..., j, j] = c
    R[..., i, j] = -s if axis != 1 else s
    R[..., j, i] = s if axis != 1 else -s
    return R


def _euler(angles: np.ndarray) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for angles ``(..., 3)`` ordered (x, y, z)."""
    return _rot(2, angles[..., 2]) @ _rot(1, angles[..., 1]) @ _rot(0, angles[..., 0])


@dataclass
class _Channel:
    bias: float
    amps: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray

    def __call__(self, t):
        out = np.full_like(t, self.bias)
        for a, f, p in zip(self.amps, self.freqs, self.phases):
            out += a * np.sin(2 * np.pi * f * t + p)
        return out

    @property
    def rate_bound(self) -> float:
        return float(np.sum(2 * np.pi * np.abs(self.freqs) * np.abs(self.amps)))


def _channels(skel: Skeleton, style: str, rng: np.random.Generator):
    """Sinusoid mixtures (at most four terms) for every joint's three local angles."""
    names = skel.names
    n = skel.n_joints
    gait = rng.uniform(0.8, 1.1)
    ch = [[_Channel(0.0, np.zeros(0), np.zeros(0), np.zeros(0)) for _ in range(3)] for _ in range(n)]

    def mix(bias, amp_hi, f_lo, f_hi, k=None, base=None):
        k = int(rng.integers(1, 5)) if k is None else k
        amps = rng.uniform(0.0, amp_hi, k)
        freqs = rng.uniform(f_lo, f_hi, k)
        phases = rng.uniform(0, 2 * np.pi, k)
        if base is not None:
            amps = np.concatenate([[base[0]], amps[:3]])
            freqs = np.concatenate([[base[1]], freqs[:3]])
            phases = np.concatenate([[base[2]], phases[:3]])
        return _Channel(bias, amps, freqs, phases)

    phase0 = rng.uniform(0, 2 * np.pi)
    for j, name in enumerate(names):
        side = -1.0 if name.startswith("l_") else 1.0
        if style == "walk":
            if name.endswith("hip") or (name.endswith("knee") and "r_hip" not in names):
                ch[j][0] = mix(0.0, 0.05, 0.2, 1.0, 2, base=(0.35, gait, phase0 + (side > 0) * np.pi))
            elif name.endswith("knee"):
                ch[j][0] = mix(-0.35, 0.05, 0.2, 1.0, 2, base=(0.3, gait, phase0 + (side > 0) * np.pi + 1.2))
            elif name.endswith("shoulder"):
                ch[j][0] = mix(0.0, 0.05, 0.2, 1.0, 2, base=(0.3, gait, phase0 + (side < 0) * np.pi))
                ch[j][1] = mix(side * -0.15, 0.05, 0.1, 0.6, 1)
            elif name.endswith("elbow"):
                ch[j][0] = mix(0.4, 0.15, 0.2, 1.0, 2)
            elif name in ("spine", "neck"):
                ch[j][2] = mix(0.0, 0.1, 0.2, 1.0, 2)
        elif style == "reach":
            if name.endswith("shoulder"):
                ch[j][0] = mix(rng.uniform(0.2, 1.2), 0.5, 0.15, 0.5, 3)
                ch[j][1] = mix(side * -0.3, 0.35, 0.1, 0.5, 2)
            elif name.endswith("elbow"):
                ch[j][0] = mix(0.6, 0.4, 0.15, 0.6, 3)
            elif name in ("spine", "neck"):
                ch[j][0] = mix(0.15, 0.2, 0.1, 0.4, 2)
                ch[j][2] = mix(0.0, 0.25, 0.1, 0.4, 2)
            elif name.endswith("hip") or name.endswith("knee"):
                ch[j][0] = mix(0.0, 0.1, 0.1, 0.5, 2)
        else:
            if j == skel.root_index or name.endswith(("ankle", "wrist", "head")):
                continue
            for axis, hi in ((0, 0.5), (1, 0.25), (2, 0.25)):
                ch[j][axis] = mix(0.0, hi, 0.1, 1.5)
    return ch, gait


def generate_motion(skel: Skeleton, n_frames: int, seed: int, style: str = "walk",
                    fps: float = 50.0, subject: str | None = None,
                    bone_scale: float = 1.0) -> MotionSequence:
    """Forward-kinematic motion from band-limited joint-angle trajectories."""
    if style not in STYLES:
        raise ConfigError(f"unknown motion style {style!r}; choose from {STYLES}")
    if skel.offsets is None:
        raise ConfigError("skeleton has no rest offsets; cannot pose it")
    rng = np.random.default_rng(seed)
    if style == "mixed":
        style_eff = str(rng.choice(["walk", "reach", "mixed"]))
    else:
        style_eff = style
    channels, gait = _channels(skel, style_eff, rng)
    t = np.arange(n_frames) / fps
    n = skel.n_joints
    offsets = skel.offsets * bone_scale

    # root path: slow circle around the volume centre, heading along the path
    radius = rng.uniform(100.0, 500.0)
    omega = rng.uniform(0.05, 0.25) * (1 if rng.random() < 0.5 else -1)
    phi = rng.uniform(0, 2 * np.pi)
    bob = 15.0 if style_eff == "walk" else 5.0
    ang = omega * t + phi
    root = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                     PELVIS_HEIGHT * bone_scale + bob * np.sin(2 * np.pi * 2 * gait * t)], axis=1)
    yaw_ch = _Channel(0.0, rng.uniform(0, 0.2, 2), rng.uniform(0.05, 0.3, 2), rng.uniform(0, 6.3, 2))
    yaw = ang + np.sign(omega) * np.pi / 2 + yaw_ch(t)

    # conservative speed bound: translation + each rotation's rate times its lever arm
    lever = _lever_arms(skel, offsets)
    rates = np.array([sum(c.rate_bound for c in channels[j]) for j in range(n)])
    v_trans = radius * abs(omega) + bob * 2 * np.pi * 2 * gait
    v_yaw = (abs(omega) + yaw_ch.rate_bound) * (lever[skel.root_index] + radius * 0)
    bound = v_trans + v_yaw + float(np.max(lever_sums(skel, lever, rates)))
    if bound > MAX_SPEED:
        scale = (MAX_SPEED - v_trans - v_yaw) / (bound - v_trans - v_yaw)
        for j in range(n):
            for c in channels[j]:
                # scaling amplitudes scales rates linearly; biases stay
                c.amps = c.amps * max(scale, 0.0)
        rates = rates * max(scale, 0.0)
        bound = v_trans + v_yaw + float(np.max(lever_sums(skel, lever, rates)))

    local = np.stack([np.stack([channels[j][a](t) for a in range(3)], axis=-1)
                      for j in range(n)], axis=1)  # (F, J, 3)
    Rloc = _euler(local)
    Rglob = np.zeros((n_frames, n, 3, 3))
    pos = np.zeros((n_frames, n, 3))
    r = skel.root_index
    Rglob[:, r] = _rot(2, yaw) @ Rloc[:, r]
    pos[:, r] = root
    for j in skel.topo_order[1:]:
        p = skel.parents[j]
        pos[:, j] = pos[:, p] + np.einsum("fab,b->fa", Rglob[:, p], offsets[j])
        Rglob[:, j] = Rglob[:, p] @ Rloc[:, j]
    return MotionSequence(frames=pos, fps=fps, subject=subject or f"S{seed}",
                          skeleton=skel.name, style=style_eff, speed_bound=bound)


def _lever_arms(skel: Skeleton, offsets: np.ndarray) -> np.ndarray:
    """Longest tree-path length (mm) from each joint to any joint in its subtree."""
    n = skel.n_joints
    bone = np.linalg.norm(offsets, axis=1)
    reach = np.zeros(n)
    for j in reversed(skel.topo_order):
        p = skel.parents[j]
        if p >= 0:
            reach[p] = max(reach[p], reach[j] + bone[j])
    return reach


def lever_sums(skel: Skeleton, lever: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Per joint: sum over its ancestors of angular-rate bound times lever arm."""
    n = skel.n_joints
    out = np.zeros(n)
    for j in range(n):
        k = skel.parents[j]
        while k >= 0:
            out[j] += rates[k] * lever[k]
            k = skel.parents[k]
    return out


@dataclass
class OcclusionEvent:
    camera: str
    joints: list[int]
    start: int
    duration: int

    def to_dict(self):
        return {"camera": self.camera, "joints": list(map(int, self.joints)),
                "start": int(self.start), "duration": int(self.duration)}


def occlusion_script(skel: Skeleton, n_frames: int, camera: str, rate: float,
                     rng: np.random.Generator, min_len: int = 10, max_len: int = 40,
                     max_radius: int = 2) -> list[OcclusionEvent]:
    """Occluder passes: each hides a spatial cluster of joints for a contiguous span.

    Events are added until about ``rate`` of the frames are touched by at least
    one event.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"occlusion rate must be in [0, 1], got {rate}")
    events: list[OcclusionEvent] = []
    if rate == 0.0 or n_frames < 1:
        return events
    hops = skel.hop_distances()
    covered = np.zeros(n_frames, bool)
    for _ in range(10_000):
        if covered.mean() >= rate:
            break
        seed_joint = int(rng.integers(skel.n_joints))
        radius = int(rng.integers(1, max_radius + 1))
        ball = np.nonzero(hops[seed_joint] <= radius)[0]
        keep = [int(k) for k in ball if k == seed_joint or rng.random() < 0.7]
        dur = int(rng.integers(min_len, max_len + 1))
        dur = min(dur, n_frames)
        start = int(rng.integers(0, n_frames - dur + 1))
        events.append(OcclusionEvent(camera, sorted(keep), start, dur))
        covered[start:start + dur] = True
    return events


def occlusion_grid(events: list[OcclusionEvent], n_frames: int, n_joints: int) -> np.ndarray:
    """Boolean ``(F, J)`` grid, True where a joint is occluded."""
    grid = np.zeros((n_frames, n_joints), bool)
    for ev in events:
        grid[ev.start:ev.start + ev.duration, ev.joints] = True
    return grid


def corrupt_detections(frames: np.ndarray, cams: list[Camera], noise_sigma_px: float,
                       scripts: dict[str, list[OcclusionEvent]] | None, seed):
    """Noisy per-camera 2D detections and visibility flags.

    Visible joints get isotropic Gaussian pixel noise. Occluded joints are
    flagged invisible and replaced by an outlier 50-150 px away from the true
    projection, held fixed for the duration of an event (a confused detector
    latches onto the wrong structure). Returns ``(V, F, J, 2)`` detections and
    ``(V, F, J)`` visibility.
    """
    rng = np.random.default_rng(seed)
    F, J = frames.shape[:2]
    dets = np.zeros((len(cams), F, J, 2))
    vis = np.ones((len(cams), F, J), bool)
    scripts = scripts or {}
    for v, cam in enumerate(cams):
        xy, _ = project(cam, frames)
        noise = rng.normal(0.0, noise_sigma_px, size=xy.shape) if noise_sigma_px > 0 else 0.0
        out = xy + noise
        for ev in scripts.get(cam.id, []):
            sl = slice(ev.start, ev.start + ev.duration)
            for j in ev.joints:
                mag = rng.uniform(50.0, 150.0)
                a = rng.uniform(0, 2 * np.pi)
                shift = mag * np.array([np.cos(a), np.sin(a)])
                out[sl, j] = xy[sl, j] + shift
                vis[v, sl, j] = False
        out[..., 0] = np.clip(out[..., 0], 0.0, cam.width)
        out[..., 1] = np.clip(out[..., 1], 0.0, cam.height)
        dets[v] = out
    return dets, vis


@dataclass
class Sequence:
    id: str
    subject: str
    split: str  # "train" or "test"
    style: str
    fps: float
    gt3d: np.ndarray  # (F, J, 3)
    detections: np.ndarray  # (V, F, J, 2)
    visibility: np.ndarray  # (V, F, J)
    labeled: np.ndarray  # (F,) bool
    occlusions: list[OcclusionEvent] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.gt3d.shape[0]


@dataclass
class DatasetFile:
    skeleton: Skeleton
    cameras: list[Camera]
    sequences: list[Sequence]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Sequence]:
        return [s for s in self.sequences if s.split == name]

    def to_dict(self) -> dict:
        cam_ids = [c.id for c in self.cameras]
        return {
            "format_version": FORMAT_VERSION,
            "meta": self.meta,
            "skeleton": self.skeleton.to_dict(),
            "cameras": [c.to_dict() for c in self.cameras],
            "sequences": [{
                "id": s.id, "subject": s.subject, "split": s.split, "style": s.style,
                "fps": s.fps, "gt3d": s.gt3d.tolist(),
                "labeled": s.labeled.astype(int).tolist(),
                "views": [{"camera": cid, "detections": s.detections[v].tolist(),
                           "visibility": s.visibility[v].astype(int).tolist()}
                          for v, cid in enumerate(cam_ids)],
                "occlusions": [e.to_dict() for e in s.occlusions],
            } for s in self.sequences],
        }


def write_dataset(ds: DatasetFile, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(ds.to_dict(), fh)  # float repr round-trips exactly
    tmp.replace(path)
    return path


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise DatasetParseError(f"{where}: missing field {key!r}")
    return d[key]


def parse_dataset(doc: dict, where: str = "dataset") -> DatasetFile:
    from .graph import Skeleton

    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{where}: format_version {version!r} is not supported "
                                      f"(expected {FORMAT_VERSION})")
    skel = Skeleton.from_dict(_field(doc, "skeleton", where))
    cam_docs = _field(doc, "cameras", where)
    try:
        cams = [Camera.from_dict(c) for c in cam_docs]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"{where}: field 'cameras': {exc}") from exc
    cam_index = {c.id: i for i, c in enumerate(cams)}
    seqs = []
    for k, sd in enumerate(_field(doc, "sequences", where)):
        loc = f"{where}: sequences[{k}]"
        try:
            gt = np.asarray(_field(sd, "gt3d", loc), dtype=np.float64)
            F = gt.shape[0]
            if gt.ndim != 3 or gt.shape[1:] != (skel.n_joints, 3):
                raise DatasetParseError(f"{loc}.gt3d: expected (F, {skel.n_joints}, 3), got {gt.shape}")
            dets = np.zeros((len(cams), F, skel.n_joints, 2))
            vis = np.zeros((len(cams), F, skel.n_joints), bool)
            seen = set()
            for view in _field(sd, "views", loc):
                cid = _field(view, "camera", f"{loc}.views")
                if cid not in cam_index:
                    raise DatasetParseError(f"{loc}.views: unknown camera {cid!r}")
                v = cam_index[cid]
                dets[v] = np.asarray(_field(view, "detections", f"{loc}.views[{cid}]"), dtype=np.float64)
                vis[v] = np.asarray(_field(view, "visibility", f"{loc}.views[{cid}]"), dtype=bool)
                seen.add(cid)
            if seen != set(cam_index):
                raise DatasetParseError(f"{loc}.views: missing cameras {sorted(set(cam_index) - seen)}")
            labeled = np.asarray(sd.get("labeled", [0] * F), dtype=bool)
            if labeled.shape != (F,):
                raise DatasetParseError(f"{loc}.labeled: expected {F} flags")
            occl = [OcclusionEvent(e["camera"], e["joints"], e["start"], e["duration"])
                    for e in sd.get("occlusions", [])]
            split = _field(sd, "split", loc)
            if split not in ("train", "test"):
                raise DatasetParseError(f"{loc}.split: expected 'train' or 'test', got {split!r}")
            seqs.append(Sequence(id=str(_field(sd, "id", loc)), subject=str(sd.get("subject", "")),
                                 split=split, style=str(sd.get("style", "")),
                                 fps=float(sd.get("fps", 50.0)), gt3d=gt, detections=dets,
                                 visibility=vis, labeled=labeled, occlusions=occl))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DatasetParseError):
                raise
            raise DatasetParseError(f"{loc}: {exc}") from exc
    return DatasetFile(skeleton=skel, cameras=cams, sequences=seqs, meta=doc.get("meta", {}))


def read_dataset(path) -> DatasetFile:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise DatasetParseError(f"{path}: top level must be an object")
    return parse_dataset(doc, str(path))


def labeled_block(n_frames: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """One contiguous labeled block covering ``fraction`` of the frames."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"labeled fraction must be in [0, 1], got {fraction}")
    n = int(round(fraction * n_frames))
    out = np.zeros(n_frames, bool)
    if n:
        start = int(rng.integers(0, n_frames - n + 1))
        out[start:start + n] = True
    return out


def synthesize(skel: Skeleton, n_sequences: int = 8, n_frames: int = 600, n_cameras: int = 4,
               noise_px: float = 5.0, occlusion_rate: float = 0.3, labeled_fraction: float = 0.1,
               n_test: int = 2, seed: int = 0, style: str = "mixed", fps: float = 50.0) -> DatasetFile:
    """Full dataset; sequence ``i`` draws everything from child seed ``(seed, i)``."""
    if n_test >= n_sequences and n_sequences > 1:
        raise ConfigError("need at least one training sequence")
    cams = default_rig(n_cameras)
    seqs = []
    styles = STYLES if style == "mixed" else (style,)
    for i in range(n_sequences):
        ss = np.random.SeedSequence([seed, i])
        motion_seed, occl_seed, noise_seed, split_seed, subj_seed = ss.generate_state(5)
        subj_rng = np.random.default_rng(subj_seed)
        scale = subj_rng.uniform(0.9, 1.1)
        st = styles[i % len(styles)]
        mot = generate_motion(skel, n_frames, int(motion_seed), st, fps=fps,
                              subject=f"S{i}", bone_scale=scale)
        orng = np.random.default_rng(occl_seed)
        scripts = {c.id: occlusion_script(skel, n_frames, c.id, occlusion_rate, orng) for c in cams}
        dets, vis = corrupt_detections(mot.frames, cams, noise_px, scripts, int(noise_seed))
        split = "test" if i >= n_sequences - n_test else "train"
        labeled = (labeled_block(n_frames, labeled_fraction, np.random.default_rng(split_seed))
                   if split == "train" else np.zeros(n_frames, bool))
        seqs.append(Sequence(id=f"seq{i:03d}", subject=mot.subject, split=split, style=mot.style,
                             fps=fps, gt3d=mot.frames, detections=dets, visibility=vis,
                             labeled=labeled,
                             occlusions=[e for c in cams for e in scripts[c.id]]))
    meta = {"n_sequences": n_sequences, "n_frames": n_frames, "n_cameras": n_cameras,
            "noise_px": noise_px, "occlusion_rate": occlusion_rate,
            "labeled_fraction": labeled_fraction, "n_test": n_test, "seed": seed, "style": style,
            "fps": fps}
    return DatasetFile(skeleton=skel, cameras=cams, sequences=seqs, meta=meta)


def dataset_stats(ds: DatasetFile) -> dict:
    per_cam = {}
    total = 0
    hidden = 0
    for v, cam in enumerate(ds.cameras):
        n = sum(s.visibility[v].size for s in ds.sequences)
        h = sum(int((~s.visibility[v]).sum()) for s in ds.sequences)
        per_cam[cam.id] = {"joint_frames": n, "occluded": h, "occluded_fraction": h / n if n else 0.0}
        total += n
        hidden += h
    labeled = sum(int(s.labeled.sum()) for s in ds.split("train"))
    train_frames = sum(s.n_frames for s in ds.split("train"))
    return {
        "n_sequences": len(ds.sequences),
        "n_train": len(ds.split("train")),
        "n_test": len(ds.split("test")),
        "n_frames": sum(s.n_frames for s in ds.sequences),
        "labeled_frames": labeled,
        "unlabeled_frames": train_frames - labeled,
        "joint_observations": total,
        "occluded_observations": hidden,
        "occluded_fraction": hidden / total if total else 0.0,
        "per_camera": per_cam,
    }
