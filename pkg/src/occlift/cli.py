"""Command-line entry point: ``occlift <command> [flags]``.

Every successful command writes a run manifest next to its outputs; failures
print one JSON line on stderr and exit 2 (configuration), 3 (I/O or parse) or
4 (numerical).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, desk_preset, load_config, resolve_seed
from .errors import ConfigError, DatasetParseError, OccliftError

MANIFEST_VERSION = 1


# -- helpers -------------------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _with_seed(argv: list[str], seed: int) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--seed":
            skip = True
            continue
        if a.startswith("--seed="):
            continue
        out.append(a)
    return out + ["--seed", str(seed)]


def write_manifest(path: Path, command: str, argv: list[str], config: dict, seed: int | None,
                   inputs: dict[str, str], outputs: dict[str, str], wall: float) -> Path:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "argv": _with_seed(argv, seed) if seed is not None else list(argv),
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": _sha256(v)}
                   for k, v in inputs.items()},
        "outputs": {k: str(Path(v).resolve()) for k, v in outputs.items()},
        "toolkit_version": __version__,
        "wall_seconds": wall,
    }
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True))
    return path


def _experiment_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return desk_preset() if getattr(args, "preset", "canonical") == "desk" else ExperimentConfig()


def _read_dataset(path):
    from .synthdata import read_dataset

    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise OSError(f"dataset not found: {path}") from exc


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# -- commands ------------------------------------------------------------------

def cmd_synth(args, argv):
    from .graph import load_skeleton
    from .synthdata import dataset_stats, synthesize, write_dataset

    seed = resolve_seed(0, args.seed)
    t0 = time.perf_counter()
    skel = load_skeleton(args.skeleton)
    if args.frames < 1 or args.sequences < 1 or args.cameras < 1:
        raise ConfigError("--frames, --sequences and --cameras must be positive")
    ds = synthesize(skel, n_sequences=args.sequences, n_frames=args.frames, n_cameras=args.cameras,
                    noise_px=args.noise_px, occlusion_rate=args.occlusion_rate,
                    labeled_fraction=args.labeled_fraction, n_test=args.test_sequences,
                    seed=seed, style=args.style)
    out = Path(args.out)
    write_dataset(ds, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "synth", argv, ds.meta, seed,
                   {}, {"dataset": out}, time.perf_counter() - t0)
    _emit(dataset_stats(ds))
    return 0


def cmd_masks(args, argv):
    from .masks import MaskParams, generate_masks, mask_stats, write_stats_csv

    seed = resolve_seed(0, args.seed)
    t0 = time.perf_counter()
    n_nodes = args.n_nodes if args.n_nodes is not None else args.T * args.n_joints
    params = MaskParams(n_masks=args.n_masks, alpha=args.alpha, n_nodes=n_nodes,
                        n_joints=args.n_joints, seed=seed)
    ms = generate_masks(params)
    stats = mask_stats(ms)
    outputs = {}
    if args.out:
        out = Path(args.out)
        ms.save(out)
        outputs["masks"] = out
        csv_path = Path(args.stats_csv) if args.stats_csv else out.with_suffix(".stats.csv")
        write_stats_csv(ms, csv_path)
        outputs["stats_csv"] = csv_path
        write_manifest(out.with_name(out.name + ".manifest.json"), "masks", argv, asdict(params),
                       seed, {}, outputs, time.perf_counter() - t0)
    summary = {k: stats[k] for k in ("n_masks", "n_nodes", "beta", "alpha", "masked_rate",
                                     "mean_pairwise_overlap", "run_length_histogram")}
    _emit(summary)
    return 0


def cmd_train(args, argv):
    from .masks import MaskSet
    from .training import run_training

    cfg = _experiment_config(args)
    seed = resolve_seed(cfg.train.seed, args.seed)
    cfg = cfg.replace(train={"seed": seed})
    if args.log_every:
        cfg = cfg.replace(train={"log_every": args.log_every})
    t0 = time.perf_counter()
    ds = _read_dataset(args.dataset)
    mask_set = MaskSet.load(args.masks) if args.masks else None
    out = Path(args.out)
    trainer = run_training(ds, cfg, out_dir=out, seed=seed, mask_set=mask_set)
    inputs = {"dataset": args.dataset}
    if args.config:
        inputs["config"] = args.config
    if args.masks:
        inputs["masks"] = args.masks
    write_manifest(out / "run_manifest.json", "train", argv, cfg.to_dict(), seed, inputs,
                   {"checkpoint": out / "checkpoint.json", "loss_curve": out / "loss_curve.csv"},
                   time.perf_counter() - t0)
    _emit({"checkpoint": str(out / "checkpoint.json"), "iterations": trainer.step,
           "final_loss": trainer.curve[-1][2] if trainer.curve else None})
    return 0


def cmd_eval(args, argv):
    from .evalmetrics import evaluate
    from .graph import build_graph, normalize, sparse_operators
    from .numkit import load_checkpoint
    from .training import make_tracks, state_from_checkpoint

    t0 = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    state, cfg, skel = state_from_checkpoint(ckpt)
    ds = _read_dataset(args.dataset)
    if ds.skeleton.n_joints != skel.n_joints:
        raise ConfigError(f"checkpoint has {skel.n_joints} joints, dataset {ds.skeleton.n_joints}")
    ops = sparse_operators(normalize(build_graph(skel, cfg.T, cfg.strides)))
    tracks = make_tracks(ds.split(args.split), ds.cameras, clean_2d=args.clean_2d)
    heads = ("lnet", "rnet") if args.head == "both" else (args.head,)
    reports = evaluate(state, ops, tracks, heads=heads, partitions=not args.no_partitions)
    doc = {"split": args.split, "clean_2d": args.clean_2d,
           "hard_partition_note": "synthetic stand-in: hard = windows with >= 30% joints occluded",
           "reports": [r.to_dict() for r in reports]}
    if args.out:
        out = Path(args.out)
        _atomic_write(out, json.dumps(doc, sort_keys=True))
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval", argv, cfg.to_dict(),
                       None, {"checkpoint": args.checkpoint, "dataset": args.dataset},
                       {"report": out}, time.perf_counter() - t0)
    _emit(doc)
    return 0


def _parse_value(param: str, text: str):
    if param == "strides":
        if text.strip() in ("", "none", "{}", "empty"):
            return ()
        return tuple(int(s) for s in text.strip("{}").split(","))
    if param in ("T", "t_p", "n_masks"):
        return int(text)
    if param == "alpha":
        return float(text)
    return text


def cmd_ablate(args, argv):
    from .evalmetrics import AblationSpec, run_ablation

    cfg = _experiment_config(args)
    seeds = args.seeds
    if args.seed is not None or os.environ.get("OCCLIFT_SEED"):
        seeds = [resolve_seed(0, args.seed)]
    try:
        values = [_parse_value(args.param, v) for v in args.values]
    except ValueError as exc:
        raise ConfigError(f"bad value for {args.param}: {exc}") from exc
    spec = AblationSpec(param=args.param, values=values, base=cfg, seeds=list(seeds))
    t0 = time.perf_counter()
    ds = _read_dataset(args.dataset)
    out = Path(args.out)
    rows = run_ablation(spec, ds, out_csv=out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "ablate", argv,
                   {"base": cfg.to_dict(), "param": args.param, "values": args.values,
                    "seeds": list(seeds)}, None, {"dataset": args.dataset}, {"csv": out},
                   time.perf_counter() - t0)
    _emit({"csv": str(out), "rows": len(rows)})
    return 0


def cmd_triangulate(args, argv):
    import csv

    from .geometry import triangulate_points

    t0 = time.perf_counter()
    ds = _read_dataset(args.dataset)
    seqs = [s for s in ds.sequences if args.sequence in (None, s.id)]
    if not seqs:
        raise ConfigError(f"no sequence named {args.sequence!r}")
    out = Path(args.out)
    errs, n_invalid, n_total = [], 0, 0
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "frame", "joint", "x", "y", "z", "residual_px", "valid"])
        for s in seqs:
            pts, res, ok = triangulate_points(ds.cameras, s.detections, s.visibility)
            n_total += ok.size
            n_invalid += int((~ok).sum())
            errs.append(np.linalg.norm(pts[ok] - s.gt3d[ok], axis=-1))
            for f, j in np.ndindex(ok.shape):
                x, y, z = pts[f, j]
                w.writerow([s.id, f, j, repr(float(x)), repr(float(y)), repr(float(z)),
                            repr(float(res[f, j])), int(ok[f, j])])
    cat = np.concatenate(errs) if errs else np.zeros(0)
    summary = {"csv": str(out), "joints": n_total, "invalid": n_invalid,
               "mean_error_mm": float(cat.mean()) if cat.size else None}
    write_manifest(out.with_name(out.name + ".manifest.json"), "triangulate", argv,
                   {"sequence": args.sequence}, None, {"dataset": args.dataset}, {"csv": out},
                   time.perf_counter() - t0)
    _emit(summary)
    return 0


def cmd_stats(args, argv):
    from .synthdata import dataset_stats

    _emit(dataset_stats(_read_dataset(args.dataset)))
    return 0


def cmd_replay(args, argv):
    try:
        doc = json.loads(Path(args.manifest).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{args.manifest}: line {exc.lineno}: {exc.msg}") from exc
    if doc.get("manifest_version") != MANIFEST_VERSION:
        raise DatasetParseError(f"{args.manifest}: unsupported manifest_version")
    for name, rec in doc.get("inputs", {}).items():
        if _sha256(rec["path"]) != rec["sha256"]:
            raise ConfigError(f"input {name} ({rec['path']}) changed since the recorded run")
    rerun = list(doc["argv"])
    if args.out:
        if "--out" not in rerun:
            raise ConfigError("recorded command has no --out to redirect")
        rerun[rerun.index("--out") + 1] = args.out
    return main(rerun)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occlift", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"occlift {__version__}")
    p.add_argument("--verbose", action="store_true", help="log iteration lines to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--skeleton", default="h36m17", help="h36m17, sc13 or a JSON skeleton file")
    s.add_argument("--frames", type=int, default=600, help="frames per sequence")
    s.add_argument("--sequences", type=int, default=8, help="number of sequences")
    s.add_argument("--test-sequences", type=int, default=2, help="sequences held out for testing")
    s.add_argument("--cameras", type=int, default=4, help="cameras on the rig circle")
    s.add_argument("--noise-px", type=float, default=5.0, help="2D detection noise sigma")
    s.add_argument("--occlusion-rate", type=float, default=0.3,
                   help="share of frames touched by an occlusion event, per camera")
    s.add_argument("--labeled-fraction", type=float, default=0.1,
                   help="share of training frames with ground-truth labels")
    s.add_argument("--style", choices=["walk", "reach", "mixed"], default="mixed")
    s.add_argument("--seed", type=int, help="overrides OCCLIFT_SEED")
    s.add_argument("--out", required=True, help="dataset JSON path")
    s.set_defaults(fn=cmd_synth)

    m = sub.add_parser("masks", help="generate a structured mask set")
    m.add_argument("--n-nodes", type=int, help="graph nodes N (default T * n_joints)")
    m.add_argument("--T", type=int, default=31, help="window length when --n-nodes is absent")
    m.add_argument("--n-joints", type=int, default=17, help="joints per frame")
    m.add_argument("--n-masks", type=int, default=32, help="number of masks N_M")
    m.add_argument("--alpha", type=float, default=1.8, help="overlap parameter (>= 1)")
    m.add_argument("--seed", type=int, help="overrides OCCLIFT_SEED")
    m.add_argument("--out", help="mask set JSON path")
    m.add_argument("--stats-csv", help="per-mask stats CSV (default next to --out)")
    m.set_defaults(fn=cmd_masks)

    t = sub.add_parser("train", help="warm start then joint training")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--preset", choices=["canonical", "desk"], default="canonical",
                   help="defaults when --config is absent")
    t.add_argument("--dataset", required=True, help="dataset JSON")
    t.add_argument("--masks", help="mask set JSON (default: generated from the config)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, help="overrides OCCLIFT_SEED and the config seed")
    t.add_argument("--log-every", type=int, default=0, help="log a loss line every N iterations")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--head", choices=["lnet", "rnet", "both"], default="both")
    e.add_argument("--clean-2d", action="store_true",
                   help="use exact projections of ground truth instead of detections")
    e.add_argument("--no-partitions", action="store_true", help="skip the easy/hard split")
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one parameter over values and seeds")
    a.add_argument("--param", required=True,
                   choices=["T", "t_p", "strides", "alpha", "n_masks", "dropout_mode"])
    a.add_argument("--values", nargs="+", required=True,
                   help="strides as 1,3,5,7 (none for the empty set); dropout_mode as "
                        "structured, none, uniform:RATE or a bare rate")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--seed", type=int, help="single seed; overrides --seeds and OCCLIFT_SEED")
    a.add_argument("--config", help="base experiment config JSON")
    a.add_argument("--preset", choices=["canonical", "desk"], default="canonical")
    a.add_argument("--dataset", required=True)
    a.add_argument("--out", required=True, help="results CSV")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("triangulate", help="DLT-triangulate every frame of a dataset")
    g.add_argument("--dataset", required=True)
    g.add_argument("--sequence", help="restrict to one sequence id")
    g.add_argument("--out", required=True, help="points CSV")
    g.set_defaults(fn=cmd_triangulate)

    st = sub.add_parser("stats", help="visibility and split statistics of a dataset")
    st.add_argument("--dataset", required=True)
    st.set_defaults(fn=cmd_stats)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", help="redirect the recorded --out")
    r.set_defaults(fn=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.fn(args, argv)
    except OccliftError as exc:
        code, kind, msg = exc.exit_code, exc.kind, str(exc)
    except OSError as exc:
        code, kind, msg = 3, "io", str(exc)
    except KeyboardInterrupt:
        return 130
    print(json.dumps({"error": kind, "exit_code": code, "message": msg}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
