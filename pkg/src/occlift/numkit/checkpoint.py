"""JSON checkpoints: named parameter arrays plus optimizer moments."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import DatasetParseError, ShapeError, UnsupportedVersionError
from .adam import AdamState

FORMAT_VERSION = 1


def _pack(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _unpack(obj: dict, where: str) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in obj["shape"])
        data = np.asarray(obj["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"checkpoint field {where}: malformed array ({exc})") from exc
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"checkpoint field {where}: {data.size} values for shape {shape}")
    return data.reshape(shape)


def checkpoint_document(params: dict[str, np.ndarray], optimizers: dict[str, AdamState],
                        step: int, seed: int, config: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "step": int(step),
        "config": config or {},
        "params": {name: _pack(p) for name, p in sorted(params.items())},
        "optimizers": {
            group: {
                "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step,
                "m": {k: _pack(a) for k, a in sorted(st.m.items())},
                "v": {k: _pack(a) for k, a in sorted(st.v.items())},
            }
            for group, st in sorted(optimizers.items())
        },
    }


def save_checkpoint(path, params, optimizers, step, seed, config=None) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    doc = checkpoint_document(params, optimizers, step, seed, config)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None) -> dict:
    """Read a checkpoint; returns ``params``, ``optimizers``, ``step``, ``seed``, ``config``.

    When ``expected_shapes`` is given, parameter names and shapes must match it
    exactly.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint format_version {version!r} "
                                      f"is not supported (expected {FORMAT_VERSION})")
    for key in ("params", "optimizers", "step", "seed"):
        if key not in doc:
            raise DatasetParseError(f"{path}: missing field {key!r}")
    params = {k: _unpack(v, f"params.{k}") for k, v in doc["params"].items()}
    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(params))
        extra = sorted(set(params) - set(expected_shapes))
        if missing or extra:
            raise ShapeError(f"{path}: parameter names differ from architecture "
                             f"(missing={missing}, unexpected={extra})")
        for name, shape in expected_shapes.items():
            if params[name].shape != tuple(shape):
                raise ShapeError(f"{path}: parameter {name!r} has shape "
                                 f"{params[name].shape}, architecture expects {tuple(shape)}")
    optimizers = {}
    for group, st in doc["optimizers"].items():
        optimizers[group] = AdamState(
            beta1=st["beta1"], beta2=st["beta2"], eps=st["eps"], step=st["step"],
            m={k: _unpack(v, f"optimizers.{group}.m.{k}") for k, v in st["m"].items()},
            v={k: _unpack(v, f"optimizers.{group}.v.{k}") for k, v in st["v"].items()},
        )
    return {"params": params, "optimizers": optimizers, "step": doc["step"],
            "seed": doc["seed"], "config": doc.get("config", {})}
