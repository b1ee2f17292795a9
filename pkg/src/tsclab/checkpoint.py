"""Checkpoints as self-describing JSON.

Floats are written with ``repr`` (shortest round-trip form), so every
finite double reads back bit-for-bit.  Writes go to a temporary file that
is renamed into place, so a crash never leaves a truncated checkpoint.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import LayoutError, SchemaError
from .nn import AdamState, NetworkSpec, WeightState, build_layout

FORMAT = "tsclab-checkpoint"
VERSION = 1


def weights_to_dict(weights: WeightState, spec: NetworkSpec, opt: AdamState | None = None) -> dict:
    d = {
        "spec": spec.to_dict(),
        "layout": [
            {"offset": l.offset, "in": l.in_dim, "out": l.out_dim, "activation": l.activation,
             "role": l.role}
            for l in weights.layout
        ],
        "values": weights.values.tolist(),
    }
    if opt is not None:
        d["optimizer"] = {
            "first_moment": opt.first_moment.tolist(),
            "second_moment": opt.second_moment.tolist(),
            "step_count": opt.step_count,
            **opt.hyper(),
        }
    return d


def weights_from_dict(d: dict):
    """Inverse of ``weights_to_dict``; returns ``(weights, spec, opt_or_None)``."""
    try:
        spec = NetworkSpec.from_dict(d["spec"])
        layout = build_layout(spec)
        stored = [(l["offset"], l["in"], l["out"], l["activation"], l["role"])
                  for l in d["layout"]]
        values = np.array(d["values"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed weight record: missing or bad field {exc}") from None
    if stored != [(l.offset, l.in_dim, l.out_dim, l.activation, l.role) for l in layout]:
        raise LayoutError("stored layout disagrees with the stored network spec")
    weights = WeightState(values, layout)
    opt = None
    if "optimizer" in d:
        o = d["optimizer"]
        opt = AdamState(np.array(o["first_moment"], dtype=np.float64),
                        np.array(o["second_moment"], dtype=np.float64), int(o["step_count"]),
                        float(o["lr"]), float(o["beta1"]), float(o["beta2"]),
                        float(o["epsilon"]))
        if opt.first_moment.shape != values.shape or opt.second_moment.shape != values.shape:
            raise LayoutError("optimizer moments do not match the parameter vector")
    return weights, spec, opt


def save_checkpoint(path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, **payload}
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        json.dump(doc, fh, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    try:
        with path.open() as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a checkpoint ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise SchemaError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise SchemaError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    return doc


def save_weights(path, weights: WeightState, spec: NetworkSpec, opt=None, **extra) -> Path:
    return save_checkpoint(path, "weights", {**weights_to_dict(weights, spec, opt), **extra})


def load_weights(path):
    return weights_from_dict(load_checkpoint(path, "weights"))
