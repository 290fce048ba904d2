"""Checkpoint container.

A checkpoint is a UTF-8 JSON document::

    {
      "format": "driftguard-checkpoint",
      "version": 1,
      "dtype": "float32",
      "architecture": {...Architecture fields...},
      "params":  {name: {"shape": [...], "data": [row-major floats]}},
      "buffers": {name: {"shape": [...], "data": [...]}},
      "sidecar": {...free-form: selected hyperparameters, class priors...}
    }

Floats are written with Python's shortest round-trip repr, so a float32 or
float64 model reloads bit-exactly.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from driftguard.errors import CheckpointMismatch
from driftguard.nn.model import Architecture, SleepNet

FORMAT = "driftguard-checkpoint"
VERSION = 1


def _pack(arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    return {
        name: {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
        for name, a in arrays.items()
    }


def to_dict(model: SleepNet, sidecar: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "dtype": model.dtype.name,
        "architecture": model.arch.to_dict(),
        "params": _pack(model.params),
        "buffers": _pack(model.buffers),
        "sidecar": sidecar or {},
    }


def dumps(model: SleepNet, sidecar: dict | None = None) -> str:
    return json.dumps(to_dict(model, sidecar), sort_keys=True)


def save(path: str | os.PathLike, model: SleepNet, sidecar: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model, sidecar))


def from_dict(doc: dict) -> tuple[SleepNet, dict]:
    if doc.get("format") != FORMAT:
        raise CheckpointMismatch(f"not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {doc.get('version')}")
    try:
        arch = Architecture.from_dict(doc["architecture"])
    except (KeyError, TypeError) as exc:
        raise CheckpointMismatch(f"bad architecture block: {exc}") from exc
    model = SleepNet(arch, np.dtype(doc.get("dtype", "float32")))
    for section, target in (("params", model.params), ("buffers", model.buffers)):
        stored = doc.get(section, {})
        if set(stored) != set(target):
            missing = sorted(set(target) - set(stored))
            extra = sorted(set(stored) - set(target))
            raise CheckpointMismatch(f"{section}: missing {missing}, unexpected {extra}")
        for name, entry in stored.items():
            if tuple(entry["shape"]) != target[name].shape:
                raise CheckpointMismatch(
                    f"{name}: shape {entry['shape']} != expected {list(target[name].shape)}"
                )
            target[name][...] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    model.mark_updated()
    return model, doc.get("sidecar", {})


def load(path: str | os.PathLike) -> tuple[SleepNet, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointMismatch(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)
