"""JSON checkpoints: ``{"format_version": 1, "arch": ..., "params": {name: flat list}}``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arch: dict, params: dict[str, Tensor]) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "arch": arch,
        "params": {name: p.value.ravel().tolist() for name, p in params.items()},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    if not isinstance(doc.get("arch"), dict) or not isinstance(doc.get("params"), dict):
        raise CheckpointError(f"{path}: checkpoint needs 'arch' and 'params' objects")
    return doc["arch"], {k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()}


def load_into(path, arch: dict, params: dict[str, Tensor]) -> None:
    """Copy checkpoint values into ``params`` after checking the architecture."""
    saved_arch, values = read_checkpoint(path)
    if saved_arch != arch:
        raise CheckpointError(f"{path}: architecture mismatch: saved {saved_arch}, expected {arch}")
    if set(values) != set(params):
        missing = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        flat = values[name]
        if flat.size != p.value.size:
            raise CheckpointError(f"{path}: {name} has {flat.size} values, expected {p.value.size}")
        p.value = flat.reshape(p.value.shape)
        p.zero_grad()
