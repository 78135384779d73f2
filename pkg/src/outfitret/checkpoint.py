"""Checkpoint files: an uncompressed ``.npz`` with a JSON metadata entry.

Keys: ``meta`` (JSON: format version, config snapshot, Adam step),
``param/<name>``, and optionally ``adam_m/<name>`` / ``adam_v/<name>``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .params import HeadParams

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: HeadParams
    config: dict
    optimizer: "AdamState | None" = None
    version: int = FORMAT_VERSION
    extra: dict | None = None


def save_checkpoint(path, params: HeadParams, config: dict, optimizer=None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": FORMAT_VERSION, "config": config, "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.items()}
    if optimizer is not None:
        meta["adam_step"] = optimizer.step
        arrays.update({f"adam_m/{k}": v for k, v in optimizer.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in optimizer.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    from .trainer import AdamState

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            contents = {k: data[k] for k in data.files}
    except (ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if "meta" not in contents:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(contents.pop("meta").tobytes().decode())
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for key, value in contents.items():
        kind, name = key.split("/", 1)
        groups[kind][name] = value
    optimizer = None
    if "adam_step" in meta:
        optimizer = AdamState(groups["adam_m"], groups["adam_v"], int(meta["adam_step"]))
    return Checkpoint(HeadParams(groups["param"]), meta["config"], optimizer,
                      meta["version"], meta.get("extra"))
