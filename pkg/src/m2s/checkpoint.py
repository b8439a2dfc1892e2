"""Checkpoint file: ``b"M2S1"``, u32 manifest length, JSON manifest, raw little-endian float32 payload."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .nn import Module

MAGIC = b"M2S1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Module, config_hash: str, extra: dict | None = None) -> None:
    params = model.named_parameters()
    manifest = {
        "config_hash": config_hash,
        "dtype": "float32",
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in params)
    blob = MAGIC + struct.pack("<I", len(head)) + head + payload
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (n,) = struct.unpack("<I", blob[4:8])
    manifest = json.loads(blob[8:8 + n])
    payload = memoryview(blob)[8 + n:]
    expected = sum(int(np.prod(p["shape"])) for p in manifest["params"]) * 4
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest implies {expected}")
    arrays, off = {}, 0
    for p in manifest["params"]:
        count = int(np.prod(p["shape"]))
        arrays[p["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(p["shape"])
        off += count * 4
    return manifest, arrays


def load_checkpoint(path, model: Module, config_hash: str | None = None, force: bool = False) -> dict:
    """Copy weights from ``path`` into ``model``; refuse a config-hash mismatch unless ``force``."""
    manifest, arrays = read_checkpoint(path)
    if config_hash is not None and manifest["config_hash"] != config_hash and not force:
        raise CheckpointError(f"{path}: checkpoint config hash {manifest['config_hash']} does not match "
                              f"model config hash {config_hash} (use --force to override)")
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))[:5]
        unexpected = sorted(set(arrays) - set(params))[:5]
        raise CheckpointError(f"{path}: parameter names differ; missing {missing}, unexpected {unexpected}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data[...] = arrays[name]
    return manifest
