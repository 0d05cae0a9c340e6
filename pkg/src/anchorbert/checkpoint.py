"""Checkpoint container: JSON header + raw little-endian float32 payloads.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, then the
parameter arrays back to back in manifest order. The header carries the model
config, step counter, phase tag, and a manifest of named arrays with shapes
and byte offsets into the payload. load(save(state)) is bitwise-identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import ModelConfig, ModelState, init_model
from .rng import make_rng

MAGIC = b"ABCKPT01"


def save_checkpoint(path, state: ModelState, cfg: ModelConfig, step: int, phase: str):
    params = state.named_parameters()
    manifest = []
    offset = 0
    blobs = []
    for name, t in params:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "size": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "config": dataclasses.asdict(cfg),
        "step": int(step),
        "phase": phase,
        "manifest": manifest,
    }).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelState, ModelConfig, int, str]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise InputError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    cfg = ModelConfig(**header["config"])
    state = init_model(cfg, make_rng(0))
    by_name = dict(state.named_parameters())
    seen = set()
    for entry in header["manifest"]:
        name = entry["name"]
        if name not in by_name:
            raise InputError(f"{path}: unknown array {name!r} in manifest")
        arr = np.frombuffer(payload, dtype="<f4", count=entry["size"],
                            offset=entry["offset"]).reshape(entry["shape"])
        t = by_name[name]
        if tuple(arr.shape) != t.shape:
            raise InputError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr.astype(np.float32).copy()
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise InputError(f"{path}: manifest missing arrays: {sorted(missing)[:5]}")
    return state, cfg, int(header["step"]), header["phase"]
