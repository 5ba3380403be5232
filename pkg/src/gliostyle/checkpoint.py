"""Binary checkpoint format for :class:`ModelState`.

Layout: magic ``MUNT``, little-endian u16 format version, u32 length of a
UTF-8 JSON blob (config, tensor names and shapes, counters, RNG state, meta),
the blob itself, then every weight tensor, every first moment and every second
moment as little-endian float32 in parameter declaration order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .unet import ModelState, UNetConfig

MAGIC = b"MUNT"
VERSION = 1


def _blob(model: ModelState) -> bytes:
    doc = {
        "config": model.config.to_dict(),
        "tensors": [[name, list(p.shape)] for name, p in model.params.items()],
        "step": model.step,
        "epoch": model.epoch,
        "rng": model.rng.bit_generator.state,
        "meta": model.meta,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model: ModelState) -> bytes:
    blob = _blob(model)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    for group in (model.params, model.m, model.v):
        for name in model.params:
            parts.append(np.ascontiguousarray(group[name], dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_save(model: ModelState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def checkpoint_load(path: str | Path) -> ModelState:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        doc = json.loads(raw[10:10 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    config = UNetConfig.from_dict(doc["config"])
    offset = 10 + n
    groups = []
    for _ in range(3):
        group = {}
        for name, shape in doc["tensors"]:
            count = int(np.prod(shape))
            if offset + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated tensor data at {name}")
            group[name] = np.frombuffer(raw, "<f4", count, offset).reshape(shape).astype(np.float32)
            offset += 4 * count
        groups.append(group)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng"]
    return ModelState(config, *groups, step=doc["step"], epoch=doc["epoch"], rng=rng, meta=doc["meta"])
