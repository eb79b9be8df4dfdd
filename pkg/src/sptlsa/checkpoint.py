"""Versioned binary checkpoints.

Layout (little-endian)::

    b"SPTLSACK"
    u32 header length, header = canonical JSON {format_version, config, seed, step}
        where ``config`` is itself canonical JSON text
    u32 parameter count
    per parameter: u16 name length, UTF-8 name, u8 ndim, u32 * ndim extents,
                   float64 values in row-major order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ViTConfig, VisionTransformer, build_model

MAGIC = b"SPTLSACK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


@dataclass
class Checkpoint:
    config: ViTConfig
    seed: int
    step: int
    state: dict[str, np.ndarray]

    def to_model(self) -> VisionTransformer:
        model = build_model(self.config, self.seed)
        model.load_state(self.state)
        return model


def checkpoint_bytes(config: ViTConfig, seed: int, step: int, state: dict[str, np.ndarray]) -> bytes:
    header = canonical_json({
        "format_version": FORMAT_VERSION,
        "config": canonical_json(config.to_dict()),
        "seed": int(seed),
        "step": int(step),
    }).encode("ascii")
    chunks = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(state))]
    for name, value in state.items():
        encoded = name.encode("utf-8")
        value = np.asarray(value, dtype="<f8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    return b"".join(chunks)


def save_checkpoint(path, model: VisionTransformer, step: int = 0) -> Path:
    path = Path(path)
    data = checkpoint_bytes(model.config, model.seed, step, model.state())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("ascii"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ViTConfig.from_dict(json.loads(header["config"]))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after checkpoint payload")
    return Checkpoint(config, header["seed"], header["step"], state)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
