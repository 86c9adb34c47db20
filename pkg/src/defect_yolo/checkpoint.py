"""Versioned binary checkpoints.

Layout, all integers little-endian::

    b"DYLO" | u32 version | u32 n + model config JSON | u32 n + metadata JSON
    | u32 tensor count | per tensor: u16 n + name, u8 ndim, u32 dims, f32 data
    | u32 CRC32 of everything before it
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import Detector, ModelConfig

MAGIC = b"DYLO"
VERSION = 1


@dataclass(frozen=True)
class CheckpointMeta:
    epoch: int = 0
    best_val_map: float = 0.0
    seed: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))


def _block(raw: bytes) -> bytes:
    return struct.pack("<I", len(raw)) + raw


def dumps(model: Detector, meta: CheckpointMeta = CheckpointMeta()) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += _block(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    out += _block(json.dumps(asdict(meta), sort_keys=True).encode())
    params = model.parameters()
    out += struct.pack("<I", len(params))
    for name, tensor in params.items():
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", tensor.data.ndim)
        out += struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape)
        out += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {field}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def json(self, field: str) -> dict:
        (n,) = self.unpack("<I", f"{field} length")
        try:
            return json.loads(self.take(n, field).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"malformed {field}: {exc}") from None


def loads(raw: bytes) -> tuple[Detector, CheckpointMeta]:
    """Parse a checkpoint. Nothing is built until every field has validated."""
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    try:
        config = ModelConfig.from_dict(r.json("model config"))
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid model config: {exc}") from None
    try:
        meta = CheckpointMeta(**r.json("metadata"))
    except TypeError as exc:
        raise CheckpointError(f"invalid metadata: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"tensor {k} name length")
        name = r.take(n, f"tensor {k} name").decode(errors="replace")
        (ndim,) = r.unpack("<B", f"tensor {name} rank")
        shape = r.unpack(f"<{ndim}I", f"tensor {name} shape")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size, f"tensor {name} data"), dtype="<f4").reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(raw):
        raise CheckpointError(f"trailing bytes after checksum ({len(raw) - r.pos})")
    if zlib.crc32(raw[:body_end]) != crc:
        raise CheckpointError("checksum mismatch")

    model = Detector(config)
    params = model.parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(f"tensor table does not match architecture (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointError(f"tensor {name} shape {tensors[name].shape} != expected {p.data.shape}")
    for name, p in params.items():
        p.data[...] = tensors[name]
    return model, meta


def save_checkpoint(model: Detector, path, meta: CheckpointMeta = CheckpointMeta()) -> None:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model, meta))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Detector, CheckpointMeta]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(raw)
