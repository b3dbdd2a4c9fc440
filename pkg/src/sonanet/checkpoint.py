"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SONACKPT"  u32 version  u64 header_len  header (UTF-8 JSON)
    u32 entry_count
    per entry: u16 name_len, name, u8 kind (0 param, 1 buffer), u8 ndim,
               ndim x u32 dims, prod(dims) x f64
    32-byte sha256 of everything above

The JSON header echoes the model config plus whatever metadata the caller
adds (training config, normalisation constants, logs).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import model_config_from_dict, model_config_to_dict
from .model import ModelState, build, named_tensors, set_mode

MAGIC = b"SONACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(state: ModelState, meta: dict | None = None) -> bytes:
    header = {"model": model_config_to_dict(state.cfg), "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(hbytes)), hbytes]
    entries = named_tensors(state)
    parts.append(struct.pack("<I", len(entries)))
    for name, t, is_buffer in entries:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", int(is_buffer), t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(path, state: ModelState, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(state, meta))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> tuple[ModelState, dict]:
    """Rebuild the model, validate every entry name and shape, load values.
    The returned model is in eval mode."""
    if len(buf) < len(MAGIC) + 32 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, hlen = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(r.take(hlen).decode("utf-8"))
    state = build(model_config_from_dict(header["model"]), seed=0)
    expected = named_tensors(state)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, model expects {len(expected)}")
    for name, t, is_buffer in expected:
        (nlen,) = r.unpack("<H")
        got = r.take(nlen).decode("utf-8")
        kind, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        if got != name or bool(kind) != is_buffer:
            raise CheckpointError(f"entry {got!r} does not match expected {name!r}")
        if tuple(dims) != t.shape:
            raise CheckpointError(f"{name}: stored shape {tuple(dims)} != model shape {t.shape}")
        n = int(np.prod(dims, dtype=np.int64))
        t.data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last entry")
    return set_mode(state, "eval"), header["meta"]


def load(path) -> tuple[ModelState, dict]:
    return from_bytes(Path(path).read_bytes())
