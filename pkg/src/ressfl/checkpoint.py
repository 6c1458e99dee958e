"""Binary checkpoint format.

Layout, all integers little-endian::

    b"RSFL"  u32 version  u32 tensor_count
    per tensor: u16 name_len, utf-8 name, u8 rank, rank x u32 dims, float64 payload
    u32 meta_len, utf-8 JSON metadata
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, ShapeError, TruncatedFileError, VersionMismatchError
from .layers import Sequential

MAGIC = b"RSFL"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise BadMagicError("not an RSFL checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    (meta_len,) = r.unpack("<I")
    meta = r.take(meta_len)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if zlib.crc32(raw[:body_end]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    if r.pos != len(raw):
        raise ChecksumError(f"{len(raw) - r.pos} trailing bytes after the checksum")
    return Checkpoint(tensors, json.loads(meta.decode("utf-8")))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def network_tensors(net: Sequential, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + name: p.data.copy() for name, p in net.named_params()}


def load_into(net: Sequential, ckpt: Checkpoint, prefix: str) -> None:
    """Copy ``prefix``-ed tensors into ``net``; every parameter must be present with a matching shape."""
    for name, p in net.named_params():
        key = prefix + name
        if key not in ckpt.tensors:
            raise ShapeError(f"checkpoint has no tensor {key!r}")
        arr = ckpt.tensors[key]
        if arr.shape != p.shape:
            raise ShapeError(f"tensor {key!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
    expected = {prefix + name for name, _ in net.named_params()}
    extra = sorted(k for k in ckpt.tensors if k.startswith(prefix) and k not in expected)
    if extra:
        raise ShapeError(f"checkpoint tensors not present in the model: {extra}")
    for name, p in net.named_params():
        p.data = ckpt.tensors[prefix + name].copy()
