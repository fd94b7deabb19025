"""Binary container shared by instance, score and checkpoint files.

Layout (all integers little-endian)::

    0   8   magic  b"LAGCAUS\\0"
    8   2   format version (u16)
    10  2   payload kind (u16)
    12  4   reserved, zero
    16  4   metadata length M (u32)
    20  M   metadata, UTF-8 JSON with sorted keys
    ..  8   payload length P (u64)
    ..  P   payload, float32 little-endian, row-major
    ..  8   blake2b-64 of every preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LAGCAUS\x00"
VERSION = 1

KIND_INSTANCE = 1
KIND_SCORES = 2
KIND_CHECKPOINT = 3


class ContainerError(ValueError):
    """Malformed container; ``section`` names the part that failed."""

    def __init__(self, section: str, message: str):
        super().__init__(f"[{section}] {message}")
        self.section = section


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def pack(kind: int, meta: dict, payload: np.ndarray) -> bytes:
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += MAGIC + struct.pack("<HHI", VERSION, kind, 0)
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<Q", len(body)) + body
    out += _digest(bytes(out))
    return bytes(out)


def unpack(data: bytes, expect_kind: int | None = None) -> tuple[dict, np.ndarray]:
    """Inverse of :func:`pack`; the payload comes back as a flat float32 array."""
    if len(data) < 16:
        raise ContainerError("header", f"need 16 header bytes, file has {len(data)}")
    if data[:8] != MAGIC:
        raise ContainerError("header", "bad magic")
    version, kind, _ = struct.unpack_from("<HHI", data, 8)
    if version != VERSION:
        raise ContainerError("header", f"unsupported version {version}")
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError("header", f"expected payload kind {expect_kind}, found {kind}")
    pos = 16
    if len(data) < pos + 4:
        raise ContainerError("metadata", "missing metadata length")
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + mlen:
        raise ContainerError("metadata", f"metadata truncated ({len(data) - pos} of {mlen} bytes)")
    try:
        meta = json.loads(data[pos:pos + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError("metadata", f"invalid JSON: {exc}") from exc
    pos += mlen
    if len(data) < pos + 8:
        raise ContainerError("payload", "missing payload length")
    (plen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + plen:
        raise ContainerError("payload", f"payload truncated ({len(data) - pos} of {plen} bytes)")
    if plen % 4:
        raise ContainerError("payload", "payload length is not a multiple of 4")
    payload = np.frombuffer(data[pos:pos + plen], dtype="<f4").astype(np.float32)
    pos += plen
    if len(data) < pos + 8:
        raise ContainerError("hash", "missing content hash")
    if data[pos:pos + 8] != _digest(data[:pos]):
        raise ContainerError("hash", "content hash mismatch")
    if len(data) != pos + 8:
        raise ContainerError("hash", f"{len(data) - pos - 8} trailing bytes after hash")
    return meta, payload


def write_file(path, kind: int, meta: dict, payload: np.ndarray) -> bytes:
    data = pack(kind, meta, payload)
    Path(path).write_bytes(data)
    return data


def read_file(path, expect_kind: int | None = None) -> tuple[dict, np.ndarray]:
    return unpack(Path(path).read_bytes(), expect_kind)
