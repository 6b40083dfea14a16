"""GFCK binary checkpoints: header, JSON blocks, tensor manifest, f32 payload.

Layout (little-endian)::

    b"GFCK"  u32 version
    u32 n + n bytes   config fingerprint (ascii hex)
    u32 n + n bytes   RNG state (JSON)
    u32 n + n bytes   metadata (JSON)
    u32 count
    count x { u16 n + name, u8 ndim, ndim x u32 dims, u64 offset, u64 nbytes }
    payload           concatenated f32 tensors; offsets are relative to its start
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FormatError, VersionError

MAGIC = b"GFCK"
VERSION = 1


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    fingerprint: str = ""
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items()
                if not k.startswith("opt/") and k.startswith(prefix)}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {k[4:]: v for k, v in self.tensors.items() if k.startswith("opt/")}


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode(ck: Checkpoint) -> bytes:
    head = [MAGIC, struct.pack("<I", VERSION), _blob(ck.fingerprint.encode()),
            _blob(_json(ck.rng_state)), _blob(_json(ck.meta)),
            struct.pack("<I", len(ck.tensors))]
    payload = []
    offset = 0
    for name, arr in ck.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<QQ", offset, len(data)))
        payload.append(data)
        offset += len(data)
    return b"".join(head + payload)


def decode(buf: bytes) -> Checkpoint:
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated {what}", off)
        out = buf[off:off + n]
        off += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} unsupported "
                           f"(reader supports version {VERSION})", 4)

    def blob(what: str) -> bytes:
        (n,) = struct.unpack("<I", take(4, what))
        return take(n, what)

    fingerprint = blob("fingerprint").decode()
    rng_state = json.loads(blob("rng state"))
    meta = json.loads(blob("metadata"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    manifest = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        t_off, nbytes = struct.unpack("<QQ", take(16, "offset"))
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name!r}: {nbytes} bytes inconsistent with shape {shape}", off)
        manifest.append((name, shape, t_off, nbytes))
    base = off
    expected = 0
    tensors = {}
    for name, shape, t_off, nbytes in manifest:
        if t_off != expected:
            raise FormatError(f"tensor {name!r}: offset {t_off} breaks payload contiguity", base + t_off)
        if base + t_off + nbytes > len(buf):
            raise FormatError(f"truncated payload for tensor {name!r}", base + t_off)
        arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=base + t_off)
        tensors[name] = arr.reshape(shape).astype(np.float32)
        expected += nbytes
    if base + expected != len(buf):
        raise FormatError(f"{len(buf) - base - expected} trailing bytes after payload", base + expected)
    return Checkpoint(tensors, fingerprint, rng_state, meta)


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def check_fingerprint(ck: Checkpoint, fingerprint: str, allow_mismatch: bool = False):
    if ck.fingerprint != fingerprint and not allow_mismatch:
        raise FingerprintMismatch(f"checkpoint fingerprint {ck.fingerprint[:12]} does not match "
                                  f"config fingerprint {fingerprint[:12]}")
