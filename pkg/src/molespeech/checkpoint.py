"""Binary checkpoint container: "MSLB" magic, canonical JSON config
snapshot, then named float32 little-endian parameter records with per-record
CRC32. Records are written in sorted name order, so save -> load -> save is
byte-identical and every parameter round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError

MAGIC = b"MSLB"
VERSION = 1
_MAX_RANK = 8


def canonical_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def checkpoint_save(path, params: dict[str, np.ndarray], config: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = canonical_config(config).encode()
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        if isinstance(params[name], Tensor):
            raise FormatError("pass raw arrays, not tensors")
        arr = np.asarray(params[name]).astype("<f4", copy=False)
        name_b = name.encode()
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            blob += struct.pack("<I", extent)
        payload = arr.tobytes()
        blob += payload
        blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic in {path}; not a checkpoint")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    cfg_len = r.u32("config length")
    try:
        config = json.loads(r.take(cfg_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"corrupt config snapshot: {err}") from err
    n_records = r.u32("record count")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name_len = r.u16("record name length")
        if name_len == 0:
            raise FormatError("empty record name")
        name = r.take(name_len, "record name").decode(errors="replace")
        rank = r.u8(f"rank of {name}")
        if rank > _MAX_RANK:
            raise FormatError(f"record {name}: implausible rank {rank}")
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(4 * count, f"payload of {name}")
        crc = r.u32(f"checksum of {name}")
        if zlib.crc32(payload) != crc:
            raise FormatError(f"record {name}: payload checksum mismatch (corrupt data)")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        if not np.isfinite(arr).all():
            raise FormatError(f"record {name}: non-finite values")
        params[name] = arr.copy()
    if r.off != len(blob):
        raise FormatError(f"{len(blob) - r.off} trailing bytes after the last record")
    return params, config


def fingerprint(params: dict) -> dict[str, str]:
    """Stable content hash per named parameter (bit-level freeze checks)."""
    out = {}
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else np.asarray(p)
        out[name] = hashlib.sha1(np.ascontiguousarray(data).tobytes()).hexdigest()
    return out
