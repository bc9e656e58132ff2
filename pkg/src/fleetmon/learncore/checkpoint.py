"""FMCK checkpoint container.

Layout (all integers little-endian):
  magic    4 bytes  b"FMCK"
  version  u32      currently 1
  then per-parameter records:
    name_len u32, name utf-8 bytes, dtype u8 (0 = float32),
    rank u32, dims u32 * rank, raw little-endian payload.

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Module

MAGIC = b"FMCK"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(Exception):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode()
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<B", DTYPE_F32)
        buf += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        if arr.dtype.byteorder == ">":
            arr = arr.byteswap().view(arr.dtype.newbyteorder())
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode()
        off += name_len
        (dtype_tag,) = struct.unpack_from("<B", raw, off)
        off += 1
        if dtype_tag != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype tag {dtype_tag}")
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out[name] = arr.astype(np.float32)
    return out


def save_module(path: str | Path, module: Module):
    save_arrays(path, dict(module.named_parameters()))


def _param_arrays(module: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in module.named_parameters()}


def load_module(path: str | Path, module: Module):
    arrays = load_arrays(path)
    params = dict(module.named_parameters())
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"{path}: parameter mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name].copy()
