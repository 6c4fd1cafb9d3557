"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"LSTCKPT\\0"
    version    u32       currently 1
    meta_len   u32       length of the JSON metadata blob
    meta       bytes     UTF-8 JSON, sorted keys
    n_tensors  u32
    n_tensors x { name_len u16, name bytes, ndim u8, dims u32 * ndim }
    data       f64 LE    every tensor, row-major, in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"LSTCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: dict = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(tensors))]
    arrays = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        arrays.append(arr)
    parts.extend(np.ascontiguousarray(a).tobytes() for a in arrays)
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    table = []
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode()
        off += nl
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        off += 8 * count
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return tensors, meta
