"""Binary checkpoint format, version 1.

Layout (little-endian)::

    b"LMCK"  u32 version  u32 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 n_params
    per parameter:
        u16 name_len  name  u8 ndim  u32 dims[ndim]
        f64 value[...]  f64 adam_m[...]  f64 adam_v[...]  u64 step_count

``meta`` carries the model config echo, training iteration and the rest of the
training state (early-stopping bookkeeping and the seed, which together with the
iteration fully determines every future random draw).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .layers import Parameter
from .tensor import Tensor

MAGIC = b"LMCK"
VERSION = 1


def dumps(params, meta: dict) -> bytes:
    buf = io.BytesIO()
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        shape = p.value.shape
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        for arr in (p.value.data, p.adam_m, p.adam_v):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buf.write(struct.pack("<Q", p.step_count))
    return buf.getvalue()


def loads(raw: bytes):
    """Return ``(params, meta)``."""
    if raw[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = 4
    version, meta_len = struct.unpack_from("<II", raw, off)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    meta = json.loads(raw[off : off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = []
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
            off += 8 * count
        (steps,) = struct.unpack_from("<Q", raw, off)
        off += 8
        params.append(Parameter(name, Tensor(arrays[0]), adam_m=arrays[1], adam_v=arrays[2], step_count=int(steps)))
    if off != len(raw):
        raise ValueError(f"trailing bytes in checkpoint ({len(raw) - off})")
    return params, meta


def save(path, params, meta: dict) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path):
    return loads(Path(path).read_bytes())
