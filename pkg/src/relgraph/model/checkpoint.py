"""RPM1 named-tensor checkpoints.

Layout (little-endian)::

    b"RPM1" | u32 version | u32 meta_len | meta JSON (utf-8)
    u32 n_tensors | per tensor: u16 name_len, name, u8 ndim, u64 dims..., u64 offset
    f32 payload; offsets are counted in bytes from the payload start

The JSON meta blob holds configs and featurizer state; keys are sorted so
identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"RPM1"
VERSION = 1


def params_to_bytes(params: dict, meta: dict | None = None) -> bytes:
    names = sorted(params)
    meta_b = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(names)))
    offset = 0
    arrays = []
    for name in names:
        a = np.ascontiguousarray(params[name], dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"tensor {name!r} has non-finite values")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(struct.pack("<Q", offset))
        offset += a.nbytes
        arrays.append(a)
    for a in arrays:
        buf.write(a.tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> tuple[dict, dict]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ValueError("not an RPM1 checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(buf.read(meta_len).decode("utf-8"))
    (n,) = struct.unpack("<I", buf.read(4))
    entries = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", buf.read(2))
        name = buf.read(ln).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        (offset,) = struct.unpack("<Q", buf.read(8))
        entries.append((name, shape, offset))
    base = buf.tell()
    params = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        start = base + offset
        if start + 4 * count > len(data):
            raise ValueError(f"truncated checkpoint: tensor {name!r}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return params, meta


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
