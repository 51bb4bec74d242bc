"""Binary tensor files.

Layout (little endian)::

    b"BTSR"  u32 version=1  u32 rank  u64 dims[rank]  f32 payload[prod(dims)]
"""

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"BTSR"
VERSION = 1


def dumps(array):
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def loads(data, *, rank=None):
    buf = io.BytesIO(bytes(data))
    if buf.read(4) != MAGIC:
        raise FormatError("missing BTSR magic")
    fixed = buf.read(8)
    if len(fixed) != 8:
        raise FormatError("truncated BTSR header")
    version, ndim = struct.unpack("<II", fixed)
    if version != VERSION:
        raise FormatError(f"unsupported BTSR version {version}")
    dims_raw = buf.read(8 * ndim)
    if len(dims_raw) != 8 * ndim:
        raise FormatError("truncated BTSR dims")
    dims = struct.unpack(f"<{ndim}Q", dims_raw)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = buf.read()
    if len(payload) != 4 * count:
        raise FormatError(f"payload has {len(payload)} bytes, expected {4 * count}")
    if rank is not None and ndim != rank:
        raise FormatError(f"expected rank {rank}, file has rank {ndim}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def save(path, array):
    Path(path).write_bytes(dumps(array))


def load(path, *, rank=None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return loads(data, rank=rank)
