"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic     4 bytes  b"CVOS"
    version   uint32   (currently 1)
    count     uint32   number of tensor records
    record*   count times:
        name_len  uint32
        name      name_len bytes, UTF-8
        rank      uint32
        extents   rank x uint64
        data      prod(extents) x float64, row-major

Values are always stored as float64 regardless of the compute dtype.
"""

import struct

import numpy as np

from .errors import ConfigurationError

MAGIC = b"CVOS"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write a ``{name: array-like}`` mapping; record order follows the mapping."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(getattr(value, "data", value), dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ConfigurationError(f"truncated checkpoint {path}")
    return buf


def load_checkpoint(path):
    """Read a checkpoint into an ordered ``{name: float64 ndarray}`` dict."""
    out = {}
    with open(path, "rb") as fh:
        if _read(fh, 4, path) != MAGIC:
            raise ConfigurationError(f"{path} is not a CVOS checkpoint")
        version, count = struct.unpack("<II", _read(fh, 8, path))
        if version != VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version} in {path}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(fh, 4, path))
            name = _read(fh, nlen, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4, path))
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank, path)) if rank else ()
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read(fh, 8 * n, path), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out
