"""Binary frame files.

Layout, all little-endian::

    offset  size  field
    0       4     magic b"TMAF"
    4       2     format version (uint16, currently 1)
    6       2     reserved, zero
    8       4     K, subcarriers per frame (uint32)
    12      4     H, number of frames (uint32)
    16      16*H*K  frames, row-major (frame h, subcarrier k), each value a
                    float64 real part followed by a float64 imaginary part
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TMAF"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_DTYPE = np.dtype("<c16")


def write_frames(path, y) -> None:
    y = np.asarray(y, dtype=complex)
    if y.ndim != 2:
        raise ValueError("expected an H x K array of frames")
    H, K = y.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, K, H))
        fh.write(y.astype(_DTYPE).tobytes())


def read_frames(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("truncated frame file header")
    magic, version, _, K, H = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported frame file version {version}")
    body = data[_HEADER.size :]
    if len(body) != H * K * _DTYPE.itemsize:
        raise ValueError(f"frame body has {len(body)} bytes, expected {H * K * _DTYPE.itemsize}")
    return np.frombuffer(body, dtype=_DTYPE).astype(complex).reshape(H, K)
