"""Binary tensor container used by datasets and checkpoints.

Layout: magic ``STVD``, u8 version, u8 dtype code (0=f32, 1=u8, 2=f64),
u8 ndim, little-endian u32 extents, then the row-major payload.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"STVD"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.uint8): 1,
    np.dtype(np.float64): 2,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def write_tensor(path, array):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for {path}")
    header = MAGIC + struct.pack(
        "<BBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim
    )
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise FormatError(f"bad magic in {path}")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} in {path}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} in {path}")
    offset = 7 + 4 * ndim
    if len(blob) < offset:
        raise FormatError(f"truncated header in {path}")
    shape = struct.unpack(f"<{ndim}I", blob[7:offset])
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"truncated payload in {path}: expected {expected} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
