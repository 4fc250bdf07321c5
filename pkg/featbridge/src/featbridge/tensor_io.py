"""Tensor file serialization and atomic file writes.

The engine consumes tensors in a small binary format; this module implements
that byte layout from its documentation so the bridge has no code dependency
on the engine package. Layout, all little-endian:

    bytes 0..7    magic "UVADTNSR"
    bytes 8..11   version, u32, = 1
    bytes 12..15  dtype code, u32, 0 = float32, 1 = uint8
    bytes 16..19  ndim, u32, 1..4
    then          ndim u64 dims, each >= 1
    then          payload, row-major

Every write in the bridge goes through the atomic helpers: content lands in
a temp file in the destination directory and is renamed into place, so a
crashed or killed job never leaves a half-written tensor or manifest behind.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"UVADTNSR"
VERSION = 1
DTYPE_CODES = {"float32": 0, "uint8": 1}
CODE_DTYPES = {0: np.float32, 1: np.uint8}


class TensorIOError(ValueError):
    """Malformed tensor bytes or an array the format cannot represent."""


def tensor_bytes(array):
    """Serialize an array to the engine's tensor byte layout."""
    arr = np.ascontiguousarray(array)
    if arr.dtype.name not in DTYPE_CODES:
        raise TensorIOError(
            f"unsupported dtype {arr.dtype.name}; expected float32 or uint8")
    if not 1 <= arr.ndim <= 4:
        raise TensorIOError(f"ndim must be 1..4, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorIOError(f"all dims must be >= 1, got {arr.shape}")
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_CODES[arr.dtype.name],
                                 arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if arr.dtype == np.float32:
        payload = arr.astype("<f4", copy=False).tobytes()
    else:
        payload = arr.tobytes()
    return header + payload


def parse_tensor(data):
    """Parse tensor bytes back to an array; inverse of tensor_bytes."""
    if len(data) < 20:
        raise TensorIOError("truncated header")
    if data[:8] != MAGIC:
        raise TensorIOError(f"bad magic {data[:8]!r}")
    version, code, ndim = struct.unpack_from("<III", data, 8)
    if version != VERSION:
        raise TensorIOError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise TensorIOError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise TensorIOError(f"ndim must be 1..4, got {ndim}")
    if len(data) < 20 + 8 * ndim:
        raise TensorIOError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", data, 20)
    if any(d < 1 for d in dims):
        raise TensorIOError(f"all dims must be >= 1, got {dims}")
    dtype = np.dtype(CODE_DTYPES[code]).newbyteorder("<")
    offset = 20 + 8 * ndim
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) - offset != expected:
        raise TensorIOError(
            f"payload size {len(data) - offset} != expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)
    return np.ascontiguousarray(arr.astype(CODE_DTYPES[code], copy=False))


def read_tensor(path):
    return parse_tensor(Path(path).read_bytes())


def read_tensor_header(path):
    """Return (dtype_name, dims) from a tensor file without loading payload."""
    with open(path, "rb") as f:
        head = f.read(20)
        if len(head) < 20 or head[:8] != MAGIC:
            raise TensorIOError(f"{path}: not a tensor file")
        version, code, ndim = struct.unpack_from("<III", head, 8)
        if version != VERSION or code not in CODE_DTYPES or not 1 <= ndim <= 4:
            raise TensorIOError(f"{path}: bad header")
        raw = f.read(8 * ndim)
        if len(raw) < 8 * ndim:
            raise TensorIOError(f"{path}: truncated dims")
        dims = struct.unpack(f"<{ndim}Q", raw)
    return np.dtype(CODE_DTYPES[code]).name, dims


def atomic_write_bytes(data, path):
    """Write bytes to `path` via a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_tensor(array, path):
    atomic_write_bytes(tensor_bytes(array), path)


def atomic_write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(text.encode("utf-8"), path)
