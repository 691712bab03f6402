"""Binary tensor container used for every persisted artifact.

Layout (little-endian):
    magic  b"MRFT"
    version u8
    dtype   u8      (see DTYPE_CODES)
    ndim    u8
    dims    ndim * u64
    hlen    u32     (length of the UTF-8 header JSON)
    header  hlen bytes of JSON
    payload row-major array data
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRFT"
VERSION = 1

DTYPE_CODES = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.complex64): 3,
    np.dtype(np.complex128): 4,
    np.dtype(np.int64): 5,
    np.dtype(np.uint8): 6,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class TensorFileError(ValueError):
    pass


def hash_array(array):
    """Short content hash of an array (dtype, shape, payload)."""
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()[:16]


def hash_config(obj):
    """Short hash of any JSON-serializable configuration object."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def write_tensor(path, array, header=None):
    """Write `array` with an optional JSON-serializable `header` dict."""
    array = np.ascontiguousarray(array)
    dt = np.dtype(array.dtype)
    if dt not in DTYPE_CODES:
        raise TensorFileError(f"unsupported dtype {dt}")
    hdr = json.dumps(header or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBB", VERSION, DTYPE_CODES[dt], array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        if dt.byteorder == ">":  # pragma: no cover - numpy defaults are LE here
            array = array.astype(dt.newbyteorder("<"))
        f.write(array.tobytes())


def read_tensor(path, expect_header=None):
    """Read a tensor file, returning (array, header).

    When `expect_header` maps keys to values, each present key is verified
    against the stored header (used for hash chaining between artifacts).
    """
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise TensorFileError(f"{path}: bad magic")
        version, code, ndim = struct.unpack("<BBB", f.read(3))
        if version != VERSION:
            raise TensorFileError(f"{path}: unsupported version {version}")
        if code not in CODE_DTYPES:
            raise TensorFileError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode()) if hlen else {}
        dt = CODE_DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        payload = f.read(count * dt.itemsize)
    if len(payload) != count * dt.itemsize:
        raise TensorFileError(f"{path}: truncated payload")
    array = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    if expect_header:
        for key, want in expect_header.items():
            got = header.get(key)
            if got != want:
                raise TensorFileError(
                    f"{path}: header mismatch for {key!r}: have {got!r}, expected {want!r}"
                )
    return array, header
