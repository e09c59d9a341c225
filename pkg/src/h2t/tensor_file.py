"""Named float32 tensor container (.h2tt), used for attention weights and
one-hot pattern-map exports.

Layout, little-endian: magic b"H2TT", version uint32, tensor count uint32,
then per tensor { name: uint16 length + utf8 bytes, ndim uint8,
dims: ndim x uint32, data: float32 }.
"""

import struct
from collections import OrderedDict

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"H2TT"
TENSOR_VERSION = 1


def write_tensors(path, tensors):
    """Write an ordered mapping of name -> array as float32."""
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, len(tensors)))
        for name, tensor in tensors.items():
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_tensors(path):
    """Read a .h2tt container, returning an ordered name -> float32 array map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if len(view) < 12:
        raise DataError(f"{path}: truncated tensor container")
    if bytes(view[:4]) != TENSOR_MAGIC:
        raise DataError(f"{path}: bad magic {bytes(view[:4])!r}")
    version, count = struct.unpack_from("<II", view, 4)
    if version != TENSOR_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    offset = 12
    out = OrderedDict()
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", view, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", view, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            nbytes = size * 4
            if offset + nbytes > len(view):
                raise DataError(f"{path}: truncated tensor data for {name!r}")
            data = np.frombuffer(view, dtype="<f4", count=size, offset=offset)
            offset += nbytes
            out[name] = data.reshape(shape).copy()
        except struct.error as exc:
            raise DataError(f"{path}: truncated tensor table: {exc}") from exc
    if offset != len(view):
        raise DataError(f"{path}: {len(view) - offset} trailing bytes")
    return out
