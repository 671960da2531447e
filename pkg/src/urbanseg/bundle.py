"""PCB1: a small self-describing container of named little-endian arrays.

Layout::

    b"PCB1" | version:u32 | count:u32 | count x array
    array = name_len:u16 | name:utf8 | dtype:u8 | rank:u8 | dims:u64*rank | payload

All integers are little-endian; payloads are C-ordered.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .ply import atomic_write_bytes

MAGIC = b"PCB1"
VERSION = 1

DTYPE_CODES = {
    np.dtype("u1"): 1,
    np.dtype("i1"): 2,
    np.dtype("<u2"): 3,
    np.dtype("<i2"): 4,
    np.dtype("<u4"): 5,
    np.dtype("<i4"): 6,
    np.dtype("<u8"): 7,
    np.dtype("<i8"): 8,
    np.dtype("<f4"): 9,
    np.dtype("<f8"): 10,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode_array_table(arrays: dict[str, np.ndarray]) -> bytes:
    """Encode the array table (count + records) shared by PCB1 and PCSK."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise ValidationError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"array name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated data at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_array_table(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = reader.unpack("<H")
        try:
            name = reader.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("array name is not UTF-8") from None
        code, rank = reader.unpack("<BB")
        if code not in CODE_DTYPES:
            raise FormatError(f"array {name!r}: unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}Q")
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.uint64)) * dt.itemsize
        payload = reader.take(nbytes)
        if name in arrays:
            raise FormatError(f"duplicate array name {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    return arrays


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    return MAGIC + struct.pack("<I", VERSION) + encode_array_table(arrays)


def decode_arrays(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError("bad magic: not a PCB1 bundle")
    reader = _Reader(data, 4)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported PCB1 version {version}")
    arrays = decode_array_table(reader)
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes after bundle")
    return arrays


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_arrays(arrays))


def read_arrays(path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())


def write_array_bundle(graph, features, path) -> None:
    """Store a neighbor graph next to a per-point feature matrix."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != graph.indices.shape[0]:
        raise ValidationError(
            f"feature rows {features.shape[:1]} != graph rows {graph.indices.shape[0]}"
        )
    write_arrays(
        path,
        {"graph.indices": graph.indices, "graph.distances": graph.distances, "features": features},
    )


def read_array_bundle(path):
    from .spatial import NeighborGraph

    arrays = read_arrays(path)
    try:
        graph = NeighborGraph(arrays["graph.indices"], arrays["graph.distances"])
        return graph, arrays["features"]
    except KeyError as exc:
        raise FormatError(f"bundle lacks array {exc}") from None
