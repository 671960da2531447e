"""PLY reading and writing (ascii and binary_little_endian)."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import TARGET_SCHEMA, PointCloud
from .errors import FormatError, ValidationError

DEFAULT_LABEL_PROPERTIES = ("class", "label", "scalar_Label")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}  # fmt: skip


@dataclass
class PlyElement:
    name: str
    count: int
    properties: list[tuple[str, str]]  # (name, ply type); list props stored as "list:<count>:<item>"


@dataclass
class PlyHeader:
    format: str
    vertex_count: int
    properties: list[tuple[str, str]]
    elements: list[PlyElement]
    comments: list[str]
    header_size: int


def parse_header(data: bytes) -> PlyHeader:
    if not data.startswith(b"ply"):
        raise FormatError("missing 'ply' magic")
    end = data.find(b"end_header")
    if end < 0:
        raise FormatError("header has no end_header")
    nl = data.find(b"\n", end)
    header_size = len(data) if nl < 0 else nl + 1
    try:
        lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise FormatError("header is not ASCII") from None

    fmt = None
    elements: list[PlyElement] = []
    comments: list[str] = []
    for raw in lines[1:]:
        parts = raw.strip().split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3:
                raise FormatError(f"bad format line {raw!r}")
            fmt = parts[1]
            if fmt == "binary_big_endian":
                raise FormatError("binary_big_endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise FormatError(f"unknown PLY format {fmt!r}")
        elif key in ("comment", "obj_info"):
            comments.append(raw.strip()[len(key) + 1 :])
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(f"bad element line {raw!r}")
            elements.append(PlyElement(parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise FormatError("property before any element")
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise FormatError(f"bad list property {raw!r}")
                elements[-1].properties.append((parts[4], f"list:{parts[2]}:{parts[3]}"))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1].properties.append((parts[2], parts[1]))
            else:
                raise FormatError(f"bad property line {raw!r}")
        else:
            raise FormatError(f"unknown header keyword {key!r}")
    if fmt is None:
        raise FormatError("header has no format line")
    vertex = [e for e in elements if e.name == "vertex"]
    if len(vertex) != 1:
        raise FormatError("header must declare exactly one vertex element")
    names = [p[0] for p in vertex[0].properties]
    if len(set(names)) != len(names):
        raise FormatError("duplicate vertex property names")
    return PlyHeader(fmt, vertex[0].count, vertex[0].properties, elements, comments, header_size)


def _vertex_dtype(props) -> np.dtype:
    if any(t.startswith("list:") for _, t in props):
        raise FormatError("list properties on the vertex element are not supported")
    return np.dtype([(name, "<" + _PLY_TYPES[t]) for name, t in props])


def _read_body_binary(header: PlyHeader, body: bytes) -> np.ndarray:
    offset = 0
    for el in header.elements:
        if el.name == "vertex":
            dt = _vertex_dtype(el.properties)
            need = dt.itemsize * el.count
            if len(body) - offset < need:
                raise FormatError(
                    f"truncated body: need {need} vertex bytes, have {len(body) - offset}"
                )
            return np.frombuffer(body, dtype=dt, count=el.count, offset=offset)
        if any(t.startswith("list:") for _, t in el.properties):
            raise FormatError(f"cannot skip list element {el.name!r} preceding vertices")
        offset += _vertex_dtype(el.properties).itemsize * el.count
    raise FormatError("no vertex element")  # unreachable after parse_header


def _read_body_ascii(header: PlyHeader, body: bytes) -> np.ndarray:
    lines = body.decode("ascii", errors="replace").splitlines()
    row = 0
    for el in header.elements:
        if el.name == "vertex":
            break
        row += el.count
    dt = _vertex_dtype(header.properties)
    rows = [ln for ln in lines[row : row + header.vertex_count]]
    if len(rows) < header.vertex_count:
        raise FormatError(f"truncated body: {len(rows)} of {header.vertex_count} vertices")
    out = np.zeros(header.vertex_count, dtype=dt)
    nprop = len(header.properties)
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) < nprop:
            raise FormatError(f"vertex {i} has {len(vals)} values, expected {nprop}")
        try:
            out[i] = tuple(
                float(v) if dt[j].kind == "f" else int(v) for j, v in enumerate(vals[:nprop])
            )
        except (ValueError, OverflowError):
            raise FormatError(f"vertex {i}: unparsable value in {ln!r}") from None
    return out


def read_ply(source, label_properties=DEFAULT_LABEL_PROPERTIES, schema_name=None) -> PointCloud:
    """Read a PLY from a path or a bytes object.

    Positions come from x/y/z, colors from red/green/blue and labels from the
    first property in ``label_properties`` that exists. The schema name is
    taken from a ``comment schema <name>`` header line unless given.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    else:
        data = Path(source).read_bytes()
    header = parse_header(data)
    body = data[header.header_size :]
    if header.format == "ascii":
        verts = _read_body_ascii(header, body)
    else:
        verts = _read_body_binary(header, body)

    names = verts.dtype.names or ()
    for axis in "xyz":
        if axis not in names:
            raise FormatError(f"vertex element lacks {axis!r}")
    positions = np.stack([verts[a].astype(np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([verts[c] for c in ("red", "green", "blue")], axis=1).astype(np.uint8)
    labels = None
    for lp in label_properties:
        if lp in names:
            labels = verts[lp].astype(np.int64)
            break
    if schema_name is None:
        schema_name = TARGET_SCHEMA.name
        for c in header.comments:
            parts = c.split()
            if len(parts) == 2 and parts[0] == "schema":
                schema_name = parts[1]
    return PointCloud(positions, colors, labels, schema_name)


def write_ply(cloud: PointCloud, binary: bool = True, label_property: str = "class") -> bytes:
    n = len(cloud)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    ply_types = ["double"] * 3
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        ply_types += ["uchar"] * 3
    if cloud.labels is not None:
        if cloud.labels.size and (cloud.labels.min() < 0 or cloud.labels.max() > 255):
            raise ValidationError("labels must fit in 8 bits for PLY output")
        fields.append((label_property, "u1"))
        ply_types.append("uchar")
    verts = np.empty(n, dtype=np.dtype(fields))
    for i, a in enumerate("xyz"):
        verts[a] = cloud.positions[:, i]
    if cloud.colors is not None:
        for i, c in enumerate(("red", "green", "blue")):
            verts[c] = cloud.colors[:, i]
    if cloud.labels is not None:
        verts[label_property] = cloud.labels

    head = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"comment schema {cloud.schema_name}",
        f"element vertex {n}",
    ]
    head += [f"property {t} {name}" for (name, _), t in zip(fields, ply_types)]
    head.append("end_header")
    out = io.BytesIO()
    out.write(("\n".join(head) + "\n").encode("ascii"))
    if binary:
        out.write(verts.tobytes())
    else:
        for rec in verts:
            vals = [
                repr(float(v)) if verts.dtype[j].kind == "f" else str(int(v))
                for j, v in enumerate(rec)
            ]
            out.write((" ".join(vals) + "\n").encode("ascii"))
    return out.getvalue()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_ply(cloud: PointCloud, path, binary: bool = True, label_property: str = "class") -> None:
    atomic_write_bytes(path, write_ply(cloud, binary=binary, label_property=label_property))
