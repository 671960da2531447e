"""PCSK checkpoints and transfer-learning initialisation.

File layout::

    b"PCSK" | version:u32 | meta_len:u32 | metadata (UTF-8 JSON) | array table

The array table is the same record format PCB1 uses (see :mod:`urbanseg.bundle`).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .bundle import _Reader, decode_array_table, encode_array_table
from .core import ClassSchema, get_schema, register_schema
from .errors import FormatError, ValidationError
from .network import (
    HEAD_PREFIX,
    LayerConfig,
    ModelParams,
    is_head,
    uniform_fan_in,
)
from .ply import atomic_write_bytes

MAGIC = b"PCSK"
VERSION = 1


def encode_checkpoint(params: ModelParams) -> bytes:
    params.check()
    meta = json.dumps(params.metadata(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (
        MAGIC
        + struct.pack("<II", VERSION, len(meta))
        + meta
        + encode_array_table(params.tensors)
    )


def decode_checkpoint(data: bytes) -> ModelParams:
    if data[:4] != MAGIC:
        raise FormatError("bad magic: not a PCSK checkpoint")
    reader = _Reader(data, 4)
    version, meta_len = reader.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported PCSK version {version}")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint metadata") from None
    tensors = decode_array_table(reader)
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes after checkpoint")
    try:
        config = LayerConfig.from_json(meta["config"])
        schema = ClassSchema(meta["schema"]["name"], tuple(meta["schema"]["class_names"]))
        provenance = meta.get("provenance", {})
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata incomplete: {exc}") from None
    register_schema(schema)
    params = ModelParams(config, schema, tensors, provenance)
    head = tensors.get(HEAD_PREFIX + "w")
    if head is None or head.shape[0] != schema.num_classes:
        raise ValidationError(
            f"head rows {None if head is None else head.shape[0]} != "
            f"metadata class count {schema.num_classes}"
        )
    params.check()
    return params


def save_checkpoint(params: ModelParams, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())


def correspondence_from_names(mapping: dict[str, str], target: ClassSchema, source: ClassSchema):
    """``{target_name: source_name}`` -> ``{target_id: source_id}``."""
    return {target.index(t): source.index(s) for t, s in mapping.items()}


def load_correspondence(path, target: ClassSchema, source: ClassSchema) -> dict[int, int]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected an object of target -> source class names")
    return correspondence_from_names(data, target, source)


def init_from_source(
    source: ModelParams,
    target_schema: ClassSchema | str,
    correspondence: dict[int, int] | None = None,
    seed: int = 0,
    config: LayerConfig | None = None,
) -> ModelParams:
    """Copy the backbone of ``source`` and rebuild the classifier for a new schema.

    Rows of mapped target classes are copied from the source classifier;
    every other row is drawn uniformly in +-sqrt(6 / fan_in) with a zero bias.
    """
    if isinstance(target_schema, str):
        target_schema = get_schema(target_schema)
    source.check()
    want = source.config.with_classes(target_schema.num_classes)
    if config is not None and config.with_classes(target_schema.num_classes) != want:
        raise ValidationError("target backbone configuration differs from the source checkpoint")
    correspondence = dict(correspondence or {})
    for t, s in correspondence.items():
        if not 0 <= t < target_schema.num_classes:
            raise ValidationError(f"target class id {t} out of range")
        if not 0 <= s < source.schema.num_classes:
            raise ValidationError(f"source class id {s} out of range")

    tensors = {}
    for name, arr in source.tensors.items():
        if not is_head(name):
            tensors[name] = arr.copy()
    src_w = source.tensors[HEAD_PREFIX + "w"]
    src_b = source.tensors[HEAD_PREFIX + "b"]
    rng = np.random.default_rng(seed)
    w = uniform_fan_in(rng, (target_schema.num_classes, src_w.shape[1]), src_w.dtype)
    b = np.zeros(target_schema.num_classes, dtype=src_b.dtype)
    for t, s in sorted(correspondence.items()):
        w[t] = src_w[s]
        b[t] = src_b[s]
    tensors[HEAD_PREFIX + "w"] = w
    tensors[HEAD_PREFIX + "b"] = b
    provenance = {
        "transferred_from": source.schema.name,
        "source_provenance": source.provenance,
        "correspondence": {str(k): v for k, v in sorted(correspondence.items())},
        "head_seed": seed,
    }
    out = ModelParams(want, target_schema, tensors, provenance)
    out.check()
    return out
