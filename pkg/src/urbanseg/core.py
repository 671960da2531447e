"""Point cloud container, class schemas and label remapping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

TARGET_CLASSES = ("Background", "Building", "Vegetation", "Road", "Water")

SENSATURBAN_CLASSES = (
    "Ground",
    "Vegetation",
    "Building",
    "Wall",
    "Bridge",
    "Parking",
    "Rail",
    "Traffic Road",
    "Street Furniture",
    "Car",
    "Footpath",
    "Bike",
    "Water",
)

TORONTO3D_CLASSES = (
    "Unclassified",
    "Ground",
    "Road Markings",
    "Natural",
    "Building",
    "Utility Line",
    "Pole",
    "Car",
    "Fence",
)

# pre-training stand-in used by the synthetic source scenes
SYNTH_SOURCE_CLASSES = ("Ground", "Vegetation", "Building", "Wall", "Road", "Car", "Pole", "Water")


@dataclass(frozen=True)
class ClassSchema:
    name: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if not names:
            raise ValidationError(f"schema {self.name!r} has no classes")
        if any(not n for n in names):
            raise ValidationError(f"schema {self.name!r} has an empty class name")
        if len(set(names)) != len(names):
            raise ValidationError(f"schema {self.name!r} has duplicate class names")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def index(self, class_name: str) -> int:
        try:
            return self.class_names.index(class_name)
        except ValueError:
            raise ValidationError(f"class {class_name!r} not in schema {self.name!r}") from None

    def to_json(self) -> dict:
        return {"name": self.name, "class_names": list(self.class_names)}


TARGET_SCHEMA = ClassSchema("urban5", TARGET_CLASSES)
SENSATURBAN_SCHEMA = ClassSchema("sensaturban", SENSATURBAN_CLASSES)
TORONTO3D_SCHEMA = ClassSchema("toronto3d", TORONTO3D_CLASSES)
SYNTH_SOURCE_SCHEMA = ClassSchema("synth_source", SYNTH_SOURCE_CLASSES)

_SCHEMAS: dict[str, ClassSchema] = {
    s.name: s for s in (TARGET_SCHEMA, SENSATURBAN_SCHEMA, TORONTO3D_SCHEMA, SYNTH_SOURCE_SCHEMA)
}


def register_schema(schema: ClassSchema) -> None:
    existing = _SCHEMAS.get(schema.name)
    if existing is not None and existing != schema:
        raise ValidationError(f"schema {schema.name!r} already registered with different classes")
    _SCHEMAS[schema.name] = schema


def get_schema(name: str) -> ClassSchema:
    try:
        return _SCHEMAS[name]
    except KeyError:
        raise ValidationError(f"unknown schema {name!r}") from None


def load_schema(path) -> ClassSchema:
    """Load ``{"name": ..., "class_names": [...]}`` and register it."""
    data = _read_json(path)
    try:
        schema = ClassSchema(data["name"], tuple(data["class_names"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad schema file {path}: {exc}") from None
    register_schema(schema)
    return schema


@dataclass(frozen=True)
class PointCloud:
    """N points with optional 8-bit colors and integer class labels.

    Arrays are normalised on construction (positions to float64 (N, 3), colors
    to uint8 (N, 3), labels to int64 (N,)) but invariants are not enforced
    here; use :func:`validate_cloud`.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    schema_name: str = TARGET_SCHEMA.name

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.size == 0:
            pos = pos.reshape(0, 3)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must be (N, 3), got {pos.shape}")
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.size == 0:
                col = col.reshape(0, 3)
            if col.ndim != 2 or col.shape[1] != 3:
                raise ValidationError(f"colors must be (N, 3), got {col.shape}")
            object.__setattr__(self, "colors", col.astype(np.uint8, copy=False))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.ndim != 1:
                raise ValidationError(f"labels must be 1-D, got {lab.shape}")
            object.__setattr__(self, "labels", lab.astype(np.int64, copy=False))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def take(self, indices) -> PointCloud:
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.colors is None else self.colors[idx],
            None if self.labels is None else self.labels[idx],
            self.schema_name,
        )

    def with_labels(self, labels, schema_name: str | None = None) -> PointCloud:
        return replace(self, labels=labels, schema_name=schema_name or self.schema_name)

    def equals(self, other: PointCloud) -> bool:
        """Exact equality of every array and the schema name."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.schema_name == other.schema_name
            and self.positions.shape == other.positions.shape
            and np.array_equal(self.positions, other.positions)
            and same(self.colors, other.colors)
            and same(self.labels, other.labels)
        )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_cloud(cloud: PointCloud, schema: ClassSchema) -> ValidationReport:
    report = ValidationReport()
    n = len(cloud)
    if not np.all(np.isfinite(cloud.positions)):
        report.violations.append("non-finite coordinate")
    if cloud.colors is not None and cloud.colors.shape[0] != n:
        report.violations.append(f"colors length {cloud.colors.shape[0]} != {n}")
    if cloud.labels is not None:
        if cloud.labels.shape[0] != n:
            report.violations.append(f"labels length {cloud.labels.shape[0]} != {n}")
        if cloud.labels.size and (
            cloud.labels.min() < 0 or cloud.labels.max() >= schema.num_classes
        ):
            report.violations.append("label out of range")
    if cloud.schema_name != schema.name:
        report.violations.append(f"schema name {cloud.schema_name!r} != {schema.name!r}")
    return report


@dataclass(frozen=True)
class ClassMap:
    source_schema: str
    target_schema: str
    mapping: tuple[int, ...]  # mapping[source_id] = target_id

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(m) for m in self.mapping))
        src, dst = get_schema(self.source_schema), get_schema(self.target_schema)
        if len(self.mapping) != src.num_classes:
            raise ValidationError(
                f"map covers {len(self.mapping)} source classes, schema has {src.num_classes}"
            )
        if any(not 0 <= m < dst.num_classes for m in self.mapping):
            raise ValidationError("map image outside target class range")

    @classmethod
    def from_names(cls, source: str, target: str, mapping: Mapping[str, str]) -> ClassMap:
        src, dst = get_schema(source), get_schema(target)
        unknown = [k for k in mapping if k not in src.class_names]
        if unknown:
            raise ValidationError(f"unknown source classes {unknown} for schema {source!r}")
        missing = [k for k in src.class_names if k not in mapping]
        if missing:
            raise ValidationError(f"map is not total, missing {missing}")
        return cls(source, target, tuple(dst.index(mapping[k]) for k in src.class_names))

    @classmethod
    def identity(cls, schema: str) -> ClassMap:
        return cls(schema, schema, tuple(range(get_schema(schema).num_classes)))

    def to_json(self) -> dict:
        src, dst = get_schema(self.source_schema), get_schema(self.target_schema)
        return {
            "source": self.source_schema,
            "target": self.target_schema,
            "mapping": {src.class_names[i]: dst.class_names[t] for i, t in enumerate(self.mapping)},
        }


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None


def load_class_map(path) -> ClassMap:
    data = _read_json(path)
    try:
        return ClassMap.from_names(data["source"], data["target"], data["mapping"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad class map file {path}: {exc}") from None


SENSATURBAN_TO_TARGET = ClassMap.from_names(
    "sensaturban",
    "urban5",
    {
        "Ground": "Background",
        "Vegetation": "Vegetation",
        "Building": "Building",
        "Wall": "Building",
        "Bridge": "Road",
        "Parking": "Road",
        "Rail": "Road",
        "Traffic Road": "Road",
        "Street Furniture": "Background",
        "Car": "Background",
        "Footpath": "Road",
        "Bike": "Background",
        "Water": "Water",
    },
)

TORONTO3D_TO_TARGET = ClassMap.from_names(
    "toronto3d",
    "urban5",
    {
        "Unclassified": "Background",
        "Ground": "Road",
        "Road Markings": "Road",
        "Natural": "Vegetation",
        "Building": "Building",
        "Utility Line": "Background",
        "Pole": "Background",
        "Car": "Background",
        "Fence": "Background",
    },
)

SYNTH_SOURCE_TO_TARGET = ClassMap.from_names(
    "synth_source",
    "urban5",
    {
        "Ground": "Background",
        "Vegetation": "Vegetation",
        "Building": "Building",
        "Wall": "Building",
        "Road": "Road",
        "Car": "Background",
        "Pole": "Background",
        "Water": "Water",
    },
)

DEFAULT_MAPS = {
    "sensaturban": SENSATURBAN_TO_TARGET,
    "toronto3d": TORONTO3D_TO_TARGET,
    "synth_source": SYNTH_SOURCE_TO_TARGET,
}


def remap_labels(cloud: PointCloud, class_map: ClassMap) -> PointCloud:
    if cloud.schema_name != class_map.source_schema:
        raise ValidationError(
            f"cloud schema {cloud.schema_name!r} does not match map source {class_map.source_schema!r}"
        )
    if cloud.labels is None:
        raise ValidationError("cloud has no labels to remap")
    table = np.asarray(class_map.mapping, dtype=np.int64)
    if cloud.labels.size and (cloud.labels.min() < 0 or cloud.labels.max() >= table.size):
        raise ValidationError("label out of range for the map's source schema")
    return cloud.with_labels(table[cloud.labels], class_map.target_schema)


def class_histogram(cloud: PointCloud, num_classes: int | None = None) -> dict[int, int]:
    """Point count per class id, zero-filled over the schema's classes."""
    if cloud.labels is None:
        raise ValidationError("cloud has no labels")
    if num_classes is None:
        num_classes = get_schema(cloud.schema_name).num_classes
    counts = np.bincount(cloud.labels, minlength=num_classes)
    return {i: int(c) for i, c in enumerate(counts)}


def named_histogram(cloud: PointCloud, schema: ClassSchema) -> dict[str, int]:
    hist = class_histogram(cloud, schema.num_classes)
    return {schema.class_names[i]: c for i, c in hist.items()}


def schema_names() -> Sequence[str]:
    return tuple(_SCHEMAS)
