"""Seeded synthetic urban scenes with exact labels.

A scene is a flat square of ground crossed by road strips, with box-shell
buildings, ellipsoidal tree canopies, an optional sunken water patch and, for
pre-training scenes, cars and poles.  Every point is sampled from one
primitive surface, so its label is known exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import SYNTH_SOURCE_SCHEMA, TARGET_SCHEMA, PointCloud
from .errors import FormatError, ValidationError

KINDS = ("ground", "roof", "wall", "canopy", "road", "water", "car", "pole")

TARGET_LABELS = {
    "ground": 0, "roof": 1, "wall": 1, "canopy": 2, "road": 3, "water": 4, "car": 0, "pole": 0,
}  # fmt: skip
SOURCE_LABELS = {
    "ground": 0, "canopy": 1, "roof": 2, "wall": 3, "road": 4, "car": 5, "pole": 6, "water": 7,
}  # fmt: skip

DEFAULT_COLORS = {
    "ground": (140, 120, 90),
    "roof": (190, 75, 65),
    "wall": (205, 115, 95),
    "canopy": (55, 135, 50),
    "road": (85, 85, 90),
    "water": (35, 75, 160),
    "car": (210, 200, 40),
    "pole": (150, 150, 155),
}

DEFAULT_DENSITIES = {
    "ground": 1.0, "roof": 1.0, "wall": 1.0, "canopy": 1.5,
    "road": 1.0, "water": 1.0, "car": 3.0, "pole": 6.0,
}  # fmt: skip

WATER_DEPTH = 0.6


@dataclass
class SceneSpec:
    extent: float = 64.0
    densities: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_DENSITIES))
    building_count: int = 4
    building_footprint: tuple[float, float] = (6.0, 14.0)
    building_height: tuple[float, float] = (4.0, 15.0)
    tree_count: int = 8
    tree_radius: tuple[float, float] = (1.5, 3.5)
    road_width: float = 6.0
    road_count: int = 2
    water: bool = True
    water_size: tuple[float, float] = (16.0, 10.0)
    car_count: int = 0
    pole_count: int = 0
    colors: dict[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_COLORS))
    color_noise: float = 12.0
    position_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not self.extent > 0:
            raise ValidationError("scene extent must be positive")
        self.densities = {**DEFAULT_DENSITIES, **self.densities}
        self.colors = {**DEFAULT_COLORS, **{k: tuple(v) for k, v in self.colors.items()}}
        unknown = (set(self.densities) | set(self.colors)) - set(KINDS)
        if unknown:
            raise ValidationError(f"unknown surface kinds {sorted(unknown)}")
        if any(not d > 0 for d in self.densities.values()):
            raise ValidationError("densities must be positive")
        for name in ("building_footprint", "building_height", "tree_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must be a positive (min, max) range")
        if min(self.water_size) <= 0:
            raise ValidationError("water_size must be positive")
        if self.road_width <= 0 or self.color_noise < 0 or self.position_noise < 0:
            raise ValidationError("road width must be positive and noise levels non-negative")

    def density(self, kind: str) -> float:
        return float(self.densities[kind])

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["colors"] = {k: list(v) for k, v in self.colors.items()}
        return d

    @classmethod
    def from_json(cls, data: dict) -> SceneSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown SceneSpec keys {sorted(unknown)}")
        data = dict(data)
        for k in ("building_footprint", "building_height", "tree_radius", "water_size"):
            if k in data:
                data[k] = tuple(data[k])
        return cls(**data)

    @classmethod
    def source_default(cls, seed: int = 0) -> SceneSpec:
        return cls(car_count=6, pole_count=8, seed=seed)


def load_scene_spec(path) -> SceneSpec:
    try:
        return SceneSpec.from_json(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None


Rect = tuple[float, float, float, float]  # x0, y0, x1, y1


def _overlaps(a: Rect, b: Rect, margin: float = 0.0) -> bool:
    return not (
        a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]
    )


def _in_rects(xy: np.ndarray, rects) -> np.ndarray:
    inside = np.zeros(len(xy), dtype=bool)
    for x0, y0, x1, y1 in rects:
        inside |= (xy[:, 0] >= x0) & (xy[:, 0] < x1) & (xy[:, 1] >= y0) & (xy[:, 1] < y1)
    return inside


def rect_union_area(rects, bounds: Rect) -> float:
    """Exact area of the union of rectangles clipped to ``bounds``."""
    clipped = []
    for x0, y0, x1, y1 in rects:
        r = (max(x0, bounds[0]), max(y0, bounds[1]), min(x1, bounds[2]), min(y1, bounds[3]))
        if r[0] < r[2] and r[1] < r[3]:
            clipped.append(r)
    if not clipped:
        return 0.0
    xs = sorted({v for r in clipped for v in (r[0], r[2])})
    ys = sorted({v for r in clipped for v in (r[1], r[3])})
    area = 0.0
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            cx, cy = (xs[i] + xs[i + 1]) / 2, (ys[j] + ys[j + 1]) / 2
            if any(r[0] <= cx < r[2] and r[1] <= cy < r[3] for r in clipped):
                area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
    return area


def ellipsoid_area(a: float, b: float, c: float) -> float:
    """Knud Thomsen's approximation (relative error < 1.1%)."""
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


@dataclass
class Building:
    rect: Rect
    height: float


@dataclass
class Tree:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]


@dataclass
class Layout:
    extent: float
    water: Rect | None
    roads: list[Rect]
    buildings: list[Building]
    trees: list[Tree]
    cars: list[Rect]
    poles: list[tuple[float, float]]

    def areas(self) -> dict[str, float]:
        """Sampled surface area per kind (m^2)."""
        bounds = (0.0, 0.0, self.extent, self.extent)
        water = [] if self.water is None else [self.water]
        road = rect_union_area(self.roads, bounds)
        footprints = [b.rect for b in self.buildings]
        return {
            "ground": self.extent**2 - rect_union_area(water + self.roads + footprints, bounds),
            "roof": sum((r[2] - r[0]) * (r[3] - r[1]) for r in footprints),
            "wall": sum(2 * ((b.rect[2] - b.rect[0]) + (b.rect[3] - b.rect[1])) * b.height for b in self.buildings),
            "canopy": sum(ellipsoid_area(*t.radii) for t in self.trees),
            "road": road,
            "water": 0.0 if self.water is None else (self.water[2] - self.water[0]) * (self.water[3] - self.water[1]),
            "car": sum(_car_area(c) for c in self.cars),
            "pole": len(self.poles) * 2 * math.pi * POLE_RADIUS * POLE_HEIGHT,
        }


CAR_HEIGHT = 1.5
POLE_RADIUS = 0.15
POLE_HEIGHT = 6.0


def _car_area(r: Rect) -> float:
    w, d = r[2] - r[0], r[3] - r[1]
    return w * d + 2 * (w + d) * CAR_HEIGHT


def build_layout(spec: SceneSpec) -> Layout:
    rng = np.random.default_rng([spec.seed, 1])
    e = spec.extent
    water = None
    if spec.water:
        ww, wd = spec.water_size
        ww, wd = min(ww, e / 2), min(wd, e / 2)
        corner = int(rng.integers(4))
        x0 = 0.0 if corner in (0, 2) else e - ww
        y0 = 0.0 if corner in (0, 1) else e - wd
        water = (x0, y0, x0 + ww, y0 + wd)
    blocked = [] if water is None else [water]

    roads: list[Rect] = []
    w = spec.road_width
    for i in range(spec.road_count):
        for _ in range(100):
            c = rng.uniform(w, e - w)
            r = (0.0, c - w / 2, e, c + w / 2) if i % 2 == 0 else (c - w / 2, 0.0, c + w / 2, e)
            parallel = roads[i % 2 :: 2]
            if not any(_overlaps(r, b, 1.0) for b in blocked + parallel):
                break
        roads.append(r)

    buildings: list[Building] = []
    for _ in range(spec.building_count):
        for _ in range(200):
            bw, bd = rng.uniform(*spec.building_footprint, size=2)
            x0, y0 = rng.uniform(1.0, e - bw - 1.0), rng.uniform(1.0, e - bd - 1.0)
            r = (x0, y0, x0 + bw, y0 + bd)
            others = blocked + roads + [b.rect for b in buildings]
            if not any(_overlaps(r, o, 1.5) for o in others):
                buildings.append(Building(r, float(rng.uniform(*spec.building_height))))
                break

    trees: list[Tree] = []
    for _ in range(spec.tree_count):
        for _ in range(200):
            a = float(rng.uniform(*spec.tree_radius))
            cx, cy = rng.uniform(a, e - a, size=2)
            box = (cx - a, cy - a, cx + a, cy + a)
            others = blocked + roads + [b.rect for b in buildings]
            if not any(_overlaps(box, o, 0.5) for o in others):
                c = 0.75 * a
                trunk = float(rng.uniform(1.5, 3.0))
                trees.append(Tree((float(cx), float(cy), trunk + c), (a, a, c)))
                break

    cars: list[Rect] = []
    for _ in range(spec.car_count if roads else 0):
        road = roads[int(rng.integers(len(roads)))]
        along_x = road[2] - road[0] > road[3] - road[1]
        L, W = 4.2, 1.8
        for _ in range(100):
            if along_x:
                x0 = rng.uniform(0.5, e - L - 0.5)
                y0 = rng.uniform(road[1] + 0.3, road[3] - W - 0.3)
                r = (x0, y0, x0 + L, y0 + W)
            else:
                x0 = rng.uniform(road[0] + 0.3, road[2] - W - 0.3)
                y0 = rng.uniform(0.5, e - L - 0.5)
                r = (x0, y0, x0 + W, y0 + L)
            if not any(_overlaps(r, c, 0.5) for c in cars):
                cars.append(r)
                break

    poles: list[tuple[float, float]] = []
    for _ in range(spec.pole_count if roads else 0):
        road = roads[int(rng.integers(len(roads)))]
        along_x = road[2] - road[0] > road[3] - road[1]
        side = int(rng.integers(2))
        t = float(rng.uniform(1.0, e - 1.0))
        if along_x:
            poles.append((t, road[3] + 0.5 if side else road[1] - 0.5))
        else:
            poles.append((road[2] + 0.5 if side else road[0] - 0.5, t))

    return Layout(e, water, roads, buildings, trees, cars, poles)


def _sample_rect(rng, rect: Rect, z: float, density: float) -> np.ndarray:
    area = (rect[2] - rect[0]) * (rect[3] - rect[1])
    n = rng.poisson(density * area)
    xy = rng.uniform((rect[0], rect[1]), (rect[2], rect[3]), size=(n, 2))
    return np.column_stack([xy, np.full(n, z)])


def _sample_walls(rng, rect: Rect, z0: float, height: float, density: float) -> np.ndarray:
    w, d = rect[2] - rect[0], rect[3] - rect[1]
    perim = 2 * (w + d)
    n = rng.poisson(density * perim * height)
    s = rng.uniform(0, perim, n)
    z = rng.uniform(z0, z0 + height, n)
    x = np.where(s < w, rect[0] + s, np.where(s < w + d, rect[2], np.where(s < 2 * w + d, rect[2] - (s - w - d), rect[0])))
    y = np.where(s < w, rect[1], np.where(s < w + d, rect[1] + (s - w), np.where(s < 2 * w + d, rect[3], rect[3] - (s - 2 * w - d))))
    return np.column_stack([x, y, z])


def _sample_ellipsoid(rng, tree: Tree, density: float) -> np.ndarray:
    a, b, c = tree.radii
    n = rng.poisson(density * ellipsoid_area(a, b, c))
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(tree.center) + v * np.array([a, b, c])


def _sample_pole(rng, xy, density: float) -> np.ndarray:
    n = rng.poisson(density * 2 * math.pi * POLE_RADIUS * POLE_HEIGHT)
    ang = rng.uniform(0, 2 * math.pi, n)
    z = rng.uniform(0, POLE_HEIGHT, n)
    return np.column_stack([xy[0] + POLE_RADIUS * np.cos(ang), xy[1] + POLE_RADIUS * np.sin(ang), z])


def sample_surfaces(spec: SceneSpec, layout: Layout) -> dict[str, np.ndarray]:
    """Exact (noise-free) surface samples per kind."""
    rng = np.random.default_rng([spec.seed, 2])
    e = spec.extent
    water_rects = [] if layout.water is None else [layout.water]
    footprints = [b.rect for b in layout.buildings]
    parts: dict[str, list[np.ndarray]] = {k: [] for k in KINDS}

    g = _sample_rect(rng, (0.0, 0.0, e, e), 0.0, spec.density("ground"))
    parts["ground"].append(g[~_in_rects(g, water_rects + layout.roads + footprints)])
    r = _sample_rect(rng, (0.0, 0.0, e, e), 0.0, spec.density("road"))
    parts["road"].append(r[_in_rects(r, layout.roads)])
    if layout.water is not None:
        parts["water"].append(_sample_rect(rng, layout.water, -WATER_DEPTH, spec.density("water")))
    for b in layout.buildings:
        parts["roof"].append(_sample_rect(rng, b.rect, b.height, spec.density("roof")))
        parts["wall"].append(_sample_walls(rng, b.rect, 0.0, b.height, spec.density("wall")))
    for t in layout.trees:
        parts["canopy"].append(_sample_ellipsoid(rng, t, spec.density("canopy")))
    for c in layout.cars:
        parts["car"].append(_sample_rect(rng, c, CAR_HEIGHT, spec.density("car")))
        parts["car"].append(_sample_walls(rng, c, 0.0, CAR_HEIGHT, spec.density("car")))
    for p in layout.poles:
        parts["pole"].append(_sample_pole(rng, p, spec.density("pole")))
    return {k: np.concatenate(v) if v else np.zeros((0, 3)) for k, v in parts.items()}


def _assemble(spec: SceneSpec, label_table: dict[str, int], schema_name: str) -> PointCloud:
    layout = build_layout(spec)
    surfaces = sample_surfaces(spec, layout)
    rng = np.random.default_rng([spec.seed, 3])
    pos, col, lab = [], [], []
    for kind in KINDS:
        pts = surfaces[kind]
        if not len(pts):
            continue
        pos.append(pts + rng.normal(0.0, spec.position_noise, pts.shape))
        base = np.asarray(spec.colors[kind], dtype=np.float64)
        col.append(np.clip(np.rint(base + rng.normal(0.0, spec.color_noise, pts.shape)), 0, 255))
        lab.append(np.full(len(pts), label_table[kind]))
    if not pos:
        raise ValidationError("scene spec produced no points")
    positions = np.concatenate(pos)
    order = rng.permutation(len(positions))
    return PointCloud(
        positions[order],
        np.concatenate(col)[order].astype(np.uint8),
        np.concatenate(lab)[order],
        schema_name,
    )


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Labelled scene in the 5-class target schema."""
    return _assemble(spec, TARGET_LABELS, TARGET_SCHEMA.name)


def generate_source_scene(spec: SceneSpec) -> PointCloud:
    """Labelled scene in the 8-class pre-training schema (walls, cars and poles split out)."""
    return _assemble(spec, SOURCE_LABELS, SYNTH_SOURCE_SCHEMA.name)
