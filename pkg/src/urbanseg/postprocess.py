"""Cleanup filters for labelled clouds: outlier removal, voxel downsampling,
label morphology and height-based rules."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointCloud, get_schema
from .errors import FormatError, ValidationError
from .spatial import KdTree, build_index, knn, radius_neighbors


@dataclass
class FilterReport:
    name: str
    points_in: int
    points_removed: int = 0
    points_relabeled: int = 0
    class_deltas: dict[int, int] = field(default_factory=dict)

    @property
    def points_out(self) -> int:
        return self.points_in - self.points_removed

    def to_json(self) -> dict:
        return {
            "filter": self.name,
            "points_in": self.points_in,
            "points_out": self.points_out,
            "points_removed": self.points_removed,
            "points_relabeled": self.points_relabeled,
            "class_deltas": {str(k): v for k, v in sorted(self.class_deltas.items())},
        }


def _deltas(before: PointCloud, after: PointCloud) -> dict[int, int]:
    if before.labels is None or after.labels is None:
        return {}
    k = int(max(before.labels.max(initial=-1), after.labels.max(initial=-1))) + 1
    diff = np.bincount(after.labels, minlength=k) - np.bincount(before.labels, minlength=k)
    return {i: int(d) for i, d in enumerate(diff) if d}


def _keep(cloud: PointCloud, keep: np.ndarray, name: str):
    out = cloud.take(np.flatnonzero(keep))
    return out, FilterReport(name, len(cloud), int((~keep).sum()), 0, _deltas(cloud, out))


def statistical_outlier_removal(cloud: PointCloud, k: int = 16, std_ratio: float = 1.0):
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if not std_ratio > 0:
        raise ValidationError("std_ratio must be positive")
    if len(cloud) <= k:
        raise ValidationError(f"need more than k={k} points, got {len(cloud)}")
    graph = knn(build_index(cloud.positions), None, k, include_self=False)
    mean_d = graph.distances.mean(axis=1)
    mu, sigma = mean_d.mean(), mean_d.std()
    return _keep(cloud, ~(mean_d > mu + std_ratio * sigma), "statistical_outlier_removal")


def radius_outlier_removal(cloud: PointCloud, r: float = 1.0, min_neighbors: int = 4):
    """Drop points with fewer than ``min_neighbors`` other points within ``r``."""
    if not r > 0:
        raise ValidationError(f"radius must be positive, got {r}")
    if min_neighbors < 1:
        raise ValidationError("min_neighbors must be >= 1")
    if len(cloud) == 0:
        return _keep(cloud, np.zeros(0, bool), "radius_outlier_removal")
    lists = radius_neighbors(build_index(cloud.positions), None, r, include_self=False)
    counts = np.array([len(x) for x in lists])
    return _keep(cloud, counts >= min_neighbors, "radius_outlier_removal")


def _majority(labels: np.ndarray, groups: np.ndarray, n_groups: int, k: int) -> np.ndarray:
    """Most frequent label per group; ties go to the lowest label."""
    table = np.zeros((n_groups, k), dtype=np.int64)
    np.add.at(table, (groups, labels), 1)
    return np.argmax(table, axis=1)


def voxel_downsample(cloud: PointCloud, voxel_size: float = 0.5):
    """One point per occupied voxel: centroid position, mean colour, majority label.

    Voxels are anchored at the cloud's minimum corner; output is ordered by
    voxel index.
    """
    if not voxel_size > 0:
        raise ValidationError(f"voxel size must be positive, got {voxel_size}")
    n = len(cloud)
    if n == 0:
        return cloud, FilterReport("voxel_downsample", 0)
    pos = cloud.positions
    keys = np.floor((pos - pos.min(axis=0)) / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    m = counts.size
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, pos)
    centroid = sums / counts[:, None]
    lo = np.full((m, 3), np.inf)
    hi = np.full((m, 3), -np.inf)
    np.minimum.at(lo, inverse, pos)
    np.maximum.at(hi, inverse, pos)
    centroid = np.clip(centroid, lo, hi)  # guard against rounding past the members
    colors = None
    if cloud.colors is not None:
        csum = np.zeros((m, 3))
        np.add.at(csum, inverse, cloud.colors.astype(np.float64))
        colors = np.clip(np.rint(csum / counts[:, None]), 0, 255).astype(np.uint8)
    labels = None
    if cloud.labels is not None:
        labels = _majority(cloud.labels, inverse, m, int(cloud.labels.max()) + 1)
    out = PointCloud(centroid, colors, labels, cloud.schema_name)
    return out, FilterReport("voxel_downsample", n, n - m, 0, _deltas(cloud, out))


def morphological_label_filter(
    cloud: PointCloud, graph, mode: str, target_class: int, threshold: int
):
    """One synchronous erosion or dilation pass of ``target_class`` over a k-NN graph.

    dilate: a point becomes the class if at least ``threshold`` neighbours have it.
    erode: a point of the class keeps it only with at least ``threshold`` such
    neighbours, otherwise it takes the majority of its other-class neighbours.
    """
    if cloud.labels is None:
        raise ValidationError("morphology needs labels")
    if mode not in ("erode", "dilate"):
        raise ValidationError(f"mode must be 'erode' or 'dilate', got {mode!r}")
    nbr = graph.indices
    if nbr.shape[0] != len(cloud):
        raise ValidationError("graph rows do not match the cloud")
    if not 1 <= threshold <= nbr.shape[1]:
        raise ValidationError(f"threshold must be in [1, {nbr.shape[1]}]")
    old = cloud.labels
    nlab = old[nbr]
    is_c = nlab == target_class
    count_c = is_c.sum(axis=1)
    new = old.copy()
    if mode == "dilate":
        new[count_c >= threshold] = target_class
    else:
        erode = (old == target_class) & (count_c < threshold)
        rows = np.flatnonzero(erode)
        if rows.size:
            k = int(max(old.max(), target_class)) + 1
            sub = nlab[rows]
            mask = sub != target_class
            table = np.zeros((rows.size, k), dtype=np.int64)
            r_idx = np.broadcast_to(np.arange(rows.size)[:, None], sub.shape)
            np.add.at(table, (r_idx[mask], sub[mask]), 1)
            new[rows] = np.argmax(table, axis=1)
    out = cloud.with_labels(new)
    report = FilterReport(
        f"morphology_{mode}", len(cloud), 0, int((new != old).sum()), _deltas(cloud, out)
    )
    return out, report


@dataclass
class GroundModel:
    cell_size: float
    origin: np.ndarray
    cells: np.ndarray  # (M, 2) integer cell coordinates of non-empty cells, sorted
    elevation: np.ndarray  # (M,)

    def __post_init__(self):
        self._lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(self.cells)}
        centers = (self.cells + 0.5) * self.cell_size + self.origin
        self._tree = KdTree(centers)

    def ground_at(self, xy) -> np.ndarray:
        """Ground elevation below each (x, y); empty cells use the nearest non-empty cell."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))[:, :2]
        cells = np.floor((xy - self.origin) / self.cell_size).astype(np.int64)
        idx = np.array([self._lookup.get((int(a), int(b)), -1) for a, b in cells], dtype=np.int64)
        missing = idx < 0
        if missing.any():
            centers = (cells[missing] + 0.5) * self.cell_size + self.origin
            idx[missing] = knn(self._tree, centers, 1).indices[:, 0]
        return self.elevation[idx]


def build_ground_model(cloud: PointCloud, cell_size: float = 2.0, percentile: float = 5.0):
    if not cell_size > 0:
        raise ValidationError(f"cell size must be positive, got {cell_size}")
    if not 0 <= percentile <= 100:
        raise ValidationError("percentile must be in [0, 100]")
    if len(cloud) == 0:
        raise ValidationError("cannot build a ground model from an empty cloud")
    xy = cloud.positions[:, :2]
    origin = xy.min(axis=0)
    cells = np.floor((xy - origin) / cell_size).astype(np.int64)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    cuts = np.flatnonzero(np.diff(inverse[order])) + 1
    z = cloud.positions[:, 2]
    elevation = np.array([np.percentile(z[g], percentile) for g in np.split(order, cuts)])
    return GroundModel(cell_size, origin, uniq, elevation)


@dataclass(frozen=True)
class HeightRule:
    """Points of ``class_id`` with min_height <= height < max_height get ``action``.

    ``action`` is "remove" or "relabel" (to ``relabel_to``).
    """

    class_id: int
    min_height: float = -np.inf
    max_height: float = np.inf
    action: str = "relabel"
    relabel_to: int | None = None

    def __post_init__(self):
        if self.action not in ("remove", "relabel"):
            raise ValidationError(f"unknown rule action {self.action!r}")
        if self.action == "relabel" and self.relabel_to is None:
            raise ValidationError("relabel rule needs a target class")


def height_above_ground(cloud: PointCloud, ground: GroundModel) -> np.ndarray:
    return cloud.positions[:, 2] - ground.ground_at(cloud.positions)


def height_filter(cloud: PointCloud, ground: GroundModel, rules):
    """Apply the first matching rule to each point; unmatched points are untouched."""
    if cloud.labels is None:
        raise ValidationError("height filtering needs labels")
    rules = list(rules)
    n = len(cloud)
    if not rules or n == 0:
        return cloud, FilterReport("height_filter", n)
    h = height_above_ground(cloud, ground)
    decided = np.zeros(n, dtype=bool)
    remove = np.zeros(n, dtype=bool)
    new = cloud.labels.copy()
    for rule in rules:
        hit = (
            ~decided
            & (cloud.labels == rule.class_id)
            & (h >= rule.min_height)
            & (h < rule.max_height)
        )
        decided |= hit
        if rule.action == "remove":
            remove |= hit
        else:
            new[hit] = rule.relabel_to
    relabeled = int(((new != cloud.labels) & ~remove).sum())
    out = cloud.with_labels(new).take(np.flatnonzero(~remove))
    return out, FilterReport("height_filter", n, int(remove.sum()), relabeled, _deltas(cloud, out))


def local_height_variation(cloud: PointCloud, r: float) -> np.ndarray:
    """max z - min z over the radius-r neighbourhood of each point (self included)."""
    if not r > 0:
        raise ValidationError(f"radius must be positive, got {r}")
    if len(cloud) == 0:
        return np.zeros(0)
    z = cloud.positions[:, 2]
    lists = radius_neighbors(build_index(cloud.positions), None, r, include_self=True)
    return np.array([z[ix].max() - z[ix].min() for ix in lists])


# ---------------------------------------------------------------------------
# JSON pipelines


def _class_id(value, schema_name: str) -> int:
    if isinstance(value, int):
        return value
    return get_schema(schema_name).index(value)


def parse_rules(items, schema_name: str) -> list[HeightRule]:
    rules = []
    for item in items:
        try:
            action = item.get("action", "relabel")
            to = item.get("to", item.get("relabel_to"))
            rules.append(
                HeightRule(
                    _class_id(item["class"], schema_name),
                    -np.inf if item.get("min_height") is None else float(item["min_height"]),
                    np.inf if item.get("max_height") is None else float(item["max_height"]),
                    action,
                    None if to is None else _class_id(to, schema_name),
                )
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"bad height rule {item!r}: {exc}") from None
    return rules


DEFAULTS = {
    "statistical_outlier_removal": {"k": 16, "std_ratio": 1.0},
    "radius_outlier_removal": {"r": 1.0, "min_neighbors": 4},
    "voxel_downsample": {"voxel_size": 0.5},
    "morphology": {"k": 16, "threshold": 8, "mode": "erode"},
    "height_filter": {"cell_size": 2.0, "percentile": 5.0, "rules": []},
}


def run_pipeline(cloud: PointCloud, steps) -> tuple[PointCloud, list[FilterReport]]:
    """Apply an ordered list of ``{"op": name, ...params}`` steps."""
    reports = []
    for step in steps:
        if not isinstance(step, dict) or "op" not in step:
            raise FormatError(f"pipeline step needs an 'op': {step!r}")
        op = step["op"]
        if op not in DEFAULTS:
            raise ValidationError(f"unknown postprocess op {op!r}")
        args = {**DEFAULTS[op], **{k: v for k, v in step.items() if k != "op"}}
        try:
            if op == "statistical_outlier_removal":
                cloud, rep = statistical_outlier_removal(cloud, int(args["k"]), float(args["std_ratio"]))
            elif op == "radius_outlier_removal":
                cloud, rep = radius_outlier_removal(cloud, float(args["r"]), int(args["min_neighbors"]))
            elif op == "voxel_downsample":
                cloud, rep = voxel_downsample(cloud, float(args["voxel_size"]))
            elif op == "morphology":
                graph = knn(build_index(cloud.positions), None, int(args["k"]), include_self=False)
                cls = _class_id(args["class"], cloud.schema_name)
                cloud, rep = morphological_label_filter(
                    cloud, graph, args["mode"], cls, int(args["threshold"])
                )
            else:
                ground = build_ground_model(cloud, float(args["cell_size"]), float(args["percentile"]))
                cloud, rep = height_filter(cloud, ground, parse_rules(args["rules"], cloud.schema_name))
        except KeyError as exc:
            raise FormatError(f"step {op!r} lacks parameter {exc}") from None
        reports.append(rep)
    return cloud, reports


def load_pipeline(path) -> list[dict]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(data, dict):
        data = data.get("steps", data.get("pipeline"))
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a list of steps")
    if data and all(isinstance(d, dict) and "op" not in d for d in data):
        return [{"op": "height_filter", "rules": data}]  # a bare height-rule list
    return data
