"""Tiling, fixed-size resampling, centring and batch construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PointCloud
from .errors import FormatError, ValidationError
from .network import LayerConfig, random_downsample
from .spatial import NeighborGraph, build_index, knn, nearest_index

DESK_N_POINTS = 4096
PRODUCTION_N_POINTS = 1_000_000
DEFAULT_TILE_SIZE = 250.0
GROUND_PERCENTILE = 5.0


@dataclass
class TileGrid:
    tile_size: float
    origin: np.ndarray
    tiles: dict[tuple[int, int], np.ndarray]

    def ordered(self) -> list[tuple[tuple[int, int], np.ndarray]]:
        return sorted(self.tiles.items())


def tile(cloud: PointCloud, tile_size: float = DEFAULT_TILE_SIZE) -> TileGrid:
    if not tile_size > 0:
        raise ValidationError(f"tile size must be positive, got {tile_size}")
    if len(cloud) == 0:
        return TileGrid(tile_size, np.zeros(2), {})
    xy = cloud.positions[:, :2]
    origin = xy.min(axis=0)
    cells = np.floor((xy - origin) / tile_size).astype(np.int64)
    order = np.lexsort((np.arange(len(cloud)), cells[:, 1], cells[:, 0]))
    keys = cells[order]
    cuts = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
    tiles = {}
    for grp in np.split(order, cuts):
        tiles[(int(cells[grp[0], 0]), int(cells[grp[0], 1]))] = np.sort(grp)
    return TileGrid(tile_size, origin, tiles)


def resample_indices(n: int, n_points: int, seed) -> np.ndarray:
    """Indices realising :func:`resample_to_count`."""
    if n < 1:
        raise ValidationError("cannot resample an empty cloud")
    if n_points < 1:
        raise ValidationError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    if n >= n_points:
        return np.sort(rng.choice(n, n_points, replace=False))
    extra = rng.integers(0, n, size=n_points - n)
    return np.concatenate([np.arange(n), extra])


def resample_to_count(cloud: PointCloud, n_points: int, seed) -> PointCloud:
    return cloud.take(resample_indices(len(cloud), n_points, seed))


@dataclass(frozen=True)
class CenterTransform:
    offset: np.ndarray
    scale: float = 1.0

    def invert(self, positions: np.ndarray) -> np.ndarray:
        return np.asarray(positions) / self.scale + self.offset


def center_and_scale(cloud: PointCloud) -> tuple[PointCloud, CenterTransform]:
    """Translate the centroid to the origin (scale stays 1)."""
    if len(cloud) == 0:
        return cloud, CenterTransform(np.zeros(3))
    offset = cloud.positions.mean(axis=0)
    pos = cloud.positions - offset
    return PointCloud(pos, cloud.colors, cloud.labels, cloud.schema_name), CenterTransform(offset)


def point_features(cloud: PointCloud) -> np.ndarray:
    """(N, 5): height above the cloud's 5th z percentile, colours scaled to
    [0, 1] (zeros if absent), colour-presence flag.

    Horizontal coordinates are left out on purpose: the geometry branch of
    every encoder block already sees them, and as raw features they let the
    network memorise where classes sit inside a tile.  Height is taken from a
    low percentile rather than the centroid so that it does not drift with how
    much of the tile is covered by tall objects.
    """
    n = len(cloud)
    feats = np.zeros((n, 5), dtype=np.float64)
    if n:
        z = cloud.positions[:, 2]
        feats[:, 0] = z - np.percentile(z, GROUND_PERCENTILE)
    if cloud.colors is not None:
        feats[:, 1:4] = cloud.colors / 255.0
        feats[:, 4] = 1.0
    return feats


def _child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class Batch:
    cloud: PointCloud  # resampled and centred
    features: np.ndarray
    source_indices: np.ndarray  # row -> index into the tile cloud it came from
    level_positions: list[np.ndarray]
    graphs: list[NeighborGraph]
    subsample: list[np.ndarray]  # level l -> indices (into level l) kept for level l+1
    upsample: list[np.ndarray]  # level l -> nearest level l+1 point for every level l point
    transform: CenterTransform
    tile_id: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return len(self.cloud)

    @property
    def labels(self):
        return self.cloud.labels

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {
            "positions": self.cloud.positions,
            "features": self.features,
            "source_indices": self.source_indices,
            "transform.offset": np.asarray(self.transform.offset, dtype=np.float64),
            "provenance": np.array([self.tile_id, self.seed], dtype=np.int64),
        }
        if self.cloud.colors is not None:
            arrays["colors"] = self.cloud.colors
        if self.cloud.labels is not None:
            arrays["labels"] = self.cloud.labels.astype(np.uint8)
        for lvl, g in enumerate(self.graphs):
            arrays[f"level{lvl}.graph.indices"] = g.indices
            arrays[f"level{lvl}.graph.distances"] = g.distances
            arrays[f"level{lvl}.subsample"] = self.subsample[lvl]
            arrays[f"level{lvl}.upsample"] = self.upsample[lvl]
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], schema_name: str) -> Batch:
        try:
            labels = arrays.get("labels")
            cloud = PointCloud(
                arrays["positions"],
                arrays.get("colors"),
                None if labels is None else labels.astype(np.int64),
                schema_name,
            )
            graphs, sub, up = [], [], []
            lvl = 0
            while f"level{lvl}.graph.indices" in arrays:
                graphs.append(
                    NeighborGraph(
                        arrays[f"level{lvl}.graph.indices"], arrays[f"level{lvl}.graph.distances"]
                    )
                )
                sub.append(arrays[f"level{lvl}.subsample"].astype(np.int64))
                up.append(arrays[f"level{lvl}.upsample"].astype(np.int64))
                lvl += 1
            tile_id, seed = (int(v) for v in arrays["provenance"])
            level_positions = [cloud.positions]
            for s in sub[:-1]:
                level_positions.append(level_positions[-1][s])
            return cls(
                cloud,
                arrays["features"],
                arrays["source_indices"].astype(np.int64),
                level_positions,
                graphs,
                sub,
                up,
                CenterTransform(arrays["transform.offset"]),
                tile_id,
                seed,
            )
        except KeyError as exc:
            raise FormatError(f"batch bundle lacks array {exc}") from None


def make_batch(
    cloud: PointCloud,
    n_points: int = DESK_N_POINTS,
    config: LayerConfig | None = None,
    seed: int = 0,
    tile_id: int = 0,
) -> Batch:
    """Resample a tile to ``n_points``, centre it and build per-level graphs."""
    config = config or LayerConfig()
    config.check_points(n_points)
    src = resample_indices(len(cloud), n_points, _child_seed(seed, 0))
    centred, transform = center_and_scale(cloud.take(src))
    return build_batch(centred, src, transform, config, seed, tile_id)


def build_batch(centred: PointCloud, src, transform, config: LayerConfig, seed: int, tile_id: int):
    pos = centred.positions
    level_positions, graphs, sub, up = [pos], [], [], []
    for lvl in range(config.num_layers):
        tree = build_index(pos)
        graphs.append(knn(tree, None, config.k, include_self=True))
        keep = random_downsample(len(pos), config.decimation_ratio, _child_seed(seed, lvl + 1))
        coarse = pos[keep]
        sub.append(keep)
        up.append(nearest_index(coarse, pos))
        if lvl + 1 < config.num_layers:
            level_positions.append(coarse)
        pos = coarse
    return Batch(
        centred,
        point_features(centred),
        np.asarray(src, dtype=np.int64),
        level_positions,
        graphs,
        sub,
        up,
        transform,
        tile_id,
        seed,
    )


def tile_seed(global_seed: int, tile_id: int) -> int:
    return int(global_seed) ^ int(tile_id)
