"""Exact k-nearest-neighbour and radius search over a bucketed kd-tree.

Queries are processed one leaf-group at a time: all queries that descend to the
same leaf share one traversal, and candidate distances are evaluated as numpy
blocks.  Results are exact; ties in distance are broken by the lower point
index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_LEAF_SIZE = 32


def squared_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(Q, M) squared Euclidean distances, summed coordinate by coordinate.

    The fixed summation order keeps results bit-identical between every code
    path that calls this function.
    """
    out = np.zeros((queries.shape[0], points.shape[0]), dtype=np.float64)
    for d in range(queries.shape[1]):
        diff = queries[:, d, None] - points[None, :, d]
        out += diff * diff
    return out


@dataclass(frozen=True)
class NeighborGraph:
    """Row i lists the neighbours of point i, nearest first."""

    indices: np.ndarray  # (N, k) int64
    distances: np.ndarray  # (N, k) float64

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=np.float64))
        if self.indices.ndim != 2 or self.indices.shape != self.distances.shape:
            raise ValidationError(
                f"indices {self.indices.shape} and distances {self.distances.shape} must match (N, k)"
            )

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]


class KdTree:
    """Immutable kd-tree; split on the axis of largest extent at the median."""

    def __init__(self, positions, leaf_size: int = DEFAULT_LEAF_SIZE):
        pts = np.asarray(positions, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValidationError("cannot index an empty point set")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("non-finite coordinate in index input")
        if leaf_size < 1:
            raise ValidationError("leaf_size must be >= 1")
        self.points = pts
        self.points.setflags(write=False)
        self.leaf_size = leaf_size
        self._build()

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def _build(self):
        pts = self.points
        perm = np.arange(pts.shape[0], dtype=np.int64)
        start, end, left, right, sdim, sval, lo, hi = [], [], [], [], [], [], [], []

        def new_node(s, e):
            sub = pts[perm[s:e]]
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            sdim.append(-1)
            sval.append(0.0)
            lo.append(sub.min(axis=0))
            hi.append(sub.max(axis=0))
            return len(start) - 1

        stack = [new_node(0, pts.shape[0])]
        while stack:
            node = stack.pop()
            s, e = start[node], end[node]
            if e - s <= self.leaf_size:
                continue
            extent = hi[node] - lo[node]
            dim = int(np.argmax(extent))
            if extent[dim] == 0.0:
                continue  # all points coincide: keep as one (oversized) leaf
            seg = perm[s:e]
            order = np.lexsort((seg, pts[seg, dim]))
            perm[s:e] = seg[order]
            mid = s + (e - s) // 2
            sdim[node] = dim
            sval[node] = float(pts[perm[mid - 1], dim])
            left[node] = new_node(s, mid)
            right[node] = new_node(mid, e)
            stack.extend((right[node], left[node]))

        self.perm = perm
        self.node_start = np.array(start, dtype=np.int64)
        self.node_end = np.array(end, dtype=np.int64)
        self.node_left = np.array(left, dtype=np.int64)
        self.node_right = np.array(right, dtype=np.int64)
        self.node_dim = np.array(sdim, dtype=np.int64)
        self.node_split = np.array(sval, dtype=np.float64)
        self.node_lo = np.array(lo)
        self.node_hi = np.array(hi)

    def leaf_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.node_left < 0)]

    def leaf_members(self, node: int) -> np.ndarray:
        return self.perm[self.node_start[node] : self.node_end[node]]

    def _descend(self, q: np.ndarray) -> np.ndarray:
        cur = np.zeros(q.shape[0], dtype=np.int64)
        while True:
            inner = self.node_left[cur] >= 0
            if not inner.any():
                return cur
            c = cur[inner]
            go_left = q[inner, self.node_dim[c]] <= self.node_split[c]
            cur[inner] = np.where(go_left, self.node_left[c], self.node_right[c])

    def _box_dist2(self, q: np.ndarray, node: int) -> np.ndarray:
        diff = np.maximum(np.maximum(self.node_lo[node] - q, q - self.node_hi[node]), 0.0)
        out = np.zeros(q.shape[0])
        for d in range(q.shape[1]):
            out += diff[:, d] * diff[:, d]
        return out

    def _groups(self, q: np.ndarray):
        leaves = self._descend(q)
        order = np.argsort(leaves, kind="stable")
        bounds = np.flatnonzero(np.diff(leaves[order])) + 1
        for grp in np.split(order, bounds):
            if grp.size:
                yield int(leaves[grp[0]]), grp

    def _traverse(self, first_leaf: int, q: np.ndarray, bound_fn, visit_fn):
        """Visit the home leaf, then every other leaf whose box is within bound."""
        visit_fn(self.leaf_members(first_leaf))
        stack = [0]
        while stack:
            node = stack.pop()
            if node == first_leaf:
                continue
            if not np.any(self._box_dist2(q, node) <= bound_fn()):
                continue
            if self.node_left[node] < 0:
                visit_fn(self.leaf_members(node))
                continue
            l, r = self.node_left[node], self.node_right[node]
            cen = q.mean(axis=0, keepdims=True)
            if self._box_dist2(cen, l)[0] <= self._box_dist2(cen, r)[0]:
                stack.extend((r, l))
            else:
                stack.extend((l, r))


def build_index(positions, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    return KdTree(positions, leaf_size)


def _resolve_queries(tree: KdTree, queries):
    """Return (coordinates, self index per query or None)."""
    if queries is None:
        return tree.points, np.arange(len(tree), dtype=np.int64)
    q = np.asarray(queries)
    if q.ndim == 1 and q.dtype.kind in "iu":
        if q.size and (q.min() < 0 or q.max() >= len(tree)):
            raise ValidationError("query index out of range")
        return tree.points[q], q.astype(np.int64)
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != tree.dim:
        raise ValidationError(f"queries must be (Q, {tree.dim}), got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("non-finite query coordinate")
    return q, None


def knn(tree: KdTree, queries=None, k: int = 16, include_self: bool = True) -> NeighborGraph:
    """Exact k nearest neighbours.

    ``queries`` is ``None`` (every indexed point, in order), an integer array
    of indexed points, or a float (Q, d) coordinate array.  For index queries
    ``include_self=True`` puts the query point in column 0 (distance 0) and
    fills the rest with its k-1 nearest other points; ``include_self=False``
    never returns the query point.  Coordinate queries have no self.
    """
    q, self_idx = _resolve_queries(tree, queries)
    if self_idx is not None and include_self:
        # self goes first even when a lower-index duplicate sits at distance 0
        if k < 1 or k > len(tree):
            raise ValidationError(f"k={k} outside [1, {len(tree)}] available candidates")
        head = self_idx[:, None]
        if k == 1:
            return NeighborGraph(head, np.zeros((q.shape[0], 1)))
        rest = knn(tree, self_idx, k - 1, include_self=False)
        return NeighborGraph(
            np.concatenate([head, rest.indices], axis=1),
            np.concatenate([np.zeros((q.shape[0], 1)), rest.distances], axis=1),
        )
    exclude = self_idx is not None
    available = len(tree) - (1 if exclude else 0)
    if k < 1 or k > available:
        raise ValidationError(f"k={k} outside [1, {available}] available candidates")
    nq = q.shape[0]
    out_idx = np.empty((nq, k), dtype=np.int64)
    out_d2 = np.empty((nq, k), dtype=np.float64)
    big = np.iinfo(np.int64).max

    for leaf, grp in tree._groups(q):
        gq = q[grp]
        best_d2 = np.full((grp.size, k), np.inf)
        best_idx = np.full((grp.size, k), big, dtype=np.int64)
        gself = self_idx[grp] if exclude else None

        def visit(members):
            nonlocal best_d2, best_idx
            d2 = squared_distances(gq, tree.points[members])
            idx = np.broadcast_to(members, d2.shape)
            if gself is not None:
                d2 = np.where(idx == gself[:, None], np.inf, d2)
                idx = np.where(idx == gself[:, None], big, idx)
            cand_d2 = np.concatenate([best_d2, d2], axis=1)
            cand_idx = np.concatenate([best_idx, idx], axis=1)
            order = np.lexsort((cand_idx, cand_d2), axis=-1)[:, :k]
            best_d2 = np.take_along_axis(cand_d2, order, axis=1)
            best_idx = np.take_along_axis(cand_idx, order, axis=1)

        tree._traverse(leaf, gq, lambda: best_d2[:, -1], visit)
        out_idx[grp] = best_idx
        out_d2[grp] = best_d2
    return NeighborGraph(out_idx, np.sqrt(out_d2))


def radius_neighbors(
    tree: KdTree,
    queries=None,
    r: float = 1.0,
    include_self: bool = True,
    return_distances: bool = False,
):
    """Indices of all points with distance <= r, nearest first (ties by index)."""
    if not r > 0:
        raise ValidationError(f"radius must be positive, got {r}")
    q, self_idx = _resolve_queries(tree, queries)
    exclude = self_idx is not None and not include_self
    nq = q.shape[0]
    found_q, found_i, found_d = [], [], []
    r2_bound = np.float64(r) * np.float64(r) * (1 + 1e-9)

    for leaf, grp in tree._groups(q):
        gq = q[grp]

        def visit(members):
            d = np.sqrt(squared_distances(gq, tree.points[members]))
            hit = d <= r
            if exclude:
                hit &= members[None, :] != self_idx[grp][:, None]
            qi, mi = np.nonzero(hit)
            found_q.append(grp[qi])
            found_i.append(members[mi])
            found_d.append(d[qi, mi])

        tree._traverse(leaf, gq, lambda: r2_bound, visit)

    fq = np.concatenate(found_q) if found_q else np.empty(0, np.int64)
    fi = np.concatenate(found_i) if found_i else np.empty(0, np.int64)
    fd = np.concatenate(found_d) if found_d else np.empty(0)
    order = np.lexsort((fi, fd, fq))
    fq, fi, fd = fq[order], fi[order], fd[order]
    cuts = np.searchsorted(fq, np.arange(1, nq))
    idx_lists = np.split(fi.astype(np.int64), cuts)
    if return_distances:
        return idx_lists, np.split(fd, cuts)
    return idx_lists


def nearest_index(coarse_positions, fine_positions) -> np.ndarray:
    """Index of the nearest coarse point for every fine point (ties to lower index)."""
    tree = KdTree(coarse_positions)
    return knn(tree, np.asarray(fine_positions, dtype=np.float64), k=1).indices[:, 0]
