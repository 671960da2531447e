import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_knn, brute_radius, brute_sq_dist
from urbanseg.errors import ValidationError
from urbanseg.spatial import KdTree, build_index, knn, nearest_index, radius_neighbors


def test_single_point():
    tree = build_index(np.zeros((1, 3)))
    assert len(tree) == 1
    g = knn(tree, None, 1, include_self=True)
    assert g.indices.tolist() == [[0]]


def test_collinear_example():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    g = knn(build_index(pts), np.array([0]), 2, include_self=False)
    assert set(g.indices[0]) == {1, 2}
    assert g.distances[0].tolist() == [1.0, 2.0]


def test_duplicates_tie_to_lower_index():
    pts = np.array([[5, 5, 5]] * 4 + [[0, 0, 0]], dtype=float)
    g = knn(build_index(pts), np.array([[5.0, 5.0, 5.0]]), 3)
    assert g.indices.tolist() == [[0, 1, 2]]
    g = knn(build_index(pts), None, 3, include_self=False)
    assert g.indices[3].tolist() == [0, 1, 2]


def test_self_first_even_with_duplicates():
    pts = np.zeros((3, 3))
    g = knn(build_index(pts), None, 3, include_self=True)
    assert g.indices.tolist() == [[0, 1, 2], [1, 0, 2], [2, 0, 1]]


def test_k_equals_n_rows_are_permutations(rng):
    pts = rng.uniform(size=(40, 3))
    g = knn(build_index(pts, leaf_size=4), None, 40, include_self=True)
    for row in g.indices:
        assert sorted(row.tolist()) == list(range(40))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("include_self", [True, False])
def test_knn_matches_oracle(seed, include_self):
    pts = np.random.default_rng(seed).uniform(size=(300, 3))
    g = knn(build_index(pts, leaf_size=8), None, 16, include_self=include_self)
    idx, dist = brute_knn(pts, 16, include_self)
    assert np.array_equal(g.indices, idx)
    assert np.array_equal(g.distances, dist)


def test_knn_on_coarse_grid_with_many_ties():
    g1 = np.arange(5.0)
    pts = np.stack(np.meshgrid(g1, g1, g1, indexing="ij"), -1).reshape(-1, 3)
    g = knn(build_index(pts, leaf_size=3), None, 12, include_self=False)
    idx, _ = brute_knn(pts, 12, False)
    assert np.array_equal(g.indices, idx)


def test_coordinate_queries_match_oracle(rng):
    pts = rng.uniform(size=(200, 3))
    q = rng.uniform(-0.2, 1.2, size=(50, 3))
    g = knn(build_index(pts), q, 5)
    d2 = brute_sq_dist(q, pts)
    for i in range(len(q)):
        expect = sorted(range(len(pts)), key=lambda j: (d2[i, j], j))[:5]
        assert g.indices[i].tolist() == expect


def test_rows_are_sorted(rng):
    pts = rng.normal(size=(500, 3))
    g = knn(build_index(pts), None, 10)
    assert np.all(np.diff(g.distances, axis=1) >= 0)


def test_k_too_large():
    tree = build_index(np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        knn(tree, None, 3, include_self=False)
    with pytest.raises(ValidationError):
        knn(tree, None, 4, include_self=True)


def test_build_errors():
    with pytest.raises(ValidationError):
        build_index(np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        build_index(np.array([[0.0, np.inf, 0.0]]))


def test_every_point_in_exactly_one_leaf(rng):
    tree = KdTree(rng.normal(size=(1000, 3)), leaf_size=7)
    members = np.concatenate([tree.leaf_members(i) for i in tree.leaf_ids()])
    assert sorted(members.tolist()) == list(range(1000))


def test_radius_small_r_gives_empty_lists(rng):
    pts = rng.uniform(size=(50, 3))
    d = np.sqrt(brute_sq_dist(pts, pts))
    r = d[d > 0].min() / 2
    lists = radius_neighbors(build_index(pts), None, r, include_self=False)
    assert all(len(x) == 0 for x in lists)


def test_radius_inclusive_boundary():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    lists = radius_neighbors(build_index(pts), None, 1.0, include_self=False)
    assert [x.tolist() for x in lists] == [[1], [0]]


def test_radius_non_positive():
    with pytest.raises(ValidationError):
        radius_neighbors(build_index(np.zeros((2, 3))), None, 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_radius_matches_oracle(seed):
    pts = np.random.default_rng(seed).uniform(size=(500, 3))
    for include_self in (True, False):
        lists, dists = radius_neighbors(build_index(pts), None, 0.2, include_self, return_distances=True)
        expect = brute_radius(pts, 0.2, include_self)
        for got, want, d in zip(lists, expect, dists):
            assert np.array_equal(got, want)
            assert np.all(np.diff(d) >= 0)


def test_distance_symmetry(rng):
    pts = rng.normal(size=(100, 3))
    g = knn(build_index(pts), None, 99, include_self=False)
    d = np.full((100, 100), np.nan)
    d[np.repeat(np.arange(100), 99), g.indices.ravel()] = g.distances.ravel()
    off = ~np.eye(100, dtype=bool)
    assert np.array_equal(d[off], d.T[off])


def test_nearest_index_matches_oracle(rng):
    coarse = rng.uniform(size=(30, 3))
    fine = rng.uniform(size=(200, 3))
    d2 = brute_sq_dist(fine, coarse)
    expect = [min(range(30), key=lambda j: (d2[i, j], j)) for i in range(200)]
    assert nearest_index(coarse, fine).tolist() == expect


def test_deterministic(rng):
    pts = rng.normal(size=(2000, 3))
    a = knn(build_index(pts), None, 16)
    b = knn(build_index(pts.copy()), None, 16)
    assert a.indices.tobytes() == b.indices.tobytes()
    assert a.distances.tobytes() == b.distances.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(1, 8), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_knn_property_with_quantised_ties(n, leaf, k, seed):
    # coordinates on a coarse lattice produce many exactly equal distances
    pts = np.random.default_rng(seed).integers(0, 4, size=(n, 3)).astype(float)
    k = min(k, n - 1)
    g = knn(build_index(pts, leaf_size=leaf), None, k, include_self=False)
    idx, _ = brute_knn(pts, k, False)
    assert np.array_equal(g.indices, idx)
    lists = radius_neighbors(build_index(pts, leaf_size=leaf), None, 1.5, include_self=True)
    for got, want in zip(lists, brute_radius(pts, 1.5, True)):
        assert np.array_equal(got, want)
