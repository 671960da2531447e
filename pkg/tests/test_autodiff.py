import math

import numpy as np
import pytest

from gradcheck import check
from urbanseg import autodiff as ad
from urbanseg.errors import ValidationError

TOL = 1e-4
SEEDS = range(5)


def _r(seed, *shape):
    return np.random.default_rng(seed).normal(size=shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_ops(seed):
    a, b = _r(seed, 4, 3), _r(seed + 100, 3)
    assert check(lambda t: ad.add(t["a"], t["b"]), {"a": a, "b": b}, seed) < TOL
    assert check(lambda t: ad.sub(t["a"], t["b"]), {"a": a, "b": b}, seed) < TOL
    assert check(lambda t: ad.mul(t["a"], t["b"]), {"a": a, "b": b}, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_linear(seed):
    arrays = {"x": _r(seed, 2, 3, 4), "w": _r(seed + 1, 5, 4), "b": _r(seed + 2, 5)}
    assert check(lambda t: ad.linear(t["x"], t["w"], t["b"]), arrays, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_leaky_relu(seed):
    x = _r(seed, 6, 5)
    x[np.abs(x) < 1e-3] = 0.5  # keep finite differences away from the kink
    assert check(lambda t: ad.leaky_relu(t["x"], 0.2), {"x": x}, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_take_rows_reduce_sum(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, size=(4, 3))  # repeated rows exercise gradient accumulation
    arrays = {"a": _r(seed, 5, 2), "b": _r(seed + 1, 5, 3)}
    build = lambda t: ad.reduce_sum(ad.take_rows(ad.concat([t["a"], t["b"]], axis=-1), idx), axis=1)  # noqa: E731
    assert check(build, arrays, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax(seed):
    assert check(lambda t: ad.softmax(t["x"], axis=1), {"x": _r(seed, 3, 4, 2)}, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("train", [True, False])
def test_batch_norm(seed, train):
    arrays = {"x": _r(seed, 6, 3, 4), "g": _r(seed + 1, 4), "b": _r(seed + 2, 4)}

    def build(t):
        return ad.batch_norm(t["x"], t["g"], t["b"], np.full(4, 0.3), np.full(4, 1.7), train)

    assert check(build, arrays, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_with_fixed_mask(seed):
    def build(t):
        return ad.dropout(t["x"], 0.5, np.random.default_rng(seed))

    assert check(build, {"x": _r(seed, 8, 3)}, seed) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient_tight(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=7)
    w = rng.uniform(0.5, 2.0, size=5)
    err = check(lambda t: ad.cross_entropy(t["z"], labels, w), {"z": _r(seed, 7, 5)}, seed)
    assert err < 1e-6


def test_uniform_logits_loss_is_ln5():
    loss = ad.cross_entropy(np.zeros((10, 5)), np.arange(10) % 5)
    assert abs(float(loss.data) - math.log(5)) < 1e-12


def test_loss_vanishes_with_margin():
    labels = np.array([0, 3, 1])
    values = []
    for margin in (1.0, 10.0, 100.0):
        z = np.zeros((3, 5))
        z[np.arange(3), labels] = margin
        values.append(float(ad.cross_entropy(z, labels).data))
    assert values[0] > values[1] > values[2] >= 0
    assert values[2] < 1e-30


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(3)
    z, y, w = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2]), np.array([1.0, 2.0, 0.5])
    t = ad.Tensor(z, requires_grad=True)
    ad.cross_entropy(t, y, w).backward()
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    expect = (p - np.eye(3)[y]) * w[y][:, None] / 4
    assert np.allclose(t.grad, expect, atol=1e-15)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValidationError):
        ad.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_backward_visits_shared_nodes_once():
    x = ad.Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x, x)
    z = ad.add(y, y)  # dz/dx = 4x
    ad.reduce_sum(z).backward()
    assert x.grad.tolist() == [8.0]


def test_deep_chain_does_not_recurse():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.add(y, 1.0)
    ad.reduce_sum(y).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_non_scalar_backward_needs_gradient():
    with pytest.raises(ValueError):
        ad.Tensor(np.ones(3), requires_grad=True).backward()


def test_batch_norm_running_stats_update():
    x = np.arange(12.0).reshape(6, 2)
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, train=True, momentum=0.9)
    assert np.allclose(rm, 0.1 * x.mean(0))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))


def test_dropout_identity_without_rng():
    x = ad.Tensor(np.ones(4))
    assert ad.dropout(x, 0.5, None) is x


def test_softmax_rows_normalised():
    s = ad.softmax(np.random.default_rng(0).normal(size=(50, 16, 8)) * 30, axis=1).data
    assert np.all(np.abs(s.sum(axis=1) - 1) < 1e-6)
