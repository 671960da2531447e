"""Central finite-difference checker shared by the unit and acceptance tests."""

import numpy as np

from urbanseg import autodiff as ad
from urbanseg import network as net
from urbanseg.core import TARGET_SCHEMA


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def check(build, arrays: dict, seed: int = 0, eps: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients.

    ``build(leaves)`` maps a dict of Tensors to an output Tensor; it is reduced
    to a scalar through a fixed random projection so every output element
    contributes.  ``arrays`` holds float64 inputs to differentiate against.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    probe = build({k: ad.Tensor(v.copy()) for k, v in arrays.items()}).data
    proj = np.random.default_rng(seed).normal(size=np.shape(probe))

    def scalar(values):
        out = build({k: ad.Tensor(v) for k, v in values.items()})
        return float(np.sum(out.data * proj))

    leaves = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    out = build(leaves)
    ad.reduce_sum(ad.mul(out, proj)).backward()

    worst = 0.0
    for name, base in arrays.items():
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            values = {k: v.copy() for k, v in arrays.items()}
            values[name][idx] = base[idx] + eps
            up = scalar(values)
            values[name][idx] = base[idx] - eps
            down = scalar(values)
            numeric[idx] = (up - down) / (2 * eps)
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# network operations

NETWORK_OPS = ("locse", "attentive_pool", "residual_block", "head", "loss")
BLOCK = net.LayerConfig(k=2, decimation_ratio=2, feature_dims=(4,), num_layers=1, input_dim=4, head_dims=(4,))


def block_params(seed: int):
    """Float64 block parameters with random (not unit) batch-norm affine terms and biases."""
    params = net.init_params(BLOCK, TARGET_SCHEMA, seed, np.float64)
    rng = np.random.default_rng(seed + 100)
    for name, t in params.tensors.items():
        if name.endswith(("gamma", "beta", ".b")):
            t[...] = rng.normal(size=t.shape)
    return params


def small_graph(rng, n: int, k: int):
    pos = rng.normal(size=(n, 3))
    d2 = ((pos[:, None, :] - pos[None]) ** 2).sum(-1)
    return pos, np.argsort(d2, axis=1, kind="stable")[:, :k]


def _net_check(params, names, extra, body, seed):
    arrays = {n: params.tensors[n] for n in names}
    arrays.update(extra)

    def build(t):
        # a fresh context per call replays the same dropout mask
        ctx = net.Context(params, train=True, seed=seed, trainable=())
        ctx.leaves.update({n: t[n] for n in names})
        return body(ctx, t)

    return check(build, arrays, seed)


def _loss_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(9, 5))
    labels = rng.integers(0, 5, size=9)
    weights = rng.uniform(0.5, 2.0, size=5)
    _, grad = net.loss(logits, labels, weights)
    eps = 1e-6
    numeric = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        numeric[idx] = (net.loss(up, labels, weights)[0] - net.loss(down, labels, weights)[0]) / (2 * eps)
    return relative_error(grad, numeric)


def network_case(op: str, seed: int) -> float:
    """Worst relative gradient error of one random instance of a network operation.

    Every case runs in train mode, so batch norm uses batch statistics and
    the head applies a fixed dropout mask.
    """
    if op == "loss":
        return _loss_error(seed)
    rng = np.random.default_rng(seed)
    params = block_params(seed)
    if op == "locse":
        pos, nbr = small_graph(rng, 8, 2)
        geom = net.relative_geometry(pos, nbr)
        names = ["enc0.locse1.w", "enc0.locse1.bn.gamma", "enc0.locse1.bn.beta"]
        extra = {"x": rng.normal(size=(8, 4))}

        def body(ctx, t):
            return net.locse_encode(ctx, "enc0.locse1.", geom, t["x"], nbr)

    elif op == "attentive_pool":
        names = ["enc0.att1.w", "enc0.pool1.w", "enc0.pool1.bn.gamma", "enc0.pool1.bn.beta"]
        extra = {"f": rng.normal(size=(8, 2, 6))}

        def body(ctx, t):
            return net.attentive_pool(ctx, "enc0.att1.w", "enc0.pool1.", t["f"])

    elif op == "residual_block":
        pos, nbr = small_graph(rng, 8, 2)
        names = [n for n in params.trainable_names() if n.startswith("enc0.")]
        extra = {"x": rng.normal(size=(8, 4))}

        def body(ctx, t):
            return net.dilated_residual_block(ctx, 0, pos, t["x"], nbr)

    elif op == "head":
        names = [n for n in params.trainable_names() if n.startswith("head.")]
        extra = {"x": rng.normal(size=(8, 4))}

        def body(ctx, t):
            return net.classifier_head(ctx, t["x"])

    else:
        raise ValueError(f"unknown op {op!r}")
    return _net_check(params, names, extra, body, seed)
