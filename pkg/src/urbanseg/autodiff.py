"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients.  ``Tensor.backward`` walks the recorded graph once in
reverse topological order.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __getitem__(self, idx):
        return take_rows(self, idx)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=backward)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return Tensor(x.data * scale, parents=(x,), backward=lambda g: (g * scale,))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(
        np.concatenate([t.data for t in ts], axis=axis),
        parents=tuple(ts),
        backward=lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def take_rows(x, idx) -> Tensor:
    """Gather rows of ``x`` (first axis) with an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1, *x.shape[1:]))
        return (gx,)

    return Tensor(x.data[idx], parents=(x,), backward=backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, parents=(x,), backward=backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor(s, parents=(x,), backward=backward)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    x = as_tensor(x)
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / np.asarray(1 - rate, x.data.dtype)
    return Tensor(x.data * keep, parents=(x,), backward=lambda g: (g * keep,))


def batch_norm(x, gamma, beta, running_mean, running_var, train: bool, momentum=0.9, eps=1e-5):
    """Normalise over every axis except the last.

    In training mode the running statistics (plain numpy arrays) are updated in
    place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.data.ndim - 1))
    dt = x.data.dtype
    if not train:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(dt)
        xhat = (x.data - running_mean) * inv
        return Tensor(
            xhat * gamma.data + beta.data,
            parents=(x, gamma, beta),
            backward=lambda g: (
                g * gamma.data * inv,
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            ),
        )
    m = int(np.prod([x.shape[a] for a in axes]))
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mean) * inv
    running_mean *= momentum
    running_mean += (1 - momentum) * mean
    running_var *= momentum
    running_var += (1 - momentum) * var * (m / max(m - 1, 1))

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta), backward=backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Mean weighted cross-entropy over rows.

    Each row contributes ``-w[y] * log softmax(logits)[y]``; the sum is divided
    by the row count N, so the logit gradient is ``(softmax - onehot) * w[y] / N``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValidationError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError("label out of range")
    dt = logits.data.dtype
    w = np.ones(c, dtype=dt) if class_weights is None else np.asarray(class_weights, dtype=dt)
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    wy = w[labels]
    loss = -(wy * logp[rows, labels]).sum() / n

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (wy / n)[:, None] * g,)

    return Tensor(np.asarray(loss, dtype=dt), parents=(logits,), backward=backward)
