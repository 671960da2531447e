"""Desk-scale RandLA-Net built on :mod:`urbanseg.autodiff`.

Layout of one encoder level with input width ``d_in`` and output width
``d_out`` (``h = d_out // 2``)::

    geom_ij = [p_i, p_j, p_i - p_j, |p_i - p_j|]           (10 scalars)
    a  = AP1( [unit(geom -> h), x_j] )                    -> h
    b  = AP2( [unit(geom -> h), a_j] )                    -> d_out (no activation)
    out = leaky_relu(b + skip(x))

where ``unit`` is linear (+ batch norm) + leaky ReLU and ``AP`` is attentive
pooling followed by a shared unit MLP.  The decoder upsamples by nearest
neighbour, concatenates the encoder feature of the same level and applies a
unit MLP.  The head is two unit MLPs, dropout, and a linear classifier.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .core import TARGET_SCHEMA, ClassSchema
from .errors import FormatError, ValidationError
from .spatial import nearest_index

GEOM_DIM = 10
INPUT_FEATURES = 5  # height above low z percentile, rgb in [0, 1], colour-presence flag
HEAD_PREFIX = "head.out."


@dataclass(frozen=True)
class LayerConfig:
    k: int = 16
    decimation_ratio: int = 4
    feature_dims: tuple[int, ...] = (16, 64, 128, 256)
    num_layers: int = 4
    num_classes: int = 5
    dropout_rate: float = 0.5
    use_batch_norm: bool = True
    in_features: int = INPUT_FEATURES
    input_dim: int = 8
    head_dims: tuple[int, ...] = (64, 32)
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        if len(self.feature_dims) != self.num_layers:
            raise ValidationError(
                f"feature_dims has {len(self.feature_dims)} entries for {self.num_layers} layers"
            )
        if any(d < 2 or d % 2 for d in self.feature_dims):
            raise ValidationError("feature dims must be even and >= 2")
        if self.decimation_ratio < 2:
            raise ValidationError("decimation_ratio must be >= 2")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if not self.head_dims:
            raise ValidationError("head needs at least one hidden layer")

    def level_sizes(self, n_points: int) -> list[int]:
        """Point counts of the encoder levels plus the bottleneck."""
        sizes = [n_points]
        for _ in range(self.num_layers):
            sizes.append(math.ceil(sizes[-1] / self.decimation_ratio))
        return sizes

    def check_points(self, n_points: int) -> None:
        if n_points % self.decimation_ratio**self.num_layers:
            raise ValidationError(
                f"n_points={n_points} not divisible by ratio^layers="
                f"{self.decimation_ratio ** self.num_layers}"
            )
        if self.level_sizes(n_points)[-2] < self.k:
            raise ValidationError(f"deepest level has fewer than k={self.k} points")

    def to_json(self) -> dict:
        d = asdict(self)
        d["feature_dims"] = list(self.feature_dims)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_json(cls, data: dict) -> LayerConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown LayerConfig keys {sorted(unknown)}")
        data = dict(data)
        if "feature_dims" in data and "num_layers" not in data:
            data["num_layers"] = len(data["feature_dims"])
        return cls(**data)

    def with_classes(self, num_classes: int) -> LayerConfig:
        d = self.to_json()
        d["num_classes"] = num_classes
        return LayerConfig.from_json(d)


def _unit_shapes(prefix, d_in, d_out, bn, bias=False):
    shapes = {prefix + "w": (d_out, d_in)}
    if bn:
        shapes.update(
            {
                prefix + "bn.gamma": (d_out,),
                prefix + "bn.beta": (d_out,),
                prefix + "bn.running_mean": (d_out,),
                prefix + "bn.running_var": (d_out,),
            }
        )
    if bias or not bn:
        shapes[prefix + "b"] = (d_out,)
    return shapes


def param_shapes(config: LayerConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every tensor, in a fixed order."""
    bn = config.use_batch_norm
    shapes = dict(_unit_shapes("input.", config.in_features, config.input_dim, bn))
    d_in = config.input_dim
    for lvl, d_out in enumerate(config.feature_dims):
        h = d_out // 2
        p = f"enc{lvl}."
        shapes.update(_unit_shapes(p + "locse1.", GEOM_DIM, h, bn))
        shapes[p + "att1.w"] = (h + d_in, h + d_in)
        shapes.update(_unit_shapes(p + "pool1.", h + d_in, h, bn))
        shapes.update(_unit_shapes(p + "locse2.", GEOM_DIM, h, bn))
        shapes[p + "att2.w"] = (2 * h, 2 * h)
        shapes.update(_unit_shapes(p + "pool2.", 2 * h, d_out, bn))
        shapes.update(_unit_shapes(p + "skip.", d_in, d_out, bn))
        d_in = d_out
    width = config.feature_dims[-1]
    for lvl in reversed(range(config.num_layers)):
        d_out = config.feature_dims[lvl]
        shapes.update(_unit_shapes(f"dec{lvl}.", width + d_out, d_out, bn))
        width = d_out
    for i, d_out in enumerate(config.head_dims):
        shapes.update(_unit_shapes(f"head.fc{i}.", width, d_out, bn))
        width = d_out
    shapes[HEAD_PREFIX + "w"] = (config.num_classes, width)
    shapes[HEAD_PREFIX + "b"] = (config.num_classes,)
    return shapes


def parameter_count(config: LayerConfig, trainable_only: bool = True) -> int:
    return sum(
        int(np.prod(s))
        for name, s in param_shapes(config).items()
        if not (trainable_only and is_buffer(name))
    )


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def is_head(name: str) -> bool:
    return name.startswith(HEAD_PREFIX)


def uniform_fan_in(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / shape[-1])
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ModelParams:
    config: LayerConfig
    schema: ClassSchema
    tensors: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not is_buffer(n)]

    def copy(self) -> ModelParams:
        return ModelParams(
            self.config,
            self.schema,
            {k: v.copy() for k, v in self.tensors.items()},
            copy.deepcopy(self.provenance),
        )

    def astype(self, dtype) -> ModelParams:
        out = self.copy()
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        return out

    def check(self) -> None:
        expected = param_shapes(self.config)
        if list(expected) != list(self.tensors):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ValidationError(f"tensor names differ from config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValidationError(
                    f"{name}: shape {self.tensors[name].shape} != expected {shape}"
                )
        if self.schema.num_classes != self.config.num_classes:
            raise ValidationError(
                f"schema has {self.schema.num_classes} classes, config {self.config.num_classes}"
            )
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValidationError(f"{name} has non-finite values")

    def metadata(self) -> dict:
        return {
            "config": self.config.to_json(),
            "schema": self.schema.to_json(),
            "provenance": self.provenance,
        }


def init_params(
    config: LayerConfig, schema: ClassSchema = TARGET_SCHEMA, seed: int = 0, dtype=np.float32
) -> ModelParams:
    if schema.num_classes != config.num_classes:
        config = config.with_classes(schema.num_classes)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            tensors[name] = uniform_fan_in(rng, shape, dtype)
        elif name.endswith("gamma") or name.endswith("running_var"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(config, schema, tensors, {"init_seed": seed})


# ---------------------------------------------------------------------------
# building blocks


class Context:
    """Per-forward state: parameter tensors, mode and dropout RNG."""

    def __init__(self, params: ModelParams, train: bool, seed: int | None = None, trainable=None):
        self.params = params
        self.train = train
        self.config = params.config
        self.rng = np.random.default_rng(seed) if train else None
        names = params.trainable_names() if trainable is None else trainable
        track = set(names) if train else set()
        self.leaves = {
            n: ad.Tensor(v, requires_grad=n in track, name=n) for n, v in params.tensors.items()
        }

    @property
    def dtype(self):
        return self.params.dtype

    def unit(self, prefix: str, x, activate: bool = True):
        """Shared MLP layer: linear, optional batch norm, optional leaky ReLU."""
        t = self.params.tensors
        if prefix + "bn.gamma" in t:
            y = ad.linear(x, self.leaves[prefix + "w"], self.leaves.get(prefix + "b"))
            y = ad.batch_norm(
                y,
                self.leaves[prefix + "bn.gamma"],
                self.leaves[prefix + "bn.beta"],
                t[prefix + "bn.running_mean"],
                t[prefix + "bn.running_var"],
                train=self.train,
                momentum=self.config.bn_momentum,
            )
        else:
            y = ad.linear(x, self.leaves[prefix + "w"], self.leaves[prefix + "b"])
        return ad.leaky_relu(y, self.config.leaky_slope) if activate else y


def relative_geometry(positions: np.ndarray, neighbors: np.ndarray, dtype=np.float64) -> np.ndarray:
    """(N, K, 10) array ``[p_i, p_j, p_i - p_j, |p_i - p_j|]``."""
    p = np.asarray(positions, dtype=np.float64)
    pi = np.broadcast_to(p[:, None, :], neighbors.shape + (3,))
    pj = p[neighbors]
    rel = pi - pj
    dist = np.sqrt((rel * rel).sum(axis=-1, keepdims=True))
    return np.concatenate([pi, pj, rel, dist], axis=-1).astype(dtype)


def locse_encode(ctx: Context, prefix: str, geometry: np.ndarray, features, neighbors):
    """Encode neighbour geometry and append the neighbour's feature.

    Returns (N, K, h + d_in) where ``h`` is the width of the position MLP.
    """
    enc = ctx.unit(prefix, ad.as_tensor(geometry))
    return ad.concat([enc, ad.take_rows(features, neighbors)], axis=-1)


def attentive_pool(ctx: Context, att_name: str, mlp_prefix: str, neigh_feats, activate=True):
    """Softmax-over-neighbours attention per channel, weighted sum, shared MLP."""
    scores = ad.softmax(ad.linear(neigh_feats, ctx.leaves[att_name]), axis=1)
    pooled = ad.reduce_sum(ad.mul(neigh_feats, scores), axis=1)
    return ctx.unit(mlp_prefix, pooled, activate=activate)


def attention_scores(neigh_feats: np.ndarray, att_w: np.ndarray) -> np.ndarray:
    return ad.softmax(ad.linear(neigh_feats, att_w), axis=1).data


def dilated_residual_block(ctx: Context, level: int, positions, features, neighbors, geometry=None):
    p = f"enc{level}."
    if geometry is None:
        geometry = relative_geometry(positions, neighbors, ctx.dtype)
    a = attentive_pool(ctx, p + "att1.w", p + "pool1.", locse_encode(ctx, p + "locse1.", geometry, features, neighbors))
    b = attentive_pool(
        ctx, p + "att2.w", p + "pool2.", locse_encode(ctx, p + "locse2.", geometry, a, neighbors), activate=False
    )
    return ad.leaky_relu(ad.add(b, ctx.unit(p + "skip.", features, activate=False)), ctx.config.leaky_slope)


def classifier_head(ctx: Context, x):
    """Hidden unit MLPs, dropout (train mode only) and the linear classifier."""
    for i in range(len(ctx.config.head_dims)):
        x = ctx.unit(f"head.fc{i}.", x)
    x = ad.dropout(x, ctx.config.dropout_rate, ctx.rng)
    return ad.linear(x, ctx.leaves[HEAD_PREFIX + "w"], ctx.leaves[HEAD_PREFIX + "b"])


def nearest_upsample(coarse_features, coarse_positions, fine_positions, index=None):
    """Copy each fine point's feature from its nearest coarse point."""
    if len(coarse_positions) == 0:
        raise ValidationError("cannot upsample from an empty coarse set")
    if index is None:
        index = nearest_index(coarse_positions, fine_positions)
    return ad.take_rows(coarse_features, index)


def random_downsample(n: int, ratio: int, seed) -> np.ndarray:
    """Sorted ``ceil(n / ratio)`` distinct indices drawn uniformly from ``range(n)``."""
    if ratio < 2:
        raise ValidationError(f"decimation ratio must be >= 2, got {ratio}")
    if n < ratio:
        raise ValidationError(f"cannot decimate {n} points by {ratio}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, math.ceil(n / ratio), replace=False))


# ---------------------------------------------------------------------------
# full network


def _check_batch(batch, config: LayerConfig):
    if len(batch.graphs) != config.num_layers:
        raise ValidationError(
            f"batch has {len(batch.graphs)} graph levels, model expects {config.num_layers}"
        )
    if batch.graphs[0].k != config.k:
        raise ValidationError(f"batch graph k={batch.graphs[0].k}, model k={config.k}")
    if batch.features.shape[1] != config.in_features:
        raise ValidationError(
            f"batch has {batch.features.shape[1]} input features, model expects {config.in_features}"
        )


def forward_tensor(batch, ctx: Context) -> ad.Tensor:
    config = ctx.config
    _check_batch(batch, config)
    dt = ctx.dtype
    x = ctx.unit("input.", ad.as_tensor(batch.features.astype(dt)))
    skips = []
    for lvl in range(config.num_layers):
        pos = batch.level_positions[lvl]
        nbr = batch.graphs[lvl].indices
        x = dilated_residual_block(ctx, lvl, pos, x, nbr, relative_geometry(pos, nbr, dt))
        skips.append(x)
        x = ad.take_rows(x, batch.subsample[lvl])
    for lvl in reversed(range(config.num_layers)):
        up = ad.take_rows(x, batch.upsample[lvl])
        x = ctx.unit(f"dec{lvl}.", ad.concat([up, skips[lvl]], axis=-1))
    return classifier_head(ctx, x)


def forward(batch, params: ModelParams, mode: str = "eval", seed: int | None = 0) -> np.ndarray:
    """Per-point logits, shape (n_points, num_classes).

    ``mode="train"`` uses batch statistics (updating the running ones in
    place) and dropout; ``mode="eval"`` is a pure function of its inputs.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    ctx = Context(params, train=mode == "train", seed=seed, trainable=())
    return forward_tensor(batch, ctx).data


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    return np.exp(ad.log_softmax_np(logits))


def loss(logits, labels, class_weights=None) -> tuple[float, np.ndarray]:
    """Mean weighted cross-entropy and its gradient with respect to the logits."""
    t = ad.Tensor(np.asarray(logits), requires_grad=True)
    try:
        out = ad.cross_entropy(t, labels, class_weights)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out.backward()
    return float(out.data), t.grad


def config_from_file(path) -> LayerConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a LayerConfig object")
    return LayerConfig.from_json(data)
