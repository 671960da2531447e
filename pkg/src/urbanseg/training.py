"""Adam, the training loop with early stopping, and tiled inference."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import PointCloud
from .errors import ValidationError
from .metrics import ConfusionMatrix, accumulate, compute_report
from .network import Context, ModelParams, forward, forward_tensor, is_head
from .preprocess import DESK_N_POINTS, make_batch, tile, tile_seed

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValidationError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 10
    seed: int = 0
    class_weights: list[float] | None = None
    freeze_backbone: bool = False
    augment: bool = True


def dihedral_xy(positions: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 symmetries of the square to the xy columns.

    Only swaps and sign flips are used, so the result is exact and pairwise
    distances (hence every neighbour graph) are unchanged.
    """
    out = positions.copy()
    if code & 4:
        out[:, [0, 1]] = out[:, [1, 0]]
    if code & 1:
        out[:, 0] = -out[:, 0]
    if code & 2:
        out[:, 1] = -out[:, 1]
    return out


def augment_batch(batch, rng: np.random.Generator):
    """Random square symmetry plus a random horizontal shift of up to half the
    batch's xy extent.  Neighbour graphs are reused unchanged: the symmetry
    keeps distances exact and the shift only moves them by rounding."""
    code = int(rng.integers(8))
    pos0 = batch.level_positions[0]
    half = 0.5 * (pos0[:, :2].max(axis=0) - pos0[:, :2].min(axis=0)) if len(pos0) else np.zeros(2)
    shift = np.zeros(3)
    shift[:2] = rng.uniform(-1.0, 1.0, size=2) * half
    return replace(batch, level_positions=[dihedral_xy(p, code) + shift for p in batch.level_positions])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_miou: float


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_miou"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_miou)])
    return buf.getvalue()


def balanced_class_weights(batches, num_classes: int) -> list[float]:
    """Inverse square-root class frequency over the batch labels, scaled to mean 1
    over the classes that occur.  Absent classes get weight 1."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for b in batches:
        counts += np.bincount(b.labels, minlength=num_classes)[:num_classes]
    present = counts > 0
    if not present.any():
        raise ValidationError("no labels to weight")
    w = np.ones(num_classes)
    w[present] = 1.0 / np.sqrt(counts[present] / counts.sum())
    w[present] /= w[present].mean()
    return [float(x) for x in w]


def predict_batch(batch, params: ModelParams) -> np.ndarray:
    """Argmax class per batch row (ties go to the lowest class id)."""
    return np.argmax(forward(batch, params, "eval"), axis=1)


def validation_miou(batches, params: ModelParams) -> float:
    cm = ConfusionMatrix.empty(params.config.num_classes)
    for b in batches:
        cm = accumulate(cm, b.labels, predict_batch(b, params))
    miou = compute_report(cm).mean_iou
    return 0.0 if miou is None else miou


def train(
    train_batches,
    val_batches,
    params: ModelParams,
    config: TrainConfig | None = None,
    evaluate=None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Shuffled per-batch Adam with early stopping on validation mIoU.

    With ``config.augment`` every step sees its batch under a random square
    symmetry and shift of the horizontal plane, which stops the network from
    keying on where a class happens to sit inside a tile.

    Training stops once ``patience`` consecutive epochs pass without a strict
    improvement; the parameters of the best epoch are returned.  ``evaluate``
    overrides the validation score (called as ``evaluate(val_batches, params)``).
    """
    config = config or TrainConfig()
    train_batches, val_batches = list(train_batches), list(val_batches)
    if not train_batches or not val_batches:
        raise ValidationError("training needs at least one train and one validation batch")
    for b in train_batches:
        if b.labels is None:
            raise ValidationError("training batch without labels")
    evaluate = evaluate or validation_miou
    params = params.copy()
    names = [n for n in params.trainable_names() if is_head(n) or not config.freeze_backbone]
    state = AdamState()
    best, best_score, since_best = params.copy(), -np.inf, 0
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_batches))
        losses = []
        for step, bi in enumerate(order):
            batch = train_batches[bi]
            if config.augment:
                batch = augment_batch(batch, np.random.default_rng([config.seed, epoch, step, 1]))
            ctx = Context(params, train=True, seed=[config.seed, epoch, step], trainable=names)
            logits = forward_tensor(batch, ctx)
            loss = ad.cross_entropy(logits, batch.labels, config.class_weights)
            loss.backward()
            grads = {n: ctx.leaves[n].grad for n in names if ctx.leaves[n].grad is not None}
            adam_step(params.tensors, grads, state, config.lr, config.betas, config.eps)
            losses.append(float(loss.data))
        score = float(evaluate(val_batches, params))
        history.append(EpochRecord(epoch, float(np.mean(losses)), score))
        log.info("epoch %d train_loss %.5f val_miou %.4f", epoch, history[-1].train_loss, score)
        if score > best_score:
            best, best_score, since_best = params.copy(), score, 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    best.provenance = dict(best.provenance)
    best.provenance["best_epoch"] = int(max(history, key=lambda r: r.val_miou).epoch)
    best.provenance["epochs_run"] = len(history)
    return best, history


@dataclass
class BatchSettings:
    n_points: int = DESK_N_POINTS
    tile_size: float = 250.0
    seed: int = 0


def _predict_tile(cloud: PointCloud, members, tile_id: int, params: ModelParams, settings):
    seed = tile_seed(settings.seed, tile_id)
    perm = members[np.random.default_rng(seed).permutation(members.size)]
    if members.size <= settings.n_points:
        chunks = [members]
    else:
        chunks = np.array_split(perm, int(np.ceil(members.size / settings.n_points)))
    rows_out, pred_out = [], []
    for ci, chunk in enumerate(chunks):
        batch = make_batch(cloud.take(chunk), settings.n_points, params.config, seed=seed + ci, tile_id=tile_id)
        rows_out.append(chunk[batch.source_indices])
        pred_out.append(predict_batch(batch, params))
    return np.concatenate(rows_out), np.concatenate(pred_out)


def predict_labels(
    cloud: PointCloud, params: ModelParams, settings: BatchSettings | None = None, workers: int = 1
):
    """Label every point of ``cloud``.

    Each tile is shuffled and cut into chunks of ``n_points``; a short last
    chunk is padded by resampling.  Every point is predicted at least once and
    a point predicted more than once keeps the label of its last write.
    Tiles are disjoint and seeded by their id, so ``workers`` does not change
    the result.
    """
    settings = settings or BatchSettings()
    params.config.check_points(settings.n_points)
    labels = np.zeros(len(cloud), dtype=np.int64)
    tiles = list(tile(cloud, settings.tile_size).ordered())

    def run(item):
        tile_id, (_, members) = item
        return _predict_tile(cloud, members, tile_id, params, settings)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for rows, pred in pool.map(run, enumerate(tiles)):
            _, last_rev = np.unique(rows[::-1], return_index=True)
            last = rows.size - 1 - last_rev
            labels[rows[last]] = pred[last]
    return cloud.with_labels(labels, params.schema.name)
