"""Desk-scale transfer experiment: pre-train on 8-class source scenes, transfer
to the 5-class target schema, fine-tune, and compare against training from
scratch."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field


from .core import SYNTH_SOURCE_SCHEMA, TARGET_SCHEMA
from .metrics import compute_report, confusion_matrix
from .network import LayerConfig, init_params
from .preprocess import make_batch, resample_to_count
from .synth import SceneSpec, generate_scene, generate_source_scene
from .training import BatchSettings, balanced_class_weights, TrainConfig, predict_labels, train
from .transfer import correspondence_from_names, init_from_source

log = logging.getLogger(__name__)

DEFAULT_CORRESPONDENCE = {"Vegetation": "Vegetation", "Building": "Building", "Water": "Water"}


@dataclass
class ExperimentConfig:
    n_points: int = 4096
    n_train: int = 3
    n_val: int = 1
    n_test: int = 1
    source_epochs: int = 30
    finetune_epochs: int = 30
    compare_epoch: int = 5
    patience: int = 10
    lr: float = 1e-3
    seed: int = 7
    balanced_weights: bool = True
    layer: LayerConfig = field(default_factory=LayerConfig)
    correspondence: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_CORRESPONDENCE))


def _batches(clouds, cfg: ExperimentConfig, layer: LayerConfig, base_seed: int):
    return [
        make_batch(c, cfg.n_points, layer, seed=base_seed + i, tile_id=i) for i, c in enumerate(clouds)
    ]


def run_transfer_experiment(cfg: ExperimentConfig | None = None) -> dict:
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    s = cfg.seed * 1000
    n_src = cfg.n_train + cfg.n_val
    n_tgt = cfg.n_train + cfg.n_val + cfg.n_test
    source_clouds = [generate_source_scene(SceneSpec.source_default(seed=s + i)) for i in range(n_src)]
    target_clouds = [generate_scene(SceneSpec(seed=s + 100 + i)) for i in range(n_tgt)]

    src_layer = cfg.layer.with_classes(SYNTH_SOURCE_SCHEMA.num_classes)
    tgt_layer = cfg.layer.with_classes(TARGET_SCHEMA.num_classes)
    src_batches = _batches(source_clouds, cfg, src_layer, s)
    tgt_batches = _batches(target_clouds[: cfg.n_train + cfg.n_val], cfg, tgt_layer, s + 100)
    src_train, src_val = src_batches[: cfg.n_train], src_batches[cfg.n_train :]
    tgt_train, tgt_val = tgt_batches[: cfg.n_train], tgt_batches[cfg.n_train :]

    def tc(epochs, seed, batches, num_classes):
        weights = balanced_class_weights(batches, num_classes) if cfg.balanced_weights else None
        return TrainConfig(epochs=epochs, lr=cfg.lr, patience=cfg.patience, seed=seed, class_weights=weights)

    pre, pre_hist = train(
        src_train, src_val, init_params(src_layer, SYNTH_SOURCE_SCHEMA, seed=cfg.seed), tc(cfg.source_epochs, cfg.seed, src_train, src_layer.num_classes)
    )
    corr = correspondence_from_names(cfg.correspondence, TARGET_SCHEMA, SYNTH_SOURCE_SCHEMA)
    start = init_from_source(pre, TARGET_SCHEMA, corr, seed=cfg.seed + 1)
    tuned, tune_hist = train(tgt_train, tgt_val, start, tc(cfg.finetune_epochs, cfg.seed + 2, tgt_train, tgt_layer.num_classes))
    _, scratch_hist = train(
        tgt_train,
        tgt_val,
        init_params(tgt_layer, TARGET_SCHEMA, seed=cfg.seed + 3),
        tc(cfg.compare_epoch, cfg.seed + 2, tgt_train, tgt_layer.num_classes),
    )

    reports = []
    for i, cloud in enumerate(target_clouds[cfg.n_train + cfg.n_val :]):
        test = resample_to_count(cloud, cfg.n_points, seed=s + 500 + i)
        pred = predict_labels(test, tuned, BatchSettings(cfg.n_points, 1e6, seed=s + 600 + i))
        cm = confusion_matrix(test.labels, pred.labels, TARGET_SCHEMA.num_classes)
        reports.append(compute_report(cm, TARGET_SCHEMA.class_names))

    def at(hist, epoch):
        return next((r.val_miou for r in hist if r.epoch == epoch), None)

    return {
        "pretrain_history": pre_hist,
        "finetune_history": tune_hist,
        "scratch_history": scratch_hist,
        "finetuned_val_miou_at_compare": at(tune_hist, cfg.compare_epoch),
        "scratch_val_miou_at_compare": at(scratch_hist, cfg.compare_epoch),
        "test_reports": reports,
        "params": tuned,
        "seconds": time.perf_counter() - t0,
    }
