"""Semantic segmentation of urban point clouds with a RandLA-Net style network
in plain NumPy: PLY and binary bundle I/O, exact neighbour search, tiling and
batching, training with transfer between class schemas, rule-based
post-processing, metrics and a synthetic scene generator."""

__version__ = "0.1.0"

from .core import (
    DEFAULT_MAPS,
    TARGET_SCHEMA,
    ClassMap,
    ClassSchema,
    PointCloud,
    class_histogram,
    get_schema,
    remap_labels,
    validate_cloud,
)
from .errors import FormatError, UrbanSegError, ValidationError
from .metrics import ConfusionMatrix, MetricsReport, compute_report, confusion_matrix
from .network import LayerConfig, ModelParams, forward, init_params
from .ply import read_ply, write_ply
from .preprocess import make_batch, tile
from .spatial import KdTree, NeighborGraph, build_index, knn, radius_neighbors
from .synth import SceneSpec, generate_scene, generate_source_scene
from .training import TrainConfig, predict_labels, train
from .transfer import init_from_source, load_checkpoint, save_checkpoint

__all__ = [
    "DEFAULT_MAPS",
    "TARGET_SCHEMA",
    "ClassMap",
    "ClassSchema",
    "ConfusionMatrix",
    "FormatError",
    "KdTree",
    "LayerConfig",
    "MetricsReport",
    "ModelParams",
    "NeighborGraph",
    "PointCloud",
    "SceneSpec",
    "TrainConfig",
    "UrbanSegError",
    "ValidationError",
    "build_index",
    "class_histogram",
    "compute_report",
    "confusion_matrix",
    "forward",
    "generate_scene",
    "generate_source_scene",
    "get_schema",
    "init_from_source",
    "init_params",
    "knn",
    "load_checkpoint",
    "make_batch",
    "predict_labels",
    "radius_neighbors",
    "read_ply",
    "remap_labels",
    "save_checkpoint",
    "tile",
    "train",
    "validate_cloud",
    "write_ply",
]
