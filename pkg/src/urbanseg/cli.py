"""Command-line front end: ``urbanseg <subcommand> [options]``.

Every option can also come from ``--config FILE.json``.  Top-level keys of the
file apply to any subcommand that knows them; a section named after the
subcommand (for example ``{"train": {"epochs": 40}}``) applies to that one only
and must not contain unknown keys.  Flags given on the command line win over
both.

Exit codes: 0 success, 1 invalid input or parameters, 2 unreadable or
malformed files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .bundle import read_arrays, write_array_bundle, write_arrays
from .core import (
    DEFAULT_MAPS,
    TARGET_SCHEMA,
    ClassSchema,
    get_schema,
    load_class_map,
    load_schema,
    register_schema,
    remap_labels,
    validate_cloud,
)
from .errors import FormatError, UrbanSegError, ValidationError
from .metrics import compute_report, confusion_matrix
from .network import LayerConfig, config_from_file, init_params
from .ply import atomic_write_bytes, read_ply, save_ply
from .postprocess import load_pipeline, run_pipeline
from .preprocess import Batch, make_batch, point_features, tile, tile_seed
from .spatial import build_index, knn
from .synth import SceneSpec, generate_scene, generate_source_scene, load_scene_spec
from .training import (
    BatchSettings,
    TrainConfig,
    balanced_class_weights,
    history_csv,
    predict_labels,
    train,
)
from .transfer import (
    init_from_source,
    load_checkpoint,
    load_correspondence,
    correspondence_from_names,
    save_checkpoint,
)

log = logging.getLogger("urbanseg")

# options that steer the run but never change its outputs
_RUNTIME_KEYS = {"config", "threads", "log_json", "log_level", "manifest", "command", "func"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps(
            {"level": record.levelname, "logger": record.name, "message": record.getMessage()},
            sort_keys=True,
        )


def _setup_logging(json_mode: bool, level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        _JsonFormatter() if json_mode else logging.Formatter("%(levelname)s %(name)s: %(message)s")
    )
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(path, args, inputs, outputs, seeds) -> None:
    params = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in _RUNTIME_KEYS}
    manifest = {
        "tool": "urbanseg",
        "version": __version__,
        "command": args.command,
        "parameters": params,
        "seeds": seeds,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "runtime": {"threads": args.threads},
    }
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    log.info("manifest written to %s", path)


def _manifest_path(args, primary) -> Path:
    return Path(args.manifest) if args.manifest else Path(f"{primary}.manifest.json")


def _need(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) in (None, [])]
    if missing:
        raise ValidationError(
            f"{args.command}: missing required option(s) "
            + ", ".join("--" + n.replace("_", "-") for n in missing)
        )


def _exists(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


def _schema(value) -> ClassSchema:
    """A registered schema name or a schema JSON file."""
    if value is None:
        return TARGET_SCHEMA
    if Path(value).suffix == ".json" or Path(value).is_file():
        return load_schema(value)
    return get_schema(value)


def _layer_config(args, base: LayerConfig | None = None) -> LayerConfig:
    cfg = config_from_file(args.layer_config) if args.layer_config else (base or LayerConfig())
    overrides = {}
    if getattr(args, "k", None) is not None:
        overrides["k"] = args.k
    if getattr(args, "decimation_ratio", None) is not None:
        overrides["decimation_ratio"] = args.decimation_ratio
    return replace(cfg, **overrides) if overrides else cfg


def _read_cloud(path, schema_value=None):
    schema_name = None if schema_value is None else _schema(schema_value).name
    return read_ply(path, schema_name=schema_name)


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> None:
    _need(args, "out")
    _exists(args.spec)
    if args.spec:
        spec = load_scene_spec(args.spec)
    else:
        spec = SceneSpec.source_default() if args.source else SceneSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    cloud = generate_source_scene(spec) if args.source else generate_scene(spec)
    save_ply(cloud, args.out, binary=not args.ascii)
    log.info("wrote %d points to %s", len(cloud), args.out)
    write_manifest(
        _manifest_path(args, args.out), args, [p for p in [args.spec] if p], [args.out], {"scene": spec.seed}
    )


def cmd_convert(args) -> None:
    _need(args, "input", "out")
    _exists(args.input)
    cloud = _read_cloud(args.input, args.schema)
    graph = knn(build_index(cloud.positions), None, args.k, include_self=True)
    write_array_bundle(graph, point_features(cloud), args.out)
    log.info("wrote %d x %d neighbour graph to %s", graph.indices.shape[0], graph.k, args.out)
    write_manifest(_manifest_path(args, args.out), args, [args.input], [args.out], {})


def _class_map_for(cloud, spec: str | None):
    if spec == "none":
        return None
    if spec in (None, "default"):
        return DEFAULT_MAPS.get(cloud.schema_name)
    return load_class_map(spec)


def cmd_preprocess(args) -> None:
    _need(args, "input", "out_dir")
    _exists(*args.input, None if args.class_map in (None, "default", "none") else args.class_map)
    layer = _layer_config(args)
    layer.check_points(args.n_points)
    clouds = []
    for path in args.input:
        cloud = _read_cloud(path, args.schema)
        cmap = _class_map_for(cloud, args.class_map)
        if cmap is not None:
            cloud = remap_labels(cloud, cmap)
        report = validate_cloud(cloud, get_schema(cloud.schema_name))
        if not report.ok:
            raise ValidationError(f"{path}: " + "; ".join(report.violations))
        clouds.append(cloud)
    schemas = {c.schema_name for c in clouds}
    if len(schemas) != 1:
        raise ValidationError(f"inputs use different schemas {sorted(schemas)}; pass --class-map")
    schema = get_schema(schemas.pop())
    layer = layer.with_classes(schema.num_classes)

    jobs = []
    for ci, cloud in enumerate(clouds):
        for key, members in tile(cloud, args.tile_size).ordered():
            jobs.append((ci, tuple(int(v) for v in key), members))

    def build(item):
        tid, (ci, _, members) = item
        return make_batch(clouds[ci].take(members), args.n_points, layer, tile_seed(args.seed, tid), tid)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, outputs = [], []
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        for tid, batch in enumerate(pool.map(build, enumerate(jobs))):
            ci, key, members = jobs[tid]
            path = out_dir / f"batch_{tid:05d}.pcb"
            write_arrays(path, batch.to_arrays())
            outputs.append(path)
            entries.append(
                {
                    "file": path.name,
                    "tile_id": tid,
                    "source": str(args.input[ci]),
                    "cell": list(key),
                    "points_in_tile": int(members.size),
                    "seed": batch.seed,
                    "sha256": sha256_file(path),
                }
            )
    index = {
        "schema": schema.to_json(),
        "layer_config": layer.to_json(),
        "n_points": args.n_points,
        "tile_size": args.tile_size,
        "seed": args.seed,
        "batches": entries,
    }
    index_path = out_dir / "batches.json"
    atomic_write_bytes(index_path, (json.dumps(index, indent=2, sort_keys=True) + "\n").encode())
    log.info("wrote %d batches to %s", len(entries), out_dir)
    write_manifest(
        Path(args.manifest) if args.manifest else out_dir / "manifest.json",
        args,
        args.input,
        [index_path, *outputs],
        {"global": args.seed, "tiles": {e["file"]: e["seed"] for e in entries}},
    )


def load_batch_dir(path):
    """Read a ``preprocess`` output directory -> (schema, LayerConfig, batches)."""
    path = Path(path)
    try:
        index = json.loads((path / "batches.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}/batches.json: invalid JSON: {exc}") from None
    try:
        schema = ClassSchema(index["schema"]["name"], tuple(index["schema"]["class_names"]))
        layer = LayerConfig.from_json(index["layer_config"])
        files = [e["file"] for e in index["batches"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}/batches.json: missing field {exc}") from None
    register_schema(schema)
    batches = [Batch.from_arrays(read_arrays(path / f), schema.name) for f in files]
    return schema, layer, batches, [path / f for f in files]


def _collect(dirs):
    schema = layer = None
    batches, files = [], []
    for d in dirs:
        s, lay, b, f = load_batch_dir(d)
        if schema is not None and (s != schema or lay != layer):
            raise ValidationError(f"{d}: schema or layer config differs from the other batch directories")
        schema, layer = s, lay
        batches += b
        files += f
    return schema, layer, batches, files


def _class_weights(value, batches, num_classes):
    if value in (None, "none"):
        return None
    if value == "balanced":
        return balanced_class_weights(batches, num_classes)
    try:
        w = [float(x) for x in (value if isinstance(value, list) else str(value).split(","))]
    except ValueError:
        raise ValidationError(f"class weights must be 'none', 'balanced' or numbers: {value!r}") from None
    if len(w) != num_classes:
        raise ValidationError(f"{len(w)} class weights given for {num_classes} classes")
    return w


def cmd_train(args) -> None:
    _need(args, "train", "val", "out")
    _exists(*args.train, *args.val, args.init)
    schema, layer, train_batches, train_files = _collect(args.train)
    vschema, vlayer, val_batches, val_files = _collect(args.val)
    if (vschema, vlayer) != (schema, layer):
        raise ValidationError("validation batches were built with a different schema or layer config")
    if args.init:
        params = load_checkpoint(args.init)
        if params.schema != schema:
            raise ValidationError(f"checkpoint schema {params.schema.name!r} != batch schema {schema.name!r}")
        if params.config != layer:
            raise ValidationError("checkpoint layer config differs from the one the batches were built with")
    else:
        params = init_params(_layer_config(args, layer), schema, seed=args.seed)
        if params.config != layer:
            raise ValidationError("--layer-config must match the config the batches were built with")
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        patience=args.patience,
        seed=args.seed,
        class_weights=_class_weights(args.class_weights, train_batches, schema.num_classes),
        freeze_backbone=args.freeze_backbone,
        augment=not args.no_augment,
    )
    best, history = train(train_batches, val_batches, params, cfg)
    best.provenance["train_seed"] = args.seed
    save_checkpoint(best, args.out)
    history_path = args.history or f"{args.out}.history.csv"
    atomic_write_bytes(history_path, history_csv(history).encode())
    log.info("best epoch %d of %d; checkpoint %s", best.provenance["best_epoch"], len(history), args.out)
    write_manifest(
        _manifest_path(args, args.out),
        args,
        [*train_files, *val_files, *([args.init] if args.init else [])],
        [args.out, history_path],
        {"train": args.seed},
    )


def cmd_transfer(args) -> None:
    _need(args, "source", "out")
    _exists(args.source, args.correspondence)
    source = load_checkpoint(args.source)
    target = _schema(args.target_schema)
    if args.correspondence:
        corr = load_correspondence(args.correspondence, target, source.schema)
    else:
        shared = {n: n for n in target.class_names if n in source.schema.class_names}
        corr = correspondence_from_names(shared, target, source.schema)
    params = init_from_source(source, target, corr, seed=args.seed)
    save_checkpoint(params, args.out)
    log.info("transferred %d classifier rows into %s", len(corr), target.name)
    write_manifest(
        _manifest_path(args, args.out),
        args,
        [p for p in (args.source, args.correspondence) if p],
        [args.out],
        {"head": args.seed},
    )


def cmd_predict(args) -> None:
    _need(args, "model", "input", "out")
    _exists(args.model, args.input)
    params = load_checkpoint(args.model)
    cloud = read_ply(args.input)
    settings = BatchSettings(args.n_points, args.tile_size, args.seed)
    labelled = predict_labels(cloud, params, settings, workers=args.threads)
    save_ply(labelled, args.out, binary=not args.ascii)
    write_manifest(
        _manifest_path(args, args.out), args, [args.model, args.input], [args.out], {"predict": args.seed}
    )


def cmd_postprocess(args) -> None:
    _need(args, "input", "rules", "out")
    _exists(args.input, args.rules)
    cloud = _read_cloud(args.input, args.schema)
    steps = load_pipeline(args.rules)
    cleaned, reports = run_pipeline(cloud, steps)
    save_ply(cleaned, args.out, binary=not args.ascii)
    report_path = args.report or f"{args.out}.report.json"
    body = {"steps": [r.to_json() for r in reports], "points_in": len(cloud), "points_out": len(cleaned)}
    atomic_write_bytes(report_path, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())
    for r in reports:
        log.info("%s: removed %d relabelled %d", r.name, r.points_removed, r.points_relabeled)
    write_manifest(
        _manifest_path(args, args.out), args, [args.input, args.rules], [args.out, report_path], {}
    )


def cmd_evaluate(args) -> None:
    _need(args, "truth", "pred", "out")
    _exists(args.truth, args.pred)
    truth = _read_cloud(args.truth, args.schema)
    pred = _read_cloud(args.pred, args.schema)
    if len(truth) != len(pred):
        raise ValidationError(f"length mismatch: truth has {len(truth)} points, prediction has {len(pred)}")
    if truth.labels is None or pred.labels is None:
        raise ValidationError("both clouds need per-point labels")
    schema = _schema(args.schema) if args.schema else get_schema(truth.schema_name)
    cm = confusion_matrix(truth.labels, pred.labels, schema.num_classes)
    report = compute_report(cm, schema.class_names)
    atomic_write_bytes(args.out, report.dumps().encode())
    outputs = [args.out]
    if args.text:
        atomic_write_bytes(args.text, report.to_text().encode())
        outputs.append(args.text)
    log.info("mIoU %s  overall accuracy %.4f", report.mean_iou, report.overall_accuracy)
    write_manifest(_manifest_path(args, args.out), args, [args.truth, args.pred], outputs, {})


# -- parser -----------------------------------------------------------------


def _common(p) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="JSON file with option values; flags override it")
    g.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    g.add_argument("--log-json", action="store_true", help="emit log records as JSON lines")
    g.add_argument("--log-level", default="info")
    g.add_argument("--manifest", help="manifest path (default: next to the primary output)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="urbanseg", description="Urban point-cloud semantic segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"urbanseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labelled synthetic scene")
    p.add_argument("--out", help="output PLY")
    p.add_argument("--spec", help="SceneSpec JSON")
    p.add_argument("--seed", type=int, help="scene seed (overrides the scene spec file)")
    p.add_argument("--source", action="store_true", help="8-class source scene instead of the target schema")
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="PLY -> PCB1 neighbour-graph bundle")
    p.add_argument("--input", help="input PLY")
    p.add_argument("--out", help="output bundle")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--schema", help="schema name or JSON file for the labels")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("preprocess", help="tile, remap and batch clouds for training")
    p.add_argument("--input", nargs="+", help="input PLY files")
    p.add_argument("--out-dir", help="directory for batch bundles and batches.json")
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--tile-size", type=float, default=250.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", help="schema of the input labels when the PLY does not name one")
    p.add_argument("--class-map", default="default", help="class map JSON, 'default' or 'none'")
    p.add_argument("--layer-config", help="LayerConfig JSON")
    p.add_argument("--k", type=int)
    p.add_argument("--decimation-ratio", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train or fine-tune on preprocessed batches")
    p.add_argument("--train", nargs="+", help="preprocess output directories")
    p.add_argument("--val", nargs="+", help="preprocess output directories")
    p.add_argument("--out", help="output PCSK checkpoint")
    p.add_argument("--init", help="start from this checkpoint (e.g. a transfer output)")
    p.add_argument("--layer-config", help="LayerConfig JSON for a fresh model")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-weights", default="none", help="'none', 'balanced' or comma-separated numbers")
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--no-augment", action="store_true", help="disable horizontal symmetry augmentation")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="re-head a checkpoint for a new class schema")
    p.add_argument("--source", help="source PCSK checkpoint")
    p.add_argument("--out", help="output PCSK checkpoint")
    p.add_argument("--target-schema", default=TARGET_SCHEMA.name, help="schema name or JSON file")
    p.add_argument("--correspondence", help="JSON {target class: source class}; default: equal names")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("predict", help="label a point cloud")
    p.add_argument("--model", help="PCSK checkpoint")
    p.add_argument("--input", help="input PLY")
    p.add_argument("--out", help="output PLY with predicted labels")
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--tile-size", type=float, default=250.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", help="run outlier, voxel, morphology and height filters")
    p.add_argument("--input", help="input PLY")
    p.add_argument("--rules", help="pipeline JSON (list of steps or of height rules)")
    p.add_argument("--out", help="output PLY")
    p.add_argument("--report", help="filter report JSON (default: <out>.report.json)")
    p.add_argument("--schema")
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="confusion-matrix metrics of a prediction")
    p.add_argument("--truth", help="PLY with reference labels")
    p.add_argument("--pred", help="PLY with predicted labels, same point order")
    p.add_argument("--out", help="MetricsReport JSON")
    p.add_argument("--text", help="also write the aligned text table here")
    p.add_argument("--schema")
    p.set_defaults(func=cmd_evaluate)

    for sp in sub.choices.values():
        _common(sp)
    return parser


def _apply_config(parser, args, argv):
    path = Path(args.config)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    sp = parser._subparsers._group_actions[0].choices[args.command]
    known = set(vars(sp.parse_args([]))) - _RUNTIME_KEYS - {"func"}
    commands = set(parser._subparsers._group_actions[0].choices)
    values = {}
    for key, value in data.items():
        key = key.replace("-", "_")
        if key in commands:
            continue
        if key in known:
            values[key] = value
    section = data.get(args.command, {})
    if not isinstance(section, dict):
        raise FormatError(f"{path}: section {args.command!r} must be an object")
    for key, value in section.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ValidationError(f"{path}: unknown option {key!r} for {args.command}")
        values[key] = value
    sp.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        if args.config:
            args = _apply_config(parser, args, argv)
        _setup_logging(args.log_json, args.log_level)
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        # single-threaded BLAS keeps floating-point reductions in a fixed order
        with threadpool_limits(limits=1):
            args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UrbanSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
