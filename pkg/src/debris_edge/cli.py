"""Command-line front end for the debris-edge toolkit.

Ten subcommands cover the full workflow: corpus generation, image
preprocessing, training, evaluation, grid sweeps, detection, the
telemetry broker, the streaming pipeline, device benchmarking, and
report rendering.  Machine-readable artifacts (CSV, JSONL, SVG, weight
files) are written under --out; standard output carries short human
summaries only.  Every subcommand accepts --seed, --out, and --config
(a JSON object supplying values for flags left off the command line).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

from .classifiers import (
    classification_metrics, confusion_matrix, confusion_to_csv,
)
from .experiments import (
    DEFAULT_CLASSES, GenSpec, RunRecord, SweepConfig, dataset_from_manifest,
    generate_dataset, lagged_correlation, loss_stats, make_toy_task,
    render_report, run_grid,
)
from .imaging import pnm_load, pnm_save
from .neuralnet import (
    EvalRecord, InferenceSettings, OptimizerConfig, TrainHistory,
    build_network, default_network_spec, dataset_to_arrays, history_to_csv,
    load_weights, predict_batch, save_weights, split_dataset, train,
)
from .pubsub import BrokerError, DEFAULT_PORT, DEFAULT_QUEUE_CAPACITY, start_broker
from .runtime import (
    DeviceProfile, FRAME_SUFFIXES, PipelineConfig, apply_chain, bench_to_csv,
    load_pipeline, normalize_chain, run_bench, run_pipeline, save_bench_chart,
)

log = logging.getLogger("debris_edge.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad or missing argument values; maps to exit code 2."""


def _configure_logging():
    raw = os.environ.get("DEBRIS_EDGE_LOG")
    if raw is None:
        level = logging.WARNING
    else:
        key = raw.strip().lower()
        if key not in _LOG_LEVELS:
            raise UsageError(
                f"DEBRIS_EDGE_LOG must be one of error, info, debug (got {raw!r})"
            )
        level = _LOG_LEVELS[key]
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("debris_edge").setLevel(level)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError("--config must hold a JSON object")
    return cfg


def _resolver(args: argparse.Namespace, config: dict):
    """Value lookup order: explicit flag, config key, supplied default."""

    def get(name: str, default=None, required: bool = False):
        value = getattr(args, name, None)
        if value is None:
            value = config.get(name, default)
        if required and value is None:
            flag = "--" + name.replace("_", "-")
            raise UsageError(f"missing {flag} (or config key {name!r})")
        return value

    return get


def _out_dir(get) -> Path:
    out = Path(get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_chain(value):
    # accepts a JSON string from the flag or a list from the config file
    if value is None:
        return ()
    if isinstance(value, str):
        value = json.loads(value)
    return tuple(entry if isinstance(entry, str) else (entry[0], dict(entry[1]))
                 for entry in value)


def _csv_list(value, convert):
    if isinstance(value, str):
        value = [part.strip() for part in value.split(",") if part.strip()]
    return tuple(convert(v) for v in value)


# --- subcommand handlers ----------------------------------------------------------


def _cmd_gen_data(get) -> int:
    classes = get("classes", 6)
    if isinstance(classes, int):
        if not 1 <= classes <= len(DEFAULT_CLASSES):
            raise UsageError(f"--classes must lie in 1..{len(DEFAULT_CLASSES)}")
        names = DEFAULT_CLASSES[:classes]
    else:
        names = _csv_list(classes, str)
    spec = GenSpec(
        per_class=int(get("per_class", 50)),
        seed=int(get("seed", 0)),
        classes=names,
        objects_min=int(get("objects_min", 1)),
        objects_max=int(get("objects_max", 5)),
    )
    out = _out_dir(get)
    records = generate_dataset(spec, out)
    print(f"wrote {len(records)} images and manifest.jsonl to {out}")
    return 0


def _cmd_preprocess(get) -> int:
    src = Path(get("input", required=True))
    chain = _parse_chain(get("chain", ["grayscale"]))
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    elif src.is_file():
        paths = [src]
    else:
        raise FileNotFoundError(f"input {src} does not exist")
    if not paths:
        raise UsageError(f"no frames under {src}")
    out = _out_dir(get)
    ops = normalize_chain(chain)
    for path in paths:
        img = apply_chain(ops, pnm_load(path))
        suffix = ".pgm" if img.channels == 1 else ".ppm"
        pnm_save(out / (path.stem + suffix), img)
    print(f"processed {len(paths)} images into {out}")
    return 0


def _solver_defaults(solver: str) -> tuple[float, float]:
    # calibrated on the synthetic corpus; SGD needs momentum to keep pace
    if solver == "adam":
        return 1e-3, 0.0
    return 0.02, 0.9


def _cmd_train(get) -> int:
    data_dir = Path(get("data", required=True))
    manifest = data_dir / "manifest.jsonl" if data_dir.is_dir() else data_dir
    data = dataset_from_manifest(manifest)
    solver = str(get("solver", "adam")).lower()
    if solver not in ("adam", "sgd"):
        raise UsageError("--solver must be adam or sgd")
    lr_default, momentum_default = _solver_defaults(solver)
    seed = int(get("seed", 0))
    input_size = int(get("input_size", 64))
    opt = OptimizerConfig(
        kind=solver,
        learning_rate=float(get("lr", lr_default)),
        max_iters=int(get("iters", 2000)),
        seed=seed,
        momentum=float(get("momentum", momentum_default)),
        batch_size=int(get("batch_size", 32)),
        eval_interval=int(get("eval_interval", 100)),
        early_stop_patience=int(get("patience", 5)),
    )
    spec = default_network_spec(len(data.class_names), input_size=input_size)
    net = build_network(spec, seed=seed)
    history = train(net, data, opt, float(get("split", 0.7)))
    out = _out_dir(get)
    (out / "model.wdn").write_bytes(save_weights(net))
    (out / "history.csv").write_text(history_to_csv(history), encoding="utf-8")
    (out / "classes.json").write_text(
        json.dumps(list(data.class_names)) + "\n", encoding="utf-8"
    )
    final = history.final
    print(
        f"trained {solver} to iteration {final.iteration} "
        f"in {history.wall_time_ms / 1000.0:.1f}s: "
        f"train acc {final.train_acc:.3f}, test acc {final.test_acc:.3f} "
        f"(model.wdn, history.csv in {out})"
    )
    return 0


def _cmd_eval(get) -> int:
    data_dir = Path(get("data", required=True))
    manifest = data_dir / "manifest.jsonl" if data_dir.is_dir() else data_dir
    model_path = Path(get("model", required=True))
    class_names = get("class_names")
    names_file = model_path.parent / "classes.json"
    if class_names is None and names_file.exists():
        class_names = json.loads(names_file.read_text(encoding="utf-8"))
    data = dataset_from_manifest(manifest, class_names)
    net = load_weights(model_path.read_bytes())
    split = get("split")
    if split is not None:
        _, data_eval = split_dataset(data, float(split), int(get("seed", 0)))
    else:
        data_eval = data
    x, labels = dataset_to_arrays(data_eval, net.spec.input_shape)
    probs = predict_batch(net, x, InferenceSettings())
    predicted = probs.argmax(axis=1)
    cm = confusion_matrix(labels, predicted, len(data.class_names))
    metrics = classification_metrics(cm)
    out = _out_dir(get)
    (out / "confusion.csv").write_text(
        confusion_to_csv(cm, data.class_names), encoding="utf-8"
    )
    print(
        f"evaluated {len(data_eval)} samples: accuracy {metrics.accuracy:.3f}, "
        f"macro f1 {metrics.macro_f1:.3f} (confusion.csv in {out})"
    )
    return 0


def _cmd_sweep(get) -> int:
    sweep = SweepConfig(
        input_sizes=_csv_list(get("input_sizes", (8,)), int),
        iters=_csv_list(get("iters", (60,)), int),
        solvers=_csv_list(get("solvers", ("Adam", "SGD")), str),
        nn_sizes=_csv_list(get("nn_sizes", (16,)), int),
        trials_per_config=int(get("trials", 1)),
        seed=int(get("seed", 0)),
    )
    records = run_grid(sweep, make_toy_task(), workers=int(get("workers", 1)))
    out = _out_dir(get)
    path = out / "records.json"
    path.write_text(
        json.dumps([_record_to_dict(r) for r in records]) + "\n", encoding="utf-8"
    )
    diverged = sum(1 for r in records if r.diverged_at is not None)
    print(f"swept {len(records)} runs ({diverged} diverged) into {path}")
    return 0


def _record_to_dict(rec: RunRecord) -> dict:
    def finite(v):
        return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

    history = None
    if rec.history is not None:
        history = {
            "wall_time_ms": rec.history.wall_time_ms,
            "records": [
                [e.iteration, e.train_loss, e.test_loss, e.train_acc, e.test_acc]
                for e in rec.history.records
            ],
        }
    return {
        "config_id": rec.config_id,
        "trial": rec.trial,
        "input_size": rec.input_size,
        "iters": rec.iters,
        "solver_type": rec.solver_type,
        "nn_size": rec.nn_size,
        "seed": rec.seed,
        "test_loss": finite(rec.test_loss),
        "train_loss": finite(rec.train_loss),
        "diverged_at": rec.diverged_at,
        "history": history,
    }


def _record_from_dict(d: dict) -> RunRecord:
    history = None
    if d.get("history") is not None:
        history = TrainHistory(wall_time_ms=d["history"]["wall_time_ms"])
        for row in d["history"]["records"]:
            history.append(EvalRecord(*row))

    def loss(v):
        return math.nan if v is None else float(v)

    return RunRecord(
        d["config_id"], d["trial"], d["input_size"], d["iters"],
        d["solver_type"], d["nn_size"], d["seed"],
        loss(d["test_loss"]), loss(d["train_loss"]), d["diverged_at"], history,
    )


def _cmd_report(get) -> int:
    records_path = Path(get("records", required=True))
    raw = json.loads(records_path.read_text(encoding="utf-8"))
    records = [_record_from_dict(d) for d in raw]
    if not records:
        raise UsageError(f"{records_path} holds no run records")

    finite = [r.test_loss for r in records if r.diverged_at is None]
    stats = loss_stats(finite) if len(finite) >= 2 else None

    correlations = None
    history = next(
        (r.history for r in records if r.history is not None and r.history.records),
        None,
    )
    if history is not None and len(history.records) >= 4:
        max_lag = min(int(get("max_lag", 5)), len(history.records) - 3)
        correlations = lagged_correlation(
            [e.train_loss for e in history.records],
            [e.test_loss for e in history.records],
            max_lag,
        )

    out = _out_dir(get)
    paths = render_report(records, stats, correlations, out)
    charts = [str(paths[k]) for k in ("losses", "correlations") if paths[k] is not None]
    summary = f"report table {paths['table']}"
    if charts:
        summary += ", charts " + ", ".join(charts)
    for note in paths["notes"]:
        summary += f" [{note}]"
    print(summary)
    return 0


def _pipeline_config(get, frame_source) -> PipelineConfig:
    kwargs = dict(
        frame_source=frame_source,
        detector=str(get("detector", "segment")),
        model_path=get("model"),
        preprocessing=_parse_chain(get("chain")),
        min_area=int(get("min_area", 400)),
        frame_delay_ms=float(get("frame_delay_ms", 0.0)),
        fps_assumed=float(get("fps_assumed", 30.0)),
    )
    for key in ("stats_topic", "detections_topic", "stride", "score_threshold",
                "nms_iou", "max_track_dist", "max_track_misses"):
        value = get(key)
        if value is not None:
            kwargs[key] = value
    window = get("window")
    if window is not None:
        kwargs["window"] = tuple(_csv_list(window, int))
    scales = get("scales")
    if scales is not None:
        kwargs["scales"] = _csv_list(scales, float)
    return PipelineConfig(**kwargs)


def _write_detections(path: Path, result, frames) -> int:
    total = 0
    with open(path, "w", encoding="utf-8") as fh:
        for fs, dets in zip(result.stats, result.detections):
            for d in dets:
                fh.write(json.dumps({
                    "frame": fs.frame,
                    "path": frames[fs.frame].name,
                    "x": d.box.x, "y": d.box.y, "w": d.box.w, "h": d.box.h,
                    "score": d.score, "class": d.class_index,
                }) + "\n")
                total += 1
    return total


def _cmd_detect(get) -> int:
    src = Path(get("input", required=True))
    out = _out_dir(get)
    if src.is_file():
        # stage the lone frame so probe validation sees exactly this image
        with tempfile.TemporaryDirectory() as tmp:
            staged = Path(tmp) / src.name
            shutil.copyfile(src, staged)
            pipe = load_pipeline(_pipeline_config(get, tmp))
            result = run_pipeline(pipe)
            frames = pipe.frames
    else:
        pipe = load_pipeline(_pipeline_config(get, src))
        limit = get("limit")
        result = run_pipeline(pipe, limit=None if limit is None else int(limit))
        frames = pipe.frames
    path = out / "detections.jsonl"
    total = _write_detections(path, result, frames)
    print(f"found {total} objects across {result.meters.frames} frames ({path})")
    return 0


def _cmd_serve_broker(get) -> int:
    host = str(get("host", "127.0.0.1"))
    port = int(get("port", DEFAULT_PORT))
    capacity = int(get("queue_capacity", DEFAULT_QUEUE_CAPACITY))
    run_seconds = get("run_seconds")
    broker = start_broker((host, port), queue_capacity=capacity)
    print(f"broker listening on {broker.address[0]}:{broker.address[1]}", flush=True)
    try:
        if run_seconds is None:
            while True:
                time.sleep(3600)
        else:
            time.sleep(float(run_seconds))
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    print("broker stopped")
    return 0


def _cmd_run_pipeline(get) -> int:
    cfg = _pipeline_config(get, Path(get("frames", required=True)))
    pipe = load_pipeline(cfg)
    workers = get("workers")
    batch = get("batch")
    profile = None
    if workers is not None or batch is not None:
        profile = DeviceProfile(
            "cli", int(workers or 1), int(batch or cfg.inference.max_batch)
        )
    limit = get("limit")
    broker = get("broker")
    result = run_pipeline(
        pipe,
        broker_address=broker,
        limit=None if limit is None else int(limit),
        profile=profile,
    )
    out = _out_dir(get)
    with open(out / "stats.jsonl", "w", encoding="utf-8") as fh:
        for fs in result.stats:
            fh.write(fs.to_json() + "\n")
    _write_detections(out / "detections.jsonl", result, pipe.frames)
    m = result.meters
    (out / "meters.json").write_text(json.dumps({
        "model_load_ms": m.model_load_ms,
        "total_inference_ms": m.total_inference_ms,
        "frames": m.frames,
        "fps": m.fps,
        "broker_drops": result.broker_drops,
    }, indent=2) + "\n", encoding="utf-8")
    print(
        f"processed {m.frames} frames at {m.fps:.2f} fps "
        f"(model load {m.model_load_ms:.1f} ms, inference {m.total_inference_ms:.1f} ms, "
        f"{result.broker_drops} publish drops); stats in {out}"
    )
    return 0


def _cmd_bench(get) -> int:
    cfg = _pipeline_config(get, Path(get("frames", required=True)))
    raw_profiles = get("profiles")
    if raw_profiles is None:
        profiles = [DeviceProfile("serial", 1, 32), DeviceProfile("quad", 4, 32)]
    else:
        if isinstance(raw_profiles, str):
            raw_profiles = json.loads(raw_profiles)
        profiles = [
            DeviceProfile(p["name"], int(p.get("worker_threads", 1)),
                          int(p.get("batch", 32)))
            for p in raw_profiles
        ]
    result = run_bench(cfg, profiles, int(get("count", 16)))
    out = _out_dir(get)
    (out / "bench.csv").write_text(bench_to_csv(result), encoding="utf-8")
    save_bench_chart(result, out / "bench.svg")
    for profile, m in result.rows:
        print(
            f"{profile.name}: load {m.model_load_ms:.1f} ms, "
            f"inference {m.total_inference_ms:.1f} ms, {m.fps:.2f} fps"
        )
    for warning in result.warnings:
        print(f"warning: {warning}")
    print(f"bench.csv and bench.svg in {out}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "detect": _cmd_detect,
    "serve-broker": _cmd_serve_broker,
    "run-pipeline": _cmd_run_pipeline,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


# --- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debris-edge",
        description="Detect and classify floating debris on edge-grade hardware.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, help="deterministic seed (default 0)")
        p.add_argument("--out", help="output directory (default ./out)")
        p.add_argument("--config",
                       help="JSON object supplying values for omitted flags")
        return p

    p = add("gen-data", "write a synthetic labeled corpus plus manifest")
    p.add_argument("--classes", type=int, help="number of debris classes (1..6)")
    p.add_argument("--per-class", type=int, dest="per_class",
                   help="images per class (default 50)")
    p.add_argument("--objects-min", type=int, dest="objects_min")
    p.add_argument("--objects-max", type=int, dest="objects_max")

    p = add("preprocess", "apply a filter chain to PNM images")
    p.add_argument("--input", help="source image or directory")
    p.add_argument("--chain",
                   help='JSON chain, e.g. \'["grayscale", ["gaussian", {"sigma": 1.5}]]\'')

    p = add("train", "train the default network on a generated corpus")
    p.add_argument("--data", help="corpus directory or manifest path")
    p.add_argument("--split", type=float, help="train fraction (default 0.7)")
    p.add_argument("--solver", help="adam or sgd (default adam)")
    p.add_argument("--iters", type=int, help="iteration budget (default 2000)")
    p.add_argument("--lr", type=float, help="learning rate (solver-specific default)")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--patience", type=int, help="early-stop patience in evals")
    p.add_argument("--input-size", type=int, dest="input_size",
                   help="square input edge (default 64)")

    p = add("eval", "score a trained model and write its confusion matrix")
    p.add_argument("--data", help="corpus directory or manifest path")
    p.add_argument("--model", help="weight file from train")
    p.add_argument("--split", type=float,
                   help="evaluate the held-out side of this train fraction")

    p = add("sweep", "run a hyperparameter grid on the built-in toy task")
    p.add_argument("--input-sizes", dest="input_sizes", help="comma-separated")
    p.add_argument("--iters", help="comma-separated")
    p.add_argument("--solvers", help="comma-separated (Adam, SGD)")
    p.add_argument("--nn-sizes", dest="nn_sizes", help="comma-separated")
    p.add_argument("--trials", type=int, help="trials per configuration")
    p.add_argument("--workers", type=int, help="parallel trial runners")

    p = add("detect", "run a detector over an image or frame directory")
    p.add_argument("--input", help="PNM image or directory")
    p.add_argument("--detector", help="segment, sliding_window, or cnn_classify")
    p.add_argument("--model", help="weight file (detector-dependent)")
    p.add_argument("--chain", help="preprocessing chain (JSON)")
    p.add_argument("--min-area", type=int, dest="min_area")
    p.add_argument("--limit", type=int, help="stop after this many frames")

    p = add("serve-broker", "run the telemetry pub/sub broker")
    p.add_argument("--host")
    p.add_argument("--port", type=int, help=f"default {DEFAULT_PORT}; 0 = ephemeral")
    p.add_argument("--queue-capacity", type=int, dest="queue_capacity")
    p.add_argument("--run-seconds", type=float, dest="run_seconds",
                   help="stop after this long (default: run until interrupted)")

    p = add("run-pipeline", "stream frames through preprocess, detect, and publish")
    p.add_argument("--frames", help="frame directory or manifest")
    p.add_argument("--detector", help="segment, sliding_window, or cnn_classify")
    p.add_argument("--model", help="weight file (detector-dependent)")
    p.add_argument("--chain", help="preprocessing chain (JSON)")
    p.add_argument("--min-area", type=int, dest="min_area")
    p.add_argument("--limit", type=int)
    p.add_argument("--workers", type=int, help="inference threads")
    p.add_argument("--batch", type=int, help="inference batch size")
    p.add_argument("--broker", help="host:port of a running broker")
    p.add_argument("--frame-delay-ms", type=float, dest="frame_delay_ms")

    p = add("bench", "compare device profiles over an identical frame set")
    p.add_argument("--frames", help="frame directory or manifest")
    p.add_argument("--detector")
    p.add_argument("--model")
    p.add_argument("--chain", help="preprocessing chain (JSON)")
    p.add_argument("--min-area", type=int, dest="min_area")
    p.add_argument("--count", type=int, help="frames per profile (default 16)")
    p.add_argument("--profiles",
                   help='JSON list, e.g. \'[{"name": "quad", "worker_threads": 4}]\'')

    p = add("report", "render sweep records as CSV plus SVG charts")
    p.add_argument("--records", help="records.json from sweep")
    p.add_argument("--max-lag", type=int, dest="max_lag",
                   help="lag window for train/test correlation (default 5)")

    return parser


def cli_dispatch(argv=None) -> int:
    """Route argv to a subcommand; return the process exit code."""
    try:
        _configure_logging()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for --help and usage errors
        return int(exc.code or 0)
    try:
        get = _resolver(args, _load_config(args.config))
        return _HANDLERS[args.command](get)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BrokerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError, TypeError) as exc:
        log.debug("subcommand failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
