"""Frame-loop inference pipeline, performance meters, and device benchmarks.

A pipeline consumes numbered PNM frames in filename order, applies an
imaging preprocessing chain, runs one of three detectors, suppresses
overlaps, feeds a centroid tracker, and publishes per-frame statistics
to a broker (or swallows them in null-sink mode).  Device profiles
abstract execution targets as worker-thread/batch pairs so throughput
comparisons stay reproducible on any host.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifiers import LinearSvmModel
from .detection import CentroidTracker, Detection, nms, segment_detect, sliding_window_detect
from .features import HogParams
from .imaging import (
    FilterParams,
    Image,
    PnmError,
    adjust_contrast_brightness,
    gaussian_blur,
    median_filter,
    negate,
    pnm_load,
    reorder_channels,
    resize_bilinear,
    threshold,
    to_grayscale,
)
from .neuralnet import (
    DenseSpec,
    InferenceSettings,
    Network,
    NetworkSpec,
    SoftmaxSpec,
    build_network,
    dense,
    load_weights,
    predict_batch,
    softmax,
)
from .pubsub import BrokerClient, BrokerError
from . import plotting

log = logging.getLogger("debris_edge.runtime")

DETECTOR_KINDS = ("segment", "sliding_window", "cnn_classify")
FRAME_SUFFIXES = (".pgm", ".ppm", ".pnm")


class PipelineError(ValueError):
    """Configuration or validation failure while assembling a pipeline."""


# --- preprocessing chain ----------------------------------------------------------

_CHAIN_OPS = {
    "grayscale": lambda img: to_grayscale(img),
    "negate": lambda img: negate(img),
    "median": lambda img, kernel_size=3: median_filter(img, kernel_size),
    "gaussian": lambda img, sigma=1.0: gaussian_blur(img, sigma),
    "threshold": lambda img, t=-1: threshold(img, t),
    "contrast": lambda img, alpha=1.0, beta=0.0: adjust_contrast_brightness(img, alpha, beta),
    "reorder": lambda img: reorder_channels(img),
    "resize": lambda img, width, height: resize_bilinear(img, width, height),
}


def normalize_chain(chain) -> tuple[tuple[str, dict], ...]:
    """Accept entries as "name" or ("name", {kwargs}); reject unknown ops."""
    out = []
    for entry in chain:
        if isinstance(entry, str):
            name, kwargs = entry, {}
        else:
            name, kwargs = entry[0], dict(entry[1])
        if name not in _CHAIN_OPS:
            raise PipelineError(f"unknown preprocessing op {name!r}")
        out.append((name, kwargs))
    return tuple(out)


def apply_chain(chain, img: Image) -> Image:
    for name, kwargs in chain:
        img = _CHAIN_OPS[name](img, **kwargs)
    return img


# --- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    frame_source: str | Path
    detector: str = "segment"
    model_path: str | Path | None = None
    preprocessing: tuple = ()
    fps_assumed: float = 30.0
    stats_topic: str = "debris/stats"
    detections_topic: str = "debris/detections"
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    # segment / cnn_classify proposals
    filter_params: FilterParams = field(default_factory=lambda: FilterParams(kernel_size=5, sigma=1.0))
    min_area: int = 400
    # sliding-window scoring
    hog: HogParams = field(default_factory=HogParams)
    window: tuple[int, int] = (64, 64)
    stride: int = 16
    scales: tuple[float, ...] = (1.0,)
    score_threshold: float = 0.0
    nms_iou: float = 0.45
    # tracking
    max_track_dist: float = 60.0
    max_track_misses: int = 5
    # artificial per-frame latency, for calibration fixtures
    frame_delay_ms: float = 0.0

    def __post_init__(self):
        if self.detector not in DETECTOR_KINDS:
            raise PipelineError(f"detector must be one of {DETECTOR_KINDS}")
        if self.fps_assumed <= 0:
            raise PipelineError("fps_assumed must be positive")
        if self.frame_delay_ms < 0:
            raise PipelineError("frame_delay_ms must be >= 0")
        object.__setattr__(self, "preprocessing", normalize_chain(self.preprocessing))


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    worker_threads: int = 1
    batch: int = 32

    def __post_init__(self):
        if self.worker_threads < 1 or self.batch < 1:
            raise ValueError("worker_threads and batch must be >= 1")


@dataclass(frozen=True)
class PerfMeters:
    model_load_ms: float
    total_inference_ms: float
    frames: int
    fps: float


@dataclass(frozen=True)
class FrameStats:
    frame: int
    entity_count: int
    inference_ms: float
    avg_duration_s: float

    def to_json(self) -> str:
        return json.dumps({
            "frame": self.frame,
            "count": self.entity_count,
            "inference_ms": self.inference_ms,
            "avg_duration_s": self.avg_duration_s,
        })


# --- linear-model bridge ----------------------------------------------------------

def svm_as_network(model: LinearSvmModel) -> Network:
    """Wrap per-class affine scorers as a dense+softmax network so they
    can ride the standard weight file format."""
    spec = NetworkSpec((model.dimension,), (dense(model.weights.shape[0]), softmax()))
    net = build_network(spec, seed=0)
    layer = net.layers[0]
    layer.params["w"][:] = model.weights.T.astype(net.dtype)
    layer.params["b"][:] = model.biases.astype(net.dtype)
    return net


def network_as_svm(net: Network) -> LinearSvmModel:
    """Inverse of svm_as_network; raises unless the net is dense+softmax
    over a flat input (softmax keeps the argmax, scores come out raw)."""
    kinds = tuple(type(l) for l in net.spec.layers)
    if len(net.spec.input_shape) != 1 or kinds != (DenseSpec, SoftmaxSpec):
        raise PipelineError("sliding-window weights must be a single dense layer over a flat input")
    w = np.asarray(net.layers[0].params["w"], dtype=np.float64)
    b = np.asarray(net.layers[0].params["b"], dtype=np.float64)
    return LinearSvmModel(w.T, b, lam=0.0, epochs=0)


# --- pipeline assembly ------------------------------------------------------------

@dataclass
class Pipeline:
    config: PipelineConfig
    frames: tuple[Path, ...]
    network: Network | None
    svm: LinearSvmModel | None
    model_load_ms: float


def _list_frames(source) -> tuple[Path, ...]:
    src = Path(source)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    elif src.is_file():
        base = src.parent
        paths = []
        with open(src, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    paths.append(base / json.loads(line)["path"])
    else:
        raise FileNotFoundError(f"frame source {src} does not exist")
    if not paths:
        raise PipelineError(f"frame source {src} holds no frames")
    return tuple(paths)


def load_pipeline(cfg: PipelineConfig) -> Pipeline:
    """Resolve frames, deserialize the model (timed), validate the chain
    and detector against a probe frame.  Raises before constructing any
    pipeline state, so a failed load leaves nothing half-built."""
    frames = _list_frames(cfg.frame_source)

    network = None
    svm = None
    model_load_ms = 0.0
    if cfg.model_path is not None:
        blob = Path(cfg.model_path).read_bytes()
        t0 = time.perf_counter()
        network = load_weights(blob)
        model_load_ms = (time.perf_counter() - t0) * 1000.0
    if cfg.detector == "sliding_window":
        if network is None:
            raise PipelineError("sliding_window detector needs model_path")
        svm = network_as_svm(network)
    if cfg.detector == "cnn_classify" and network is None:
        raise PipelineError("cnn_classify detector needs model_path")

    pipe = Pipeline(cfg, frames, network, svm, model_load_ms)
    try:
        probe = pnm_load(frames[0])
        _detect_one(pipe, apply_chain(cfg.preprocessing, probe))
    except (ValueError, PnmError) as exc:
        raise PipelineError(f"probe-frame validation failed: {exc}") from exc
    return pipe


def _classify_crops(pipe: Pipeline, img: Image, proposals, batch: int):
    net = pipe.network
    h, w, c = net.spec.input_shape
    gray = to_grayscale(img)
    crops = np.empty((len(proposals), h, w, c), dtype=np.float32)
    for i, det in enumerate(proposals):
        b = det.box
        patch = Image(gray.pixels[b.y : b.y + b.h, b.x : b.x + b.w])
        crops[i] = resize_bilinear(patch, w, h).pixels.astype(np.float32) / 255.0
    settings = InferenceSettings(max_batch=batch)
    probs = np.concatenate([
        predict_batch(net, crops[i : i + batch], settings)
        for i in range(0, len(crops), batch)
    ])
    return [
        replace(det, score=float(p.max()), class_index=int(p.argmax()))
        for det, p in zip(proposals, probs)
    ]


def _detect_one(pipe: Pipeline, img: Image, batch: int | None = None) -> tuple[list, float]:
    """Detector dispatch; returns (post-NMS detections, inference ms).

    Preprocessing happens outside this call so the reported inference
    time covers detection and classification only.
    """
    cfg = pipe.config
    t0 = time.perf_counter()
    if cfg.detector == "segment":
        dets = segment_detect(img, cfg.filter_params, cfg.min_area)
    elif cfg.detector == "sliding_window":
        dets = sliding_window_detect(
            img, pipe.svm, cfg.hog, cfg.window, cfg.stride, cfg.scales, cfg.score_threshold
        )
    else:
        proposals = segment_detect(img, cfg.filter_params, cfg.min_area)
        dets = []
        if proposals:
            dets = _classify_crops(pipe, img, proposals, batch or cfg.inference.max_batch)
    dets = nms(dets, cfg.nms_iou)
    return dets, (time.perf_counter() - t0) * 1000.0


# --- pipeline execution -----------------------------------------------------------

@dataclass
class PipelineResult:
    meters: PerfMeters
    stats: list[FrameStats]
    detections: list[list[Detection]]
    broker_drops: int


class _NullSink:
    def publish(self, topic: str, payload: str):
        pass

    def close(self):
        pass


def _put_unless_aborted(out_q: queue.Queue, item, abort: threading.Event) -> bool:
    while not abort.is_set():
        try:
            out_q.put(item, timeout=0.1)
            return True
        except queue.Full:
            continue
    return False


def _decode_stage(paths, out_q: queue.Queue, total_box: dict, workers: int, abort: threading.Event):
    seq = 0
    for path in paths:
        if abort.is_set():
            break
        try:
            img = pnm_load(path)
        except (OSError, PnmError) as exc:
            log.warning("skipping unreadable frame %s: %s", path, exc)
            continue
        if not _put_unless_aborted(out_q, (seq, img), abort):
            break
        seq += 1
    total_box["total"] = seq
    for _ in range(workers):
        out_q.put(None)


def _inference_stage(pipe: Pipeline, batch: int, in_q: queue.Queue,
                     out_q: queue.Queue, abort: threading.Event):
    delay_s = pipe.config.frame_delay_ms / 1000.0
    while True:
        item = in_q.get()
        if item is None:
            break
        seq, img = item
        if abort.is_set():
            continue
        try:
            img = apply_chain(pipe.config.preprocessing, img)
            dets, ms = _detect_one(pipe, img, batch)
            if delay_s:
                time.sleep(delay_s)
            out_q.put((seq, dets, ms, None))
        except Exception as exc:  # surfaced by the publisher
            abort.set()
            out_q.put((seq, [], 0.0, exc))


def run_pipeline(pipe: Pipeline, broker_address=None, limit: int | None = None,
                 profile: DeviceProfile | None = None) -> PipelineResult:
    """Consume frames in order through decode -> inference -> publish
    stages and return meters plus everything that was (or would have
    been) published.

    broker_address None selects null-sink mode: stats are computed and
    returned but nothing leaves the process.  Publish failures never
    stall the loop; they increment the drop counter.
    """
    cfg = pipe.config
    workers = profile.worker_threads if profile else 1
    batch = profile.batch if profile else cfg.inference.max_batch
    paths = pipe.frames[:limit] if limit is not None else pipe.frames

    if broker_address is None:
        sink = _NullSink()
    else:
        if isinstance(broker_address, str):
            host, _, port = broker_address.rpartition(":")
        else:
            host, port = broker_address
        sink = BrokerClient(host, int(port))

    tracker = CentroidTracker(cfg.max_track_dist, cfg.max_track_misses, cfg.fps_assumed)
    stats: list[FrameStats] = []
    detections: list[list[Detection]] = []
    drops = 0
    total_inference_ms = 0.0
    abort = threading.Event()
    in_q: queue.Queue = queue.Queue(maxsize=2 * workers + 2)
    out_q: queue.Queue = queue.Queue()
    total_box: dict = {"total": None}

    t_loop = time.perf_counter()
    threads = [threading.Thread(
        target=_decode_stage, args=(paths, in_q, total_box, workers, abort), daemon=True
    )]
    threads.extend(
        threading.Thread(
            target=_inference_stage, args=(pipe, batch, in_q, out_q, abort), daemon=True
        )
        for _ in range(workers)
    )
    for t in threads:
        t.start()

    failure = None
    pending: dict[int, tuple] = {}
    next_seq = 0
    while total_box["total"] is None or next_seq < total_box["total"]:
        try:
            seq, dets, ms, err = out_q.get(timeout=0.1)
        except queue.Empty:
            if abort.is_set() and failure is not None:
                break
            continue
        if err is not None:
            failure = err
            break
        pending[seq] = (dets, ms)
        while next_seq in pending:
            dets, ms = pending.pop(next_seq)
            tracker.update(next_seq, dets)
            total_inference_ms += ms
            fs = FrameStats(next_seq, len(dets), ms, tracker.mean_duration_s())
            stats.append(fs)
            detections.append(dets)
            for topic, payload in _frame_payloads(cfg, fs, dets):
                try:
                    sink.publish(topic, payload)
                except (BrokerError, OSError, TimeoutError):
                    drops += 1
            next_seq += 1

    abort.set()
    for t in threads:
        t.join(timeout=10)
    sink.close()
    if failure is not None:
        raise failure

    wall_s = time.perf_counter() - t_loop
    n = len(stats)
    meters = PerfMeters(
        model_load_ms=pipe.model_load_ms,
        total_inference_ms=total_inference_ms,
        frames=n,
        fps=n / wall_s if n else 0.0,
    )
    return PipelineResult(meters, stats, detections, drops)


def _frame_payloads(cfg: PipelineConfig, fs: FrameStats, dets):
    yield cfg.stats_topic, fs.to_json()
    for d in dets:
        yield cfg.detections_topic, json.dumps({
            "frame": fs.frame,
            "x": d.box.x,
            "y": d.box.y,
            "w": d.box.w,
            "h": d.box.h,
            "score": d.score,
            "class": d.class_index,
        })


# --- device benchmarking ----------------------------------------------------------

@dataclass(frozen=True)
class BenchResult:
    rows: tuple[tuple[DeviceProfile, PerfMeters], ...]
    warnings: tuple[str, ...]


def repeat_flags(rows) -> tuple[str, ...]:
    """Flag profile names whose repeated runs disagree on fps by > 25%."""
    by_name: dict[str, list[float]] = {}
    for profile, meters in rows:
        by_name.setdefault(profile.name, []).append(meters.fps)
    flags = []
    for name, values in by_name.items():
        if len(values) > 1 and max(values) > 0:
            spread = (max(values) - min(values)) / max(values)
            if spread > 0.25:
                flags.append(f"profile {name!r}: repeated fps differ by {spread:.0%}")
    return tuple(flags)


def run_bench(cfg: PipelineConfig, profiles, frames: int) -> BenchResult:
    """Run the identical frame set through each profile; fresh pipeline
    (and model-load timing) per profile.  The source is cycled when it
    holds fewer frames than requested."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("need at least one device profile")
    if frames < 1:
        raise ValueError("frame count must be >= 1")
    rows = []
    for profile in profiles:
        pipe = load_pipeline(cfg)
        pipe.frames = tuple(itertools.islice(itertools.cycle(pipe.frames), frames))
        result = run_pipeline(pipe, profile=profile)
        rows.append((profile, result.meters))
    return BenchResult(tuple(rows), repeat_flags(rows))


def bench_to_csv(result: BenchResult) -> str:
    lines = ["profile,model_load_ms,total_inference_ms,fps"]
    for profile, m in result.rows:
        lines.append(
            f"{profile.name},{m.model_load_ms:.3f},{m.total_inference_ms:.3f},{m.fps:.3f}"
        )
    return "\n".join(lines) + "\n"


def save_bench_chart(result: BenchResult, path) -> None:
    """Three-panel bar chart: model load, total inference, fps."""
    fig = plotting.new_figure(9.6, 3.6)
    names = [p.name for p, _ in result.rows]
    panels = (
        ("model load (ms)", [m.model_load_ms for _, m in result.rows]),
        ("total inference (ms)", [m.total_inference_ms for _, m in result.rows]),
        ("frames per second", [m.fps for _, m in result.rows]),
    )
    for i, (title, values) in enumerate(panels, start=1):
        ax = fig.add_subplot(1, 3, i)
        ax.bar(range(len(values)), values, color=f"C{i - 1}")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    plotting.save_svg(fig, path)
