"""Synthetic corpus generation, grid sweeps, loss statistics, and reports.

The dataset generator paints noisy water backgrounds and class-specific
debris shapes, records tight ground-truth boxes, and writes a JSON-lines
manifest.  The sweep harness runs a Cartesian grid of opaque axis values
with derived per-run seeds, never dropping failed runs.  Reports render
as CSV plus deterministic SVG charts.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .imaging import Image, pnm_save
from .neuralnet import Dataset, DivergenceError, TrainHistory

DEFAULT_CLASSES = ("plastic", "wood", "metal", "paper", "cardboard", "trash")


# --- dataset generation -----------------------------------------------------------

@dataclass(frozen=True)
class GenSpec:
    per_class: int
    seed: int
    classes: tuple[str, ...] = DEFAULT_CLASSES
    image_size: tuple[int, int] = (400, 500)  # (w, h)
    objects_min: int = 1
    objects_max: int = 5

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        names = tuple(self.classes)
        if not names or len(set(names)) != len(names):
            raise ValueError("classes must be non-empty and unique")
        unknown = set(names) - set(DEFAULT_CLASSES)
        if unknown:
            raise ValueError(f"no shape grammar for classes {sorted(unknown)}")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("need 1 <= objects_min <= objects_max")
        w, h = self.image_size
        if w < 120 or h < 120:
            raise ValueError("image size must be at least 120x120")
        object.__setattr__(self, "classes", names)
        object.__setattr__(self, "image_size", (int(w), int(h)))


def _water_background(rng, w: int, h: int) -> np.ndarray:
    base = np.array([32.0, 92.0, 112.0])
    coarse_h, coarse_w = max(2, h // 25), max(2, w // 25)
    coarse = rng.normal(0.0, 10.0, size=(coarse_h, coarse_w))
    up = np.kron(coarse, np.ones((h // coarse_h + 1, w // coarse_w + 1)))[:h, :w]
    fine = rng.normal(0.0, 6.0, size=(h, w))
    bg = base[None, None, :] + (up + fine)[:, :, None]
    return np.clip(bg, 0, 255)


def _fill_convex(w: int, h: int, pts: np.ndarray) -> np.ndarray:
    """Scanline fill of a convex polygon over pixel centers."""
    mask = np.zeros((h, w), dtype=bool)
    k = len(pts)
    for row in range(h):
        y = row + 0.5
        xs = []
        for i in range(k):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % k]
            if (y1 <= y < y2) or (y2 <= y < y1):
                xs.append(x1 + (y - y1) * (x2 - x1) / (y2 - y1))
        if len(xs) >= 2:
            left = int(np.ceil(min(xs) - 0.5))
            right = int(np.floor(max(xs) - 0.5))
            if right >= left:
                mask[row, max(0, left) : min(w, right + 1)] = True
    return mask


def _random_polygon(rng, w: int, h: int, vertices: int) -> np.ndarray:
    # evenly spaced angles with bounded jitter keep the shape fat; a
    # sliver would fall under detector area floors and skew the stats
    step = 2 * np.pi / vertices
    angles = (np.arange(vertices) + rng.uniform(-0.35, 0.35, size=vertices)) * step
    angles += rng.uniform(0, 2 * np.pi)
    radii = rng.uniform(0.72, 0.98, size=vertices)
    cx, cy = w / 2.0, h / 2.0
    pts = np.stack(
        [cx + radii * (w / 2 - 1) * np.cos(angles), cy + radii * (h / 2 - 1) * np.sin(angles)],
        axis=1,
    )
    return _fill_convex(w, h, pts)


def _paint_object(rng, cls: str, w: int, h: int):
    """Return (mask, rgb float patch, alpha) for one debris shape."""
    color = np.zeros((h, w, 3))
    alpha = 1.0
    if cls == "plastic":
        mask = _random_polygon(rng, w, h, vertices=6)
        color[:] = np.array([164, 200, 210]) + rng.normal(0, 5, size=3)
        alpha = 0.92
    elif cls == "wood":
        mask = np.ones((h, w), dtype=bool)
        base = np.array([168, 122, 70]) + rng.normal(0, 6, size=3)
        color[:] = base
        # band period wide enough to survive the 400x500 -> 64x64 resize
        stripes = (np.arange(w) // 14) % 2 == 1
        color[:, stripes, :] *= 0.38
    elif cls == "metal":
        mask = np.ones((h, w), dtype=bool)
        ramp = np.linspace(40, 230, w)[None, :, None]
        color[:] = ramp
        color[:, :, 2] += 14  # cold tint
    elif cls == "paper":
        mask = _random_polygon(rng, w, h, vertices=4)
        color[:] = np.array([248, 246, 240]) + rng.normal(0, 3, size=3)
    elif cls == "cardboard":
        mask = _random_polygon(rng, w, h, vertices=4)
        color[:] = np.array([150, 118, 82]) + rng.normal(0, 5, size=3)
    else:  # trash
        mask = _random_polygon(rng, w, h, vertices=7)
        mottle = rng.uniform(-16, 16, size=(h, w, 1))
        color[:] = np.array([40, 38, 36]) + mottle
    return mask, np.clip(color, 0, 255), alpha


def _object_dims(rng, cls: str, limit: int) -> tuple[int, int]:
    if cls == "wood":
        length = int(rng.integers(120, min(222, limit)))
        return length, max(28, length // 4)
    side = int(rng.integers(80, min(182, limit)))
    jitter = rng.uniform(0.8, 1.25)
    return side, max(56, min(limit - 1, int(side * jitter)))


def _boxes_clear(box, placed, margin: int) -> bool:
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if not (
            x + w + margin <= px
            or px + pw + margin <= x
            or y + h + margin <= py
            or py + ph + margin <= y
        ):
            return False
    return True


def generate_dataset(spec: GenSpec, out_dir) -> list[dict]:
    """Write PPM images plus manifest.jsonl; return the manifest records.

    Every shape in an image belongs to the image's class, so the label
    of the dominant (largest) object is the image label by construction.
    Object placements never overlap, with a small margin, and every
    recorded box tightly bounds its painted pixels.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_w, img_h = spec.image_size
    records = []
    index = 0
    for cls in spec.classes:
        for _ in range(spec.per_class):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
            canvas = _water_background(rng, img_w, img_h)
            wanted = int(rng.integers(spec.objects_min, spec.objects_max + 1))
            placed: list[tuple[int, int, int, int]] = []
            boxes = []
            for _ in range(wanted):
                for _attempt in range(40):
                    ow, oh = _object_dims(rng, cls, min(img_w, img_h) - 2)
                    x = int(rng.integers(0, img_w - ow))
                    y = int(rng.integers(0, img_h - oh))
                    if _boxes_clear((x, y, ow, oh), placed, margin=8):
                        break
                else:
                    continue  # no room left; place fewer objects
                mask, color, alpha = _paint_object(rng, cls, ow, oh)
                region = canvas[y : y + oh, x : x + ow]
                region[mask] = alpha * color[mask] + (1 - alpha) * region[mask]
                ys, xs = np.nonzero(mask)
                tight = (
                    x + int(xs.min()),
                    y + int(ys.min()),
                    int(xs.max() - xs.min() + 1),
                    int(ys.max() - ys.min() + 1),
                )
                placed.append((x, y, ow, oh))
                boxes.append(list(tight))
            name = f"{index:05d}_{cls}.ppm"
            pnm_save(out / name, Image(np.clip(canvas + 0.5, 0, 255).astype(np.uint8)))
            records.append({"path": name, "label": cls, "boxes": boxes})
            index += 1
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return records


def load_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def dataset_from_manifest(manifest_path, class_names: Optional[Sequence[str]] = None) -> Dataset:
    """Build a training dataset from a generated manifest."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    if class_names is None:
        class_names = sorted({r["label"] for r in records})
    names = tuple(class_names)
    index = {n: i for i, n in enumerate(names)}
    items = []
    for rec in records:
        if rec["label"] not in index:
            raise ValueError(f"manifest label {rec['label']!r} not in class list")
        items.append((str(manifest_path.parent / rec["path"]), index[rec["label"]]))
    return Dataset(tuple(items), names)


# --- grid sweeps -------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    input_sizes: tuple
    iters: tuple
    solvers: tuple
    nn_sizes: tuple
    trials_per_config: int = 1
    seed: int = 0

    def __post_init__(self):
        for axis_name in ("input_sizes", "iters", "solvers", "nn_sizes"):
            axis = tuple(getattr(self, axis_name))
            if not axis:
                raise ValueError(f"axis {axis_name} must be non-empty")
            object.__setattr__(self, axis_name, axis)
        if any(s not in ("Adam", "SGD") for s in self.solvers):
            raise ValueError("solver names must be 'Adam' or 'SGD'")
        if self.trials_per_config < 1:
            raise ValueError("trials_per_config must be >= 1")


@dataclass(frozen=True)
class TrialConfig:
    config_id: int
    trial: int
    input_size: int
    iters: int
    solver_type: str
    nn_size: int
    seed: int


@dataclass(frozen=True)
class RunRecord:
    config_id: int
    trial: int
    input_size: int
    iters: int
    solver_type: str
    nn_size: int
    seed: int
    test_loss: float  # nan when diverged
    train_loss: float
    diverged_at: Optional[int]
    history: Optional[TrainHistory]


def derive_seed(base: int, *keys: int) -> int:
    """Stable per-run seed from a base seed and integer keys."""
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def run_grid(
    sweep: SweepConfig,
    task: Callable[[TrialConfig], TrainHistory],
    workers: int = 1,
) -> list[RunRecord]:
    """Cartesian product of the four axes times trials, in config order.

    The task maps one TrialConfig to a finished TrainHistory.  A run
    that raises DivergenceError is recorded with the divergence marker
    instead of being dropped.
    """
    trial_cfgs = []
    config_id = 0
    for input_size in sweep.input_sizes:
        for iters in sweep.iters:
            for solver in sweep.solvers:
                for nn_size in sweep.nn_sizes:
                    for trial in range(sweep.trials_per_config):
                        trial_cfgs.append(
                            TrialConfig(
                                config_id,
                                trial,
                                input_size,
                                iters,
                                solver,
                                nn_size,
                                derive_seed(sweep.seed, config_id, trial),
                            )
                        )
                    config_id += 1
    if not trial_cfgs:
        raise ValueError("empty grid")

    def run_one(cfg: TrialConfig) -> RunRecord:
        try:
            history = task(cfg)
            final = history.final
            return RunRecord(
                cfg.config_id, cfg.trial, cfg.input_size, cfg.iters,
                cfg.solver_type, cfg.nn_size, cfg.seed,
                final.test_loss, final.train_loss, None, history,
            )
        except DivergenceError as err:
            return RunRecord(
                cfg.config_id, cfg.trial, cfg.input_size, cfg.iters,
                cfg.solver_type, cfg.nn_size, cfg.seed,
                math.nan, math.nan, err.iteration, err.history,
            )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, trial_cfgs))
    else:
        results = [run_one(cfg) for cfg in trial_cfgs]
    results.sort(key=lambda r: (r.config_id, r.trial))
    return results


# --- loss statistics ------------------------------------------------------------------

@dataclass(frozen=True)
class LossStats:
    mean: float
    median: float
    sd: float  # sample, n-1 denominator
    min: float
    max: float
    range: float
    spread: float  # (mean - min) / sd; nan when sd = 0


def loss_stats(losses: Sequence[float]) -> LossStats:
    vals = np.asarray(losses, dtype=np.float64)
    if vals.ndim != 1 or vals.size < 2:
        raise ValueError("need at least two loss values")
    if not np.isfinite(vals).all():
        raise ValueError("losses must be finite")
    mean = float(vals.mean())
    median = float(np.median(vals))
    sd = float(vals.std(ddof=1))
    lo = float(vals.min())
    hi = float(vals.max())
    spread = (mean - lo) / sd if sd > 0 else math.nan
    return LossStats(mean, median, sd, lo, hi, hi - lo, spread)


# --- lagged correlations ----------------------------------------------------------------

def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return math.nan
    return float(da @ db) / denom


def lagged_correlation(x: Sequence[float], y: Sequence[float], max_lag: int) -> dict[int, float]:
    """Pearson correlation for every lag in [-max_lag, +max_lag].

    Positive lag compares x[0:n-lag] with y[lag:n]; negative lags swap
    the roles.  Constant windows yield nan.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("series must be equal-length 1-D sequences")
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    n = xa.size
    if n - max_lag < 3:
        raise ValueError("series too short for the requested lag range")
    out: dict[int, float] = {}
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            out[lag] = _pearson(xa[: n - lag], ya[lag:]) if lag else _pearson(xa, ya)
        else:
            k = -lag
            out[lag] = _pearson(ya[: n - k], xa[k:])
    return out


# --- report rendering ---------------------------------------------------------------------

def _fmt(value: float) -> str:
    return "undefined" if math.isnan(value) else f"{value:.6f}"


def render_report(
    records: Sequence[RunRecord],
    stats: Optional[LossStats],
    correlations: Optional[dict[int, float]],
    out_dir,
) -> dict:
    """CSV sweep table plus SVG charts; byte-deterministic per inputs."""
    if not records:
        raise ValueError("need at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes = []

    lines = ["config,test_loss,input_size,iters,solver_type,nn_size"]
    for rec in records:
        loss = f"{rec.test_loss:.6f}" if rec.diverged_at is None else "diverged"
        lines.append(
            f"{rec.config_id + 1},{loss},{rec.input_size},{rec.iters},"
            f"{rec.solver_type},{rec.nn_size}"
        )
    if stats is not None:
        lines.append(f"mean,{_fmt(stats.mean)}")
        lines.append(f"median,{_fmt(stats.median)}")
        lines.append(f"sd,{_fmt(stats.sd)}")
        lines.append(f"min,{_fmt(stats.min)}")
        lines.append(f"max,{_fmt(stats.max)}")
        lines.append(f"range,{_fmt(stats.range)}")
        lines.append(f"spread,{_fmt(stats.spread)}")

    from .plotting import new_figure, save_svg

    losses_path = None
    with_history = [r for r in records if r.history is not None and r.history.records]
    if with_history:
        fig = new_figure()
        ax = fig.add_subplot(111)
        for rec in with_history:
            iters = [e.iteration for e in rec.history.records]
            ax.plot(iters, [e.test_loss for e in rec.history.records],
                    label=f"cfg {rec.config_id + 1}.{rec.trial}")
            ax.plot(iters, [e.train_loss for e in rec.history.records],
                    linestyle="--", linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title("train (dashed) and test loss")
        if len(with_history) <= 10:
            ax.legend(fontsize="small")
        losses_path = out / "losses.svg"
        save_svg(fig, losses_path)
    else:
        notes.append("loss chart omitted (no histories)")

    corr_path = None
    if correlations:
        fig = new_figure()
        ax = fig.add_subplot(111)
        lags = sorted(correlations)
        ax.plot(lags, [correlations[l] for l in lags], marker="o")
        ax.axhline(0.0, color="gray", linewidth=0.6)
        ax.set_xlabel("lag")
        ax.set_ylabel("correlation")
        ax.set_title("lagged train/test correlation")
        corr_path = out / "correlations.svg"
        save_svg(fig, corr_path)
    else:
        notes.append("correlation chart omitted (no data)")

    for note in notes:
        lines.append(f"note,{note}")
    table_path = out / "sweep.csv"
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"table": table_path, "losses": losses_path, "correlations": corr_path, "notes": notes}


# --- built-in toy sweep task ------------------------------------------------------------------

def make_toy_task() -> Callable[[TrialConfig], TrainHistory]:
    """Task adapter for the published toy grid rows.

    Axis semantics: input_size = feature dimension of two seeded
    Gaussian blobs, nn_size = hidden width of a one-hidden-layer dense
    net, iters = training iterations, solver_type picks the optimizer.
    """
    from .neuralnet import (
        NetworkSpec, OptimizerConfig, build_network, dense, flatten,
        relu, softmax, train,
    )

    def task(cfg: TrialConfig) -> TrainHistory:
        rng = np.random.default_rng(cfg.seed)
        d = int(cfg.input_size)
        n = 120
        a = rng.normal(-1.2, 1.0, size=(n, d))
        b = rng.normal(1.2, 1.0, size=(n, d))
        items = [((row.reshape(1, d) * 40 + 128).clip(0, 255).astype(np.uint8), 0) for row in a]
        items += [((row.reshape(1, d) * 40 + 128).clip(0, 255).astype(np.uint8), 1) for row in b]
        data = Dataset(tuple(items), ("low", "high"))
        spec = NetworkSpec(
            (1, d, 1), (flatten(), dense(int(cfg.nn_size)), relu(), dense(2), softmax())
        )
        net = build_network(spec, seed=cfg.seed)
        opt = OptimizerConfig(
            kind="adam" if cfg.solver_type == "Adam" else "sgd",
            learning_rate=1e-3 if cfg.solver_type == "Adam" else 0.05,
            max_iters=int(cfg.iters),
            seed=cfg.seed,
            batch_size=16,
            eval_interval=max(1, int(cfg.iters) // 10),
            early_stop_patience=0,
        )
        return train(net, data, opt, 0.7)

    return task
