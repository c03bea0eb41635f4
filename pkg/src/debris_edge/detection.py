"""Debris detection pipelines, suppression, evaluation, tracking, incidents.

Two detectors: a threshold/connected-component segmenter and a
HOG-plus-linear-SVM sliding window.  Both emit Detection records that feed
greedy NMS, IoU-based evaluation, a nearest-centroid tracker, and the
per-frame incident assessor (flag debounce, timestamps = frame / fps).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .classifiers import LinearSvmModel, svm_predict
from .features import HogParams, hog_descriptor
from .imaging import (
    OTSU,
    BoundingBox,
    FilterParams,
    Image,
    gaussian_blur,
    resize_bilinear,
    threshold,
    to_grayscale,
)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    class_index: Optional[int] = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


# --- segmentation detector -------------------------------------------------------

def segment_detect(img: Image, params: FilterParams, min_area: int) -> list[Detection]:
    """Threshold the image and box every 8-connected component >= min_area.

    Pipeline: grayscale -> Gaussian blur (skipped when kernel_size == 1)
    -> threshold (OTSU sentinel honored) -> component labeling.  Scores
    are component area over image area, sorted descending.
    """
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    gray = to_grayscale(img)
    if params.kernel_size > 1:
        gray = gaussian_blur(gray, params.sigma)
    binary = threshold(gray, params.threshold)
    mask = binary.pixels[:, :, 0] > 0
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]  # skip background label 0
    slices = ndimage.find_objects(labels)
    image_area = img.width * img.height
    dets = []
    for idx in range(count):
        if areas[idx] < min_area:
            continue
        sy, sx = slices[idx]
        box = BoundingBox(sx.start, sy.start, sx.stop - sx.start, sy.stop - sy.start)
        dets.append(Detection(box, float(areas[idx] / image_area)))
    dets.sort(key=lambda d: -d.score)  # stable: ties keep label order
    return dets


# --- sliding-window detector --------------------------------------------------------

def sliding_window_detect(
    img: Image,
    model: LinearSvmModel,
    hog: HogParams,
    window: tuple[int, int],
    stride: int,
    scales: Sequence[float],
    score_threshold: float,
) -> list[Detection]:
    """Score every window position at every scale; return raw detections.

    Class 0 is background; a window becomes a detection when its best
    non-background affine score exceeds the threshold.  Boxes map back
    to original coordinates by rounding position * scale.
    """
    win_w, win_h = window
    if win_w % hog.cell or win_h % hog.cell:
        raise ValueError("window must satisfy HOG cell divisibility")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if any(s <= 0 for s in scales):
        raise ValueError("scales must be positive")
    if model.num_classes < 2:
        raise ValueError("model must include a background class plus objects")

    gray = to_grayscale(img)
    dets = []
    for scale in scales:
        sw = max(1, int(round(img.width / scale)))
        sh = max(1, int(round(img.height / scale)))
        if sw < win_w or sh < win_h:
            continue  # window no longer fits at this scale
        scaled = gray if (sw, sh) == (img.width, img.height) else resize_bilinear(gray, sw, sh)
        px = scaled.pixels[:, :, 0]
        for y in range(0, sh - win_h + 1, stride):
            for x in range(0, sw - win_w + 1, stride):
                crop = Image(px[y : y + win_h, x : x + win_w].copy())
                desc = hog_descriptor(crop, hog)
                _, scores = svm_predict(model, desc)
                cls = 1 + int(np.argmax(scores[1:]))
                score = float(scores[cls])
                if score > score_threshold:
                    box = BoundingBox(
                        int(round(x * scale)),
                        int(round(y * scale)),
                        max(1, int(round(win_w * scale))),
                        max(1, int(round(win_h * scale))),
                    )
                    dets.append(Detection(box, score, cls))
    return dets


# --- non-max suppression ---------------------------------------------------------------

def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression: keep by descending score (ties: lower index)."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou(dets[i].box, dets[j].box) <= iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


# --- evaluation ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionEval:
    matched: int
    precision: float
    recall: float
    count_ratio: float  # nan when no truth boxes


def evaluate_detections(
    pred: Sequence[Detection],
    truth: Sequence[BoundingBox],
    iou_match: float = 0.5,
) -> DetectionEval:
    """Greedy one-to-one matching by descending IoU above the threshold."""
    if not 0 < iou_match < 1:
        raise ValueError("iou_match must lie in (0, 1)")
    pairs = []
    for i, d in enumerate(pred):
        for j, t in enumerate(truth):
            v = iou(d.box, t)
            if v >= iou_match:
                pairs.append((-v, i, j))
    pairs.sort()
    used_pred: set[int] = set()
    used_truth: set[int] = set()
    matched = 0
    for _, i, j in pairs:
        if i in used_pred or j in used_truth:
            continue
        used_pred.add(i)
        used_truth.add(j)
        matched += 1
    precision = matched / len(pred) if pred else float("nan")
    recall = matched / len(truth) if truth else float("nan")
    ratio = len(pred) / len(truth) if truth else float("nan")
    return DetectionEval(matched, precision, recall, ratio)


# --- centroid tracking --------------------------------------------------------------------

@dataclass
class Track:
    id: int
    centroids: list[tuple[float, float]]
    first_frame: int
    last_frame: int
    misses: int = 0

    def duration_s(self, fps: float) -> float:
        return (self.last_frame - self.first_frame + 1) / fps


def _center(box: BoundingBox) -> tuple[float, float]:
    return (box.x + box.w / 2.0, box.y + box.h / 2.0)


class CentroidTracker:
    """Greedy nearest-centroid matcher with a miss allowance.

    Assignment order is (distance, track id, detection index), so equal
    distances resolve to the lower track id deterministically.
    """

    def __init__(self, max_dist: float, max_misses: int, fps: float = 30.0):
        if max_dist <= 0 or fps <= 0:
            raise ValueError("max_dist and fps must be positive")
        if max_misses < 0:
            raise ValueError("max_misses must be >= 0")
        self.max_dist = max_dist
        self.max_misses = max_misses
        self.fps = fps
        self.open: dict[int, Track] = {}
        self.closed: list[Track] = []
        self._next_id = 0

    def update(self, frame: int, detections: Sequence[Detection]) -> None:
        centers = [_center(d.box) for d in detections]
        candidates = []
        for tid, track in self.open.items():
            tx, ty = track.centroids[-1]
            for di, (cx, cy) in enumerate(centers):
                dist = float(np.hypot(cx - tx, cy - ty))
                if dist <= self.max_dist:
                    candidates.append((dist, tid, di))
        candidates.sort()
        used_tracks: set[int] = set()
        used_dets: set[int] = set()
        for dist, tid, di in candidates:
            if tid in used_tracks or di in used_dets:
                continue
            used_tracks.add(tid)
            used_dets.add(di)
            track = self.open[tid]
            track.centroids.append(centers[di])
            track.last_frame = frame
            track.misses = 0
        for tid in list(self.open):
            if tid not in used_tracks:
                track = self.open[tid]
                track.misses += 1
                if track.misses > self.max_misses:
                    self.closed.append(self.open.pop(tid))
        for di, center in enumerate(centers):
            if di not in used_dets:
                self.open[self._next_id] = Track(self._next_id, [center], frame, frame)
                self._next_id += 1

    def finish(self) -> list[Track]:
        """Close every open track and return all tracks in id order."""
        self.closed.extend(self.open.values())
        self.open.clear()
        self.closed.sort(key=lambda t: t.id)
        return self.closed

    def mean_duration_s(self) -> float:
        """Running mean over closed and still-open tracks; 0 when none."""
        tracks = list(self.closed) + list(self.open.values())
        if not tracks:
            return 0.0
        return float(np.mean([t.duration_s(self.fps) for t in tracks]))


def track_centroids(
    frames: Sequence[Sequence[Detection]],
    max_dist: float,
    max_misses: int,
    fps: float = 30.0,
) -> tuple[list[Track], list[float]]:
    """Track across a whole frame sequence; returns closed tracks + durations."""
    tracker = CentroidTracker(max_dist, max_misses, fps)
    for frame, dets in enumerate(frames):
        tracker.update(frame, dets)
    tracks = tracker.finish()
    return tracks, [t.duration_s(fps) for t in tracks]


# --- incident assessment ---------------------------------------------------------------------

@dataclass(frozen=True)
class SceneState:
    incident_flag: bool = False
    fps: float = 30.0
    events: tuple[tuple[int, float], ...] = ()
    frames_seen: int = 0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")


def assess_scene(class_results: Sequence[int], target: int, state: SceneState | None = None) -> SceneState:
    """Debounced incident logging over a per-frame class sequence.

    A new event fires on the first target frame after any non-target
    frame; repeats while the flag is set are ignored; any non-target
    class clears the flag.  Frame numbering continues from the state so
    sequences may be fed in chunks.
    """
    state = state or SceneState()
    flag = state.incident_flag
    events = list(state.events)
    frame = state.frames_seen
    for result in class_results:
        if result == target and not flag:
            events.append((frame, frame / state.fps))
            flag = True
        elif result != target:
            flag = False
        frame += 1
    return replace(
        state, incident_flag=flag, events=tuple(events), frames_seen=frame
    )
