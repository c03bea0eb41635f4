"""Classical baselines: k-nearest-neighbor, linear SVM, and evaluation metrics.

The SVM is a one-vs-rest linear machine trained with the Pegasos
sub-gradient schedule (step 1/(lambda*t)).  All tie-breaks are
deterministic (lowest index) so repeated runs agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import FeatureVector


def _as_vector(v) -> np.ndarray:
    if isinstance(v, FeatureVector):
        return v.values
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a 1-D feature vector")
    return arr


@dataclass(frozen=True)
class LabeledVectors:
    """Equal-length feature vectors with integer labels."""

    vectors: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] == 0:
            raise ValueError("vectors must form a non-empty 2-D array")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != vecs.shape[0]:
            raise ValueError("need one label per vector")
        names = tuple(self.class_names)
        if len(names) == 0 or len(set(names)) != len(names):
            raise ValueError("class names must be non-empty and unique")
        if labels.min() < 0 or labels.max() >= len(names):
            raise ValueError("label outside class range")
        if not np.isfinite(vecs).all():
            raise ValueError("vectors must be finite")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class LinearSvmModel:
    """Per-class affine scorers w.v + b, one-vs-rest."""

    weights: np.ndarray  # (classes, dim)
    biases: np.ndarray  # (classes,)
    lam: float
    epochs: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError("need one weight row and bias per class")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def dimension(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[actual][predicted], all entries non-negative."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
            raise ValueError("counts must be a square class-by-class grid")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: np.ndarray  # nan marks an undefined (zero-denominator) cell
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float


def knn_classify(train: LabeledVectors, query, k: int) -> int:
    """Majority label of the k nearest training vectors.

    Distance ties go to the lower sample index, vote ties to the
    lowest class index.
    """
    q = _as_vector(query)
    if q.shape[0] != train.dimension:
        raise ValueError("query dimension does not match training vectors")
    if not 1 <= k <= len(train):
        raise ValueError("k must be in [1, len(train)]")
    d2 = np.sum((train.vectors - q) ** 2, axis=1)
    nearest = np.argsort(d2, kind="stable")[:k]  # stable sort = lower index on ties
    votes = np.bincount(train.labels[nearest], minlength=train.num_classes)
    return int(np.argmax(votes))


def svm_train(data: LabeledVectors, lam: float, epochs: int, seed: int) -> LinearSvmModel:
    """One-vs-rest Pegasos: seeded-shuffle sub-gradient descent, step 1/(lam*t)."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    present = np.unique(data.labels)
    if present.shape[0] < 2:
        raise ValueError("need samples from at least two classes")

    n, dim = data.vectors.shape
    weights = np.zeros((data.num_classes, dim))
    biases = np.zeros(data.num_classes)
    for cls in range(data.num_classes):
        rng = np.random.default_rng(seed + cls)
        y = np.where(data.labels == cls, 1.0, -1.0)
        w = np.zeros(dim)
        b = 0.0
        t = 0
        for _ in range(epochs):
            order = rng.permutation(n)
            for i in order:
                t += 1
                eta = 1.0 / (lam * t)
                margin = y[i] * (w @ data.vectors[i] + b)
                w *= 1.0 - eta * lam
                if margin < 1.0:
                    w += eta * y[i] * data.vectors[i]
                    b += eta * y[i]  # bias stays unregularized
        weights[cls] = w
        biases[cls] = b
    return LinearSvmModel(weights, biases, float(lam), int(epochs))


def svm_predict(model: LinearSvmModel, v) -> tuple[int, np.ndarray]:
    """Argmax class over the raw affine responses; ties pick the lowest class."""
    x = _as_vector(v)
    if x.shape[0] != model.dimension:
        raise ValueError("vector dimension does not match the model")
    scores = model.weights @ x + model.biases
    return int(np.argmax(scores)), scores


def confusion_matrix(actual: Sequence[int], predicted: Sequence[int], classes: int) -> ConfusionMatrix:
    a = np.asarray(actual, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if a.shape != p.shape or a.ndim != 1:
        raise ValueError("actual and predicted must be equal-length 1-D sequences")
    if classes < 1:
        raise ValueError("classes must be >= 1")
    if a.size and (min(a.min(), p.min()) < 0 or max(a.max(), p.max()) >= classes):
        raise ValueError("label out of range")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (a, p), 1)
    return ConfusionMatrix(counts)


def classification_metrics(cm: ConfusionMatrix) -> ClassificationMetrics:
    """Accuracy plus per-class precision/recall/F1 and macro averages.

    Zero-denominator cells become nan and are left out of the macros.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    col = counts.sum(axis=0)
    row = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, diag / col, math.nan)
        recall = np.where(row > 0, diag / row, math.nan)
        pr = precision + recall
        f1 = np.where(
            np.isfinite(precision) & np.isfinite(recall) & (pr > 0),
            2 * precision * recall / np.where(pr > 0, pr, 1.0),
            np.where(np.isfinite(precision) & np.isfinite(recall), 0.0, math.nan),
        )

    def macro(values: np.ndarray) -> float:
        defined = values[np.isfinite(values)]
        return float(defined.mean()) if defined.size else math.nan

    return ClassificationMetrics(
        accuracy=float(diag.sum() / total),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=macro(precision),
        macro_recall=macro(recall),
        macro_f1=macro(f1),
    )


def confusion_to_csv(cm: ConfusionMatrix, class_names: Sequence[str]) -> str:
    """Render the matrix as a CSV grid with name headers on both axes."""
    names = list(class_names)
    if len(names) != cm.num_classes:
        raise ValueError("need one name per class")
    lines = ["," + ",".join(names)]
    for i, name in enumerate(names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    return "\n".join(lines) + "\n"
