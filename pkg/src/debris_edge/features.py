"""Classical feature extraction: HOG, Hu moments, Harris corners, PCA.

All operators take 1-channel images (see imaging.to_grayscale) and are pure
functions, so they are safe to call concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .imaging import Image, gaussian_kernel, _correlate_axis

# The keypoint-budget band observed to work best for tracking small debris.
KEYPOINT_BUDGET_RANGE = (67, 75)
DEFAULT_KEYPOINT_BUDGET = 70

HARRIS_K = 0.04
HARRIS_SIGMA = 1.0


@dataclass
class HogParams:
    """Histogram-of-oriented-gradients geometry (unsigned 0-180 degrees)."""

    cell: int = 8
    block: int = 2
    bins: int = 9
    block_stride: int = 1
    norm_epsilon: float = 1e-6

    def __post_init__(self):
        if self.cell < 1 or self.block < 1 or self.block_stride < 1:
            raise ValueError("cell, block and block_stride must be >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")

    def descriptor_length(self, width: int, height: int) -> int:
        bx = (width // self.cell - self.block) // self.block_stride + 1
        by = (height // self.cell - self.block) // self.block_stride + 1
        return bx * by * self.block * self.block * self.bins


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    descriptor_kind: str = "raw"  # hog | hu | pca | raw

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.isfinite(vals).all():
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class KeypointSet:
    """(x, y, response) triples sorted by non-increasing response."""

    points: tuple
    budget: int

    def __post_init__(self):
        if len(self.points) > self.budget:
            raise ValueError("keypoint count exceeds budget")
        responses = [p[2] for p in self.points]
        if any(a < b for a, b in zip(responses, responses[1:])):
            raise ValueError("responses must be non-increasing")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # orthonormal rows
    explained_variance: np.ndarray  # non-increasing


def _require_gray(img: Image, op: str) -> np.ndarray:
    if img.channels != 1:
        raise ValueError(f"{op} expects a 1-channel image")
    return img.pixels[:, :, 0].astype(np.float64)


def _centered_gradients(px: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """[-1, 0, 1] differences with replicate borders; returns (gx, gy)."""
    padded_x = np.pad(px, ((0, 0), (1, 1)), mode="edge")
    padded_y = np.pad(px, ((1, 1), (0, 0)), mode="edge")
    gx = padded_x[:, 2:] - padded_x[:, :-2]
    gy = padded_y[2:, :] - padded_y[:-2, :]
    return gx, gy


# ---------------------------------------------------------------------------
# HOG
# ---------------------------------------------------------------------------

def hog_descriptor(img: Image, params: HogParams | None = None) -> FeatureVector:
    """HOG over unsigned orientations with circular bilinear bin votes.

    Orientation bins are centered at i*180/bins degrees; each gradient's
    magnitude is split linearly between the two nearest bin centers
    (wrapping 180 -> 0). Cells accumulate votes, blocks of block x block
    cells slide at block_stride and are L2-normalized with norm_epsilon,
    then concatenated row-major.
    """
    params = params or HogParams()
    px = _require_gray(img, "hog_descriptor")
    h, w = px.shape
    if w % params.cell or h % params.cell:
        raise ValueError(f"image {w}x{h} not divisible by cell size {params.cell}")

    gx, gy = _centered_gradients(px)
    magnitude = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0

    pos = angle * params.bins / 180.0
    lower = np.floor(pos).astype(int)
    frac = pos - lower
    lower %= params.bins
    upper = (lower + 1) % params.bins

    cells_x = w // params.cell
    cells_y = h // params.cell
    hist = np.zeros((cells_y, cells_x, params.bins))
    cell_row = np.arange(h) // params.cell
    cell_col = np.arange(w) // params.cell
    flat_cell = (cell_row[:, None] * cells_x + cell_col[None, :]).ravel()
    np.add.at(
        hist.reshape(-1, params.bins),
        (flat_cell, lower.ravel()),
        (magnitude * (1.0 - frac)).ravel(),
    )
    np.add.at(
        hist.reshape(-1, params.bins),
        (flat_cell, upper.ravel()),
        (magnitude * frac).ravel(),
    )

    blocks = []
    b, s = params.block, params.block_stride
    for by in range(0, cells_y - b + 1, s):
        for bx in range(0, cells_x - b + 1, s):
            block = hist[by : by + b, bx : bx + b].ravel()
            norm = np.sqrt(np.sum(block**2) + params.norm_epsilon**2)
            blocks.append(block / norm)
    return FeatureVector(np.concatenate(blocks), "hog")


# ---------------------------------------------------------------------------
# Hu moments
# ---------------------------------------------------------------------------

def hu_moments(img: Image) -> FeatureVector:
    """The seven Hu invariants of the image intensity distribution.

    Translation and scale invariant by construction; the seventh changes
    sign under reflection (it separates mirror images).
    """
    px = _require_gray(img, "hu_moments")
    m00 = px.sum()
    if m00 == 0:
        raise ValueError("hu_moments undefined for an all-zero image")
    ys, xs = np.mgrid[0 : px.shape[0], 0 : px.shape[1]]
    cx = (xs * px).sum() / m00
    cy = (ys * px).sum() / m00
    dx = xs - cx
    dy = ys - cy

    def mu(p, q):
        return ((dx**p) * (dy**q) * px).sum()

    def eta(p, q):
        return mu(p, q) / m00 ** (1 + (p + q) / 2.0)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03 = eta(3, 0), eta(0, 3)
    n21, n12 = eta(2, 1), eta(1, 2)

    h1 = n20 + n02
    h2 = (n20 - n02) ** 2 + 4 * n11**2
    h3 = (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2
    h4 = (n30 + n12) ** 2 + (n21 + n03) ** 2
    h5 = (n30 - 3 * n12) * (n30 + n12) * (
        (n30 + n12) ** 2 - 3 * (n21 + n03) ** 2
    ) + (3 * n21 - n03) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    h6 = (n20 - n02) * ((n30 + n12) ** 2 - (n21 + n03) ** 2) + 4 * n11 * (
        n30 + n12
    ) * (n21 + n03)
    h7 = (3 * n21 - n03) * (n30 + n12) * (
        (n30 + n12) ** 2 - 3 * (n21 + n03) ** 2
    ) - (n30 - 3 * n12) * (n21 + n03) * (3 * (n30 + n12) ** 2 - (n21 + n03) ** 2)
    return FeatureVector(np.array([h1, h2, h3, h4, h5, h6, h7]), "hu")


# ---------------------------------------------------------------------------
# Harris keypoints
# ---------------------------------------------------------------------------

def harris_response(img: Image) -> np.ndarray:
    """det(M) - k*trace(M)^2 over a sigma=1 Gaussian-weighted structure tensor."""
    px = _require_gray(img, "harris_response")
    gx, gy = _centered_gradients(px)
    kernel = gaussian_kernel(HARRIS_SIGMA)
    r = len(kernel) // 2

    def smooth(a):
        return _correlate_axis(_correlate_axis(a, kernel, 1, r), kernel, 0, r)

    ixx = smooth(gx * gx)
    iyy = smooth(gy * gy)
    ixy = smooth(gx * gy)
    det = ixx * iyy - ixy * ixy
    trace = ixx + iyy
    return det - HARRIS_K * trace * trace


def harris_keypoints(img: Image, budget: int = DEFAULT_KEYPOINT_BUDGET) -> KeypointSet:
    """Top-budget Harris corners after 3x3 non-max suppression.

    Ties in response break by raster order (y, x). Returns fewer points
    than the budget when the image has fewer positive local maxima.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    lo, hi = KEYPOINT_BUDGET_RANGE
    if not lo <= budget <= hi:
        warnings.warn(
            f"keypoint budget {budget} outside the recommended band [{lo}, {hi}]",
            stacklevel=2,
        )
    response = harris_response(img)
    padded = np.pad(response, 1, mode="constant", constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    is_peak = (response >= windows.max(axis=(-2, -1))) & (response > 0)
    ys, xs = np.nonzero(is_peak)
    order = np.lexsort((xs, ys, -response[ys, xs]))[:budget]
    points = tuple((int(xs[i]), int(ys[i]), float(response[ys[i], xs[i]])) for i in order)
    return KeypointSet(points, budget)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def pca_fit(samples, k: int) -> PcaBasis:
    """Top-k principal components of mean-centered samples.

    Eigendecomposition of the sample covariance; component signs are fixed
    so the largest-magnitude entry of each component is positive.
    """
    matrix = np.asarray(
        [s.values if isinstance(s, FeatureVector) else np.asarray(s, float) for s in samples],
        dtype=np.float64,
    )
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise ValueError("pca_fit needs >= 2 equal-length samples")
    n, dim = matrix.shape
    if not 1 <= k <= dim:
        raise ValueError(f"component count {k} must lie in [1, {dim}]")
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:k]
    components = eigenvectors[:, order].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaBasis(mean, components, np.maximum(eigenvalues[order], 0.0))


def pca_apply(basis: PcaBasis, v: FeatureVector | np.ndarray) -> FeatureVector:
    """Project onto the basis: coordinates of (v - mean) in component space."""
    vec = v.values if isinstance(v, FeatureVector) else np.asarray(v, dtype=np.float64)
    if vec.shape != basis.mean.shape:
        raise ValueError(f"length mismatch: {vec.shape} vs basis {basis.mean.shape}")
    return FeatureVector(basis.components @ (vec - basis.mean), "pca")
