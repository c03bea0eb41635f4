"""Feature extractors checked against direct-summation oracles."""

import math
import warnings

import numpy as np
import pytest

from debris_edge.features import (
    FeatureVector,
    HogParams,
    harris_keypoints,
    hog_descriptor,
    hu_moments,
    pca_apply,
    pca_fit,
)
from debris_edge.imaging import Image


def gray(arr) -> Image:
    return Image(np.asarray(arr, dtype=np.uint8))


# --- independent oracles ----------------------------------------------------

def hog_oracle(px: np.ndarray, params: HogParams) -> np.ndarray:
    """Plain-loop HOG: clamp-border gradients, circular bin votes, L2 blocks."""
    h, w = px.shape
    px = px.astype(float)
    cells_y, cells_x = h // params.cell, w // params.cell
    hist = np.zeros((cells_y, cells_x, params.bins))
    for y in range(h):
        for x in range(w):
            gx = px[y, min(x + 1, w - 1)] - px[y, max(x - 1, 0)]
            gy = px[min(y + 1, h - 1), x] - px[max(y - 1, 0), x]
            mag = math.hypot(gx, gy)
            ang = math.degrees(math.atan2(gy, gx)) % 180.0
            pos = ang * params.bins / 180.0
            lo = int(math.floor(pos))
            frac = pos - lo
            cy, cx = y // params.cell, x // params.cell
            hist[cy, cx, lo % params.bins] += mag * (1 - frac)
            hist[cy, cx, (lo + 1) % params.bins] += mag * frac
    out = []
    for by in range(0, cells_y - params.block + 1, params.block_stride):
        for bx in range(0, cells_x - params.block + 1, params.block_stride):
            block = hist[by : by + params.block, bx : bx + params.block].ravel()
            out.append(block / math.sqrt((block**2).sum() + params.norm_epsilon**2))
    return np.concatenate(out)


def raw_moment_oracle(px: np.ndarray, p: int, q: int) -> float:
    """Literal double-loop raw moment sum."""
    total = 0.0
    for y in range(px.shape[0]):
        for x in range(px.shape[1]):
            total += (x**p) * (y**q) * float(px[y, x])
    return total


# --- HOG ---------------------------------------------------------------------

class TestHog:
    def test_default_window_length_3780(self):
        rng = np.random.default_rng(0)
        img = gray(rng.integers(0, 256, (128, 64)))
        assert len(hog_descriptor(img)) == 3780

    def test_constant_image_all_zero(self):
        desc = hog_descriptor(gray(np.full((32, 32), 90)))
        assert not desc.values.any()

    def test_shape_law_randomized(self):
        rng = np.random.default_rng(1)
        p = HogParams()
        for _ in range(20):
            cw = int(rng.integers(p.block, 10))
            ch = int(rng.integers(p.block, 10))
            w, h = cw * p.cell, ch * p.cell
            img = gray(rng.integers(0, 256, (h, w)))
            expected = (cw - p.block + 1) * (ch - p.block + 1) * p.block**2 * p.bins
            assert len(hog_descriptor(img, p)) == expected
            assert p.descriptor_length(w, h) == expected

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(2)
        desc = hog_descriptor(gray(rng.integers(0, 256, (24, 24))))
        assert desc.values.min() >= 0.0
        assert desc.values.max() <= 1.0

    def test_vertical_edge_votes_horizontal_bin(self):
        px = np.zeros((16, 16), dtype=np.uint8)
        px[:, 8:] = 255  # vertical step edge -> pure horizontal gradient
        desc = hog_descriptor(gray(px)).values.reshape(-1, 9)
        energy = np.abs(desc).sum(axis=0)
        assert energy[0] > 0
        assert np.allclose(energy[1:], 0.0)

    def test_matches_plain_loop_oracle(self):
        rng = np.random.default_rng(3)
        p = HogParams()
        px = rng.integers(0, 256, (24, 32), dtype=np.uint8)
        got = hog_descriptor(gray(px), p).values
        assert np.allclose(got, hog_oracle(px, p), atol=1e-10)

    def test_rejects_indivisible_dimensions(self):
        with pytest.raises(ValueError, match="divisible"):
            hog_descriptor(gray(np.zeros((30, 16))))

    def test_rejects_rgb(self):
        img = Image(np.zeros((16, 16, 3), dtype=np.uint8))
        with pytest.raises(ValueError):
            hog_descriptor(img)


# --- Hu moments ---------------------------------------------------------------

def j_blob(scale=1, offset=(0, 0)) -> Image:
    """Asymmetric two-intensity blob; scale by pixel replication."""
    mask = np.zeros((24, 24), dtype=np.uint8)
    mask[4:20, 10:14] = 200
    mask[16:20, 4:14] = 200
    mask[4:8, 10:18] = 120
    mask = np.kron(mask, np.ones((scale, scale), dtype=np.uint8))
    dy, dx = offset
    out = np.zeros((mask.shape[0] + dy + 4, mask.shape[1] + dx + 4), dtype=np.uint8)
    out[dy : dy + mask.shape[0], dx : dx + mask.shape[1]] = mask
    return gray(out)


class TestHuMoments:
    def test_translation_invariance(self):
        base = hu_moments(j_blob()).values
        moved = hu_moments(j_blob(offset=(3, 5))).values
        assert np.allclose(moved, base, rtol=1e-6, atol=0)

    def test_scale_invariance_within_discretization(self):
        base = hu_moments(j_blob()).values
        doubled = hu_moments(j_blob(scale=2)).values
        assert np.allclose(doubled, base, rtol=2e-2, atol=0)

    def test_flip_invariance(self):
        base = hu_moments(j_blob()).values
        for flipped in (j_blob().pixels[:, ::-1], j_blob().pixels[::-1, :]):
            vals = hu_moments(Image(flipped.copy())).values
            assert np.allclose(vals[:6], base[:6], rtol=1e-6, atol=0)
            # the seventh is skew-sensitive: reflection negates it
            assert np.isclose(vals[6], -base[6], rtol=1e-6)

    def test_square_matches_moment_oracle(self):
        px = np.zeros((12, 12), dtype=np.uint8)
        px[3:9, 3:9] = 100
        m00 = raw_moment_oracle(px, 0, 0)
        m10 = raw_moment_oracle(px, 1, 0)
        m01 = raw_moment_oracle(px, 0, 1)
        cx, cy = m10 / m00, m01 / m00
        # central moments via the raw-moment translation identities
        mu20 = raw_moment_oracle(px, 2, 0) - cx * m10
        mu02 = raw_moment_oracle(px, 0, 2) - cy * m01
        mu11 = raw_moment_oracle(px, 1, 1) - cx * m01
        n20 = mu20 / m00**2
        n02 = mu02 / m00**2
        n11 = mu11 / m00**2
        got = hu_moments(gray(px)).values
        assert np.isclose(got[0], n20 + n02, rtol=1e-12)
        assert np.isclose(got[1], (n20 - n02) ** 2 + 4 * n11**2, atol=1e-18)
        # centered square: odd moments vanish
        assert np.allclose(got[2:5], 0.0, atol=1e-18)

    def test_rejects_all_zero(self):
        with pytest.raises(ValueError):
            hu_moments(gray(np.zeros((5, 5))))


# --- Harris keypoints ---------------------------------------------------------

class TestHarris:
    def test_constant_image_empty(self):
        img = gray(np.full((16, 16), 80))
        assert len(harris_keypoints(img, 70)) == 0

    def test_white_square_corners(self):
        px = np.zeros((32, 32), dtype=np.uint8)
        px[10:22, 10:22] = 255
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ks = harris_keypoints(gray(px), budget=4)
        assert {(x, y) for x, y, _ in ks.points} == {(10, 10), (21, 10), (10, 21), (21, 21)}

    def test_budget_70_on_texture(self):
        rng = np.random.default_rng(0)
        img = gray(rng.integers(0, 256, (64, 64)))
        ks = harris_keypoints(img, budget=70)
        assert len(ks) == 70
        responses = [p[2] for p in ks.points]
        assert responses == sorted(responses, reverse=True)

    def test_warns_outside_band(self):
        rng = np.random.default_rng(1)
        img = gray(rng.integers(0, 256, (32, 32)))
        with pytest.warns(UserWarning, match="recommended band"):
            harris_keypoints(img, budget=10)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        img = gray(rng.integers(0, 256, (48, 48)))
        assert harris_keypoints(img, 70).points == harris_keypoints(img, 70).points

    def test_rejects_zero_budget(self):
        with pytest.raises(ValueError):
            harris_keypoints(gray(np.zeros((4, 4))), 0)


# --- PCA ------------------------------------------------------------------------

class TestPca:
    def test_rank_one_line(self):
        pts = [np.array([t, t]) for t in (-2.0, -1.0, 0.5, 3.0)]
        basis = pca_fit(pts, 1)
        assert np.allclose(basis.components[0], [1 / np.sqrt(2), 1 / np.sqrt(2)])
        total = basis.explained_variance.sum()
        assert basis.explained_variance[0] / max(total, 1e-300) == pytest.approx(1.0)

    def test_full_dimension_reconstructs(self):
        rng = np.random.default_rng(3)
        samples = rng.normal(size=(12, 5))
        basis = pca_fit(samples, 5)
        for s in samples:
            coords = pca_apply(basis, s).values
            recon = basis.mean + coords @ basis.components
            assert np.allclose(recon, s, atol=1e-8)

    def test_matches_svd_oracle(self):
        rng = np.random.default_rng(4)
        samples = rng.normal(size=(40, 10))
        basis = pca_fit(samples, 3)
        centered = samples - samples.mean(axis=0)
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)
        for i in range(3):
            row = vt[i]
            if row[np.argmax(np.abs(row))] < 0:
                row = -row
            assert np.allclose(basis.components[i], row, atol=1e-6)
            assert np.isclose(
                basis.explained_variance[i], svals[i] ** 2 / (len(samples) - 1), rtol=1e-9
            )

    def test_orthonormal_components(self):
        rng = np.random.default_rng(5)
        basis = pca_fit(rng.normal(size=(20, 6)), 4)
        gram = basis.components @ basis.components.T
        assert np.allclose(gram, np.eye(4), atol=1e-6)

    def test_mean_projects_to_zero(self):
        rng = np.random.default_rng(6)
        basis = pca_fit(rng.normal(size=(8, 4)), 2)
        assert np.allclose(pca_apply(basis, basis.mean).values, 0.0, atol=1e-12)

    def test_component_row_gives_unit_coordinate(self):
        rng = np.random.default_rng(7)
        basis = pca_fit(rng.normal(size=(15, 6)), 3)
        for i in range(3):
            coords = pca_apply(basis, basis.mean + basis.components[i]).values
            expected = np.zeros(3)
            expected[i] = 1.0
            assert np.allclose(coords, expected, atol=1e-9)

    def test_projection_matches_dot_oracle(self):
        rng = np.random.default_rng(8)
        basis = pca_fit(rng.normal(size=(10, 5)), 4)
        v = rng.normal(size=5)
        got = pca_apply(basis, v).values
        expected = [np.dot(basis.components[i], v - basis.mean) for i in range(4)]
        assert np.allclose(got, expected, atol=1e-12)

    def test_full_dim_preserves_distances(self):
        rng = np.random.default_rng(9)
        samples = rng.normal(size=(10, 6))
        basis = pca_fit(samples, 6)
        a = pca_apply(basis, samples[0]).values
        b = pca_apply(basis, samples[1]).values
        orig = np.sum((samples[0] - samples[1]) ** 2)
        assert np.isclose(np.sum((a - b) ** 2), orig, atol=1e-8)

    def test_errors(self):
        with pytest.raises(ValueError):
            pca_fit([np.zeros(3)], 1)
        with pytest.raises(ValueError):
            pca_fit(np.zeros((4, 3)), 4)
        basis = pca_fit(np.random.default_rng(10).normal(size=(5, 3)), 2)
        with pytest.raises(ValueError):
            pca_apply(basis, np.zeros(4))

    def test_feature_vector_rejects_nan(self):
        with pytest.raises(ValueError):
            FeatureVector(np.array([1.0, np.nan]))
