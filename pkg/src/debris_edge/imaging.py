"""8-bit raster images, binary PNM (PGM/PPM) I/O, and preprocessing filters.

Images are stored as (height, width, channels) uint8 arrays with 1 (gray)
or 3 (RGB) channels. Filter math runs in float64 internally and rounds
half-up on write-back, so results stay within one sample unit of an exact
real-valued evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Sentinel threshold value selecting automatic Otsu threshold search.
OTSU = -1

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601 luma


class PnmError(ValueError):
    """Malformed or unsupported PNM data."""


@dataclass(frozen=True)
class Image:
    """8-bit raster, row-major, channel-interleaved."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, np.newaxis]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w) or (h, w, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")
        if px.dtype != np.uint8:
            if px.min() < 0 or px.max() > 255:
                raise ValueError("samples must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box, top-left (x, y), size (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError("box origin must be >= 0")
        if self.w < 1 or self.h < 1:
            raise ValueError("box size must be >= 1")

    def bound_to(self, img: Image) -> None:
        """Raise if the box does not fit inside img."""
        if self.x + self.w > img.width or self.y + self.h > img.height:
            raise ValueError(
                f"box {self} exceeds image bounds {img.width}x{img.height}"
            )

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass
class FilterParams:
    """Knobs for the preprocessing filters; see individual operations."""

    kernel_size: int = 3
    sigma: float = 1.0
    threshold: int = OTSU
    alpha: float = 1.0
    beta: float = 0.0
    target_fraction: float = 0.6

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 1")
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError("sigma must be finite and positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0 < self.target_fraction <= 1:
            raise ValueError("target_fraction must lie in (0, 1]")


def _round_u8(values: np.ndarray) -> np.ndarray:
    """Round half-up and clamp to the 8-bit sample range."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PNM I/O
# ---------------------------------------------------------------------------

def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Pull whitespace-separated header tokens; '#' starts a comment line."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise PnmError("truncated PNM header")
        tokens.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise PnmError("missing whitespace after PNM header")
    return tokens, i + 1


def pnm_read(data: bytes) -> Image:
    """Decode binary PGM (P5) or PPM (P6) bytes, maxval 255 only."""
    tokens, offset = _read_header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise PnmError("non-numeric PNM header field") from exc
    if width < 1 or height < 1:
        raise PnmError("PNM dimensions must be >= 1")
    if maxval != 255:
        raise PnmError(f"unsupported maxval {maxval}, expected 255")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise PnmError(
            f"truncated PNM payload: expected {expected} bytes, got {len(payload)}"
        )
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(px.copy())


def pnm_write(img: Image) -> bytes:
    """Encode as binary P5 (1-channel) or P6 (3-channel), maxval 255."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


def pnm_load(path) -> Image:
    """Read a PNM file from disk."""
    with open(path, "rb") as fh:
        return pnm_read(fh.read())


def pnm_save(path, img: Image) -> None:
    """Write a PNM file to disk."""
    with open(path, "wb") as fh:
        fh.write(pnm_write(img))


# ---------------------------------------------------------------------------
# Point operations
# ---------------------------------------------------------------------------

def to_grayscale(img: Image) -> Image:
    """BT.601 luma conversion; 1-channel input passes through unchanged."""
    if img.channels == 1:
        return img
    px = img.pixels.astype(np.float64)
    y = px[:, :, 0] * GRAY_WEIGHTS[0] + px[:, :, 1] * GRAY_WEIGHTS[1] + px[:, :, 2] * GRAY_WEIGHTS[2]
    return Image(_round_u8(y))


def negate(img: Image) -> Image:
    """Photometric negative: s -> 255 - s."""
    return Image(255 - img.pixels)


def threshold(img: Image, t: int = OTSU) -> Image:
    """Binarize a 1-channel image: sample > t -> 255, else 0.

    t = OTSU picks the threshold maximizing inter-class variance of the
    256-bin histogram (ties broken toward the lowest threshold).
    """
    if img.channels != 1:
        raise ValueError("threshold expects a 1-channel image")
    if t == OTSU:
        t = otsu_threshold(img)
    elif not 0 <= t <= 255:
        raise ValueError("threshold must be in [0, 255] or OTSU")
    out = np.where(img.pixels > t, 255, 0).astype(np.uint8)
    return Image(out)


def otsu_threshold(img: Image) -> int:
    """Exhaustive inter-class-variance maximization over t in [0, 255]."""
    if img.channels != 1:
        raise ValueError("otsu_threshold expects a 1-channel image")
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    # Cumulative pixel counts / intensity sums up to and including t.
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    w1 = total - w0
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(256), where=w1 > 0)
    variance = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
    return int(np.argmax(variance))  # argmax takes the first (lowest) maximum


def adjust_contrast_brightness(img: Image, alpha: float, beta: float) -> Image:
    """Gain/offset around mid-gray: s -> alpha*(s - 128) + 128 + beta, clamped."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    px = img.pixels.astype(np.float64)
    return Image(_round_u8(alpha * (px - 128.0) + 128.0 + beta))


def reorder_channels(img: Image) -> Image:
    """Reverse the per-pixel channel order (RGB <-> BGR)."""
    if img.channels != 3:
        raise ValueError("reorder_channels expects a 3-channel image")
    return Image(img.pixels[:, :, ::-1].copy())


# ---------------------------------------------------------------------------
# Geometric operations
# ---------------------------------------------------------------------------

def resize_bilinear(img: Image, out_w: int, out_h: int) -> Image:
    """Bilinear resample with pixel-center mapping src = (dst + 0.5)*scale - 0.5."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    if out_w == img.width and out_h == img.height:
        return img
    return Image(_round_u8(_resample_bilinear(img.pixels.astype(np.float64), out_w, out_h)))


def _resample_bilinear(px: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = px.shape[:2]
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[np.newaxis, :, np.newaxis]
    fy = (sy - y0)[:, np.newaxis, np.newaxis]
    top = px[y0][:, x0] * (1 - fx) + px[y0][:, x1] * fx
    bottom = px[y1][:, x0] * (1 - fx) + px[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def object_scale_normalize(
    img: Image,
    box: BoundingBox,
    target_fraction: float = 0.6,
    out_w: int = 400,
    out_h: int = 500,
) -> Image:
    """Re-frame an object so it fills target_fraction of a square window.

    Crops a square of side max(w, h)/target_fraction centered on the box
    (replicate-padded where it leaves the image), then resizes to
    (out_w, out_h). Evens out apparent object scale across captures taken
    at different distances or focal lengths.
    """
    box.bound_to(img)
    if not 0 < target_fraction <= 1:
        raise ValueError("target_fraction must lie in (0, 1]")
    side = max(1, int(round(max(box.w, box.h) / target_fraction)))
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    # Replicate padding via clamped source indices.
    xs = np.clip(np.arange(x0, x0 + side), 0, img.width - 1)
    ys = np.clip(np.arange(y0, y0 + side), 0, img.height - 1)
    window = img.pixels[np.ix_(ys, xs)]
    return resize_bilinear(Image(window), out_w, out_h)


# ---------------------------------------------------------------------------
# Neighborhood filters (replicate borders)
# ---------------------------------------------------------------------------

def median_filter(img: Image, kernel_size: int = 3) -> Image:
    """Per-channel k x k median with replicate borders."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be an odd integer >= 1")
    if kernel_size == 1:
        return img
    r = kernel_size // 2
    padded = np.pad(img.pixels, ((r, r), (r, r), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (kernel_size, kernel_size), axis=(0, 1)
    )
    out = np.median(windows, axis=(-2, -1))
    return Image(out.astype(np.uint8))  # odd k*k count -> median is an exact sample


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian sampled at integer offsets, truncated at 3*sigma, sum 1."""
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValueError("sigma must be finite and positive")
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur, replicate borders, rounded once on write-back."""
    out = _gaussian_blur_float(img.pixels.astype(np.float64), sigma)
    return Image(_round_u8(out))


def _gaussian_blur_float(px: np.ndarray, sigma: float) -> np.ndarray:
    """Float-valued separable Gaussian on an (h, w, ...) array."""
    kernel = gaussian_kernel(sigma)
    r = len(kernel) // 2
    out = _correlate_axis(px, kernel, axis=1, radius=r)
    return _correlate_axis(out, kernel, axis=0, radius=r)


def _correlate_axis(arr: np.ndarray, kernel: np.ndarray, axis: int, radius: int) -> np.ndarray:
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    for i, k in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(i, i + arr.shape[axis])
        out += k * padded[tuple(sl)]
    return out
