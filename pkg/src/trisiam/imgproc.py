"""Deterministic 8-bit grayscale preprocessing stages.

Pipeline order: background removal -> auto brightness/contrast -> unsharp
mask -> bilinear resize. Every stage is a pure function; rounding is
half-away-from-zero throughout so outputs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

WARN_EMPTY_FOREGROUND = "empty-foreground"
WARN_FLAT_RANGE = "flat-intensity-range"


class Box(NamedTuple):
    """Half-open pixel rectangle: columns [left, right), rows [top, bottom)."""

    left: int
    top: int
    right: int
    bottom: int

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top


@dataclass(frozen=True)
class RasterImage:
    """Single-channel 8-bit image; pixels is a (height, width) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 2:
            raise ValueError("RasterImage.pixels must be a 2-D array")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"RasterImage must be at least 1x1, got {p.shape}")
        if p.dtype != np.uint8:
            raise ValueError(f"RasterImage.pixels must be uint8, got {p.dtype}")
        if not p.flags.writeable:
            return
        p.flags.writeable = False  # frozen value semantics

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_array(cls, arr) -> "RasterImage":
        a = np.asarray(arr)
        if a.dtype != np.uint8:
            if np.any((a < 0) | (a > 255)):
                raise ValueError("intensities outside [0, 255]")
            a = a.astype(np.uint8)
        return cls(a.copy())


@dataclass(frozen=True)
class PreprocessConfig:
    unsharp_amount: float = 1.0
    gaussian_sigma: float = 1.0
    gaussian_ksize: int = 5
    clip_percent: float = 0.01
    morph_ksize: int = 3
    erode_iters: int = 2
    dilate_iters: int = 2
    target_size: int = 224
    # off by default: rescale washed-out images (mean > 220) toward mean 128
    # before thresholding; affects mask computation only
    renormalize_washed_out: bool = False

    def validate(self) -> None:
        if self.unsharp_amount < 0:
            raise ValueError(f"unsharp_amount must be >= 0, got {self.unsharp_amount}")
        if self.gaussian_sigma <= 0:
            raise ValueError(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if self.gaussian_ksize < 3 or self.gaussian_ksize % 2 == 0:
            raise ValueError(f"gaussian_ksize must be odd and >= 3, got {self.gaussian_ksize}")
        if not 0 <= self.clip_percent < 0.5:
            raise ValueError(f"clip_percent must be in [0, 0.5), got {self.clip_percent}")
        if self.morph_ksize < 1 or self.morph_ksize % 2 == 0:
            raise ValueError(f"morph_ksize must be odd and >= 1, got {self.morph_ksize}")
        if self.erode_iters < 0 or self.dilate_iters < 0:
            raise ValueError("erode_iters and dilate_iters must be >= 0")
        if self.target_size < 1:
            raise ValueError(f"target_size must be >= 1, got {self.target_size}")


@dataclass(frozen=True)
class BackgroundResult:
    image: RasterImage
    mask: RasterImage  # 0/255, full input size
    box: Box
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class ContrastResult:
    image: RasterImage
    alpha: float
    beta: float
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class PreprocessResult:
    image: RasterImage
    box: Box
    alpha: float
    beta: float
    warnings: tuple[str, ...] = ()


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (platform-independent, unlike banker's)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    """Normalized sampled 2-D Gaussian, float64."""
    offsets = np.arange(ksize, dtype=np.float64) - (ksize - 1) / 2
    g = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    kern = np.outer(g, g)
    return kern / kern.sum()


def gaussian_blur(img: RasterImage, sigma: float, ksize: int) -> RasterImage:
    """Full 2-D convolution with edge-replicated borders."""
    if ksize % 2 == 0 or ksize < 1:
        raise ValueError(f"ksize must be odd, got {ksize}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    kern = gaussian_kernel(sigma, ksize)
    r = ksize // 2
    padded = np.pad(img.pixels.astype(np.float64), r, mode="edge")
    windows = sliding_window_view(padded, (ksize, ksize))
    out = np.tensordot(windows, kern, axes=([2, 3], [0, 1]))
    return RasterImage(_to_u8(out))


def unsharp_mask(img: RasterImage, cfg: PreprocessConfig) -> RasterImage:
    """original + amount * (original - blurred), clamped per pixel."""
    cfg.validate()
    blurred = gaussian_blur(img, cfg.gaussian_sigma, cfg.gaussian_ksize)
    orig = img.pixels.astype(np.float64)
    out = orig + cfg.unsharp_amount * (orig - blurred.pixels.astype(np.float64))
    return RasterImage(_to_u8(out))


def kmeans_threshold(img: RasterImage) -> int:
    """Two-cluster 1-D Lloyd's on the intensity multiset.

    Centroids start at the min and max intensity and iterate to an
    assignment fixed point; an intensity exactly at the midpoint joins the
    lower cluster. Returns floor of the final centroid midpoint. A constant
    image degenerates to that constant.
    """
    hist = np.bincount(img.pixels.ravel(), minlength=256).astype(np.float64)
    values = np.arange(256, dtype=np.float64)
    present = hist > 0
    lo = int(np.argmax(present))
    hi = 255 - int(np.argmax(present[::-1]))
    if lo == hi:
        return lo
    c0, c1 = float(lo), float(hi)
    prev_split = -1.0
    for _ in range(256):
        boundary = (c0 + c1) / 2.0
        if boundary == prev_split:
            break
        prev_split = boundary
        in0 = values <= boundary
        w0 = hist[in0].sum()
        w1 = hist[~in0].sum()
        c0 = float((hist[in0] * values[in0]).sum() / w0)
        c1 = float((hist[~in0] * values[~in0]).sum() / w1)
    return int(np.floor((c0 + c1) / 2.0))


def _binary_erode(mask: np.ndarray, ksize: int) -> np.ndarray:
    r = ksize // 2
    padded = np.pad(mask, r, mode="edge")
    return sliding_window_view(padded, (ksize, ksize)).all(axis=(2, 3))


def _binary_dilate(mask: np.ndarray, ksize: int) -> np.ndarray:
    r = ksize // 2
    padded = np.pad(mask, r, mode="edge")
    return sliding_window_view(padded, (ksize, ksize)).any(axis=(2, 3))


def _fill_holes(mask: np.ndarray) -> np.ndarray:
    """Interior 4-connected background pockets become foreground."""
    background, n = ndimage.label(~mask)
    if n == 0:
        return mask
    border = np.unique(
        np.concatenate(
            [background[0, :], background[-1, :], background[:, 0], background[:, -1]]
        )
    )
    border = border[border != 0]
    holes = (~mask) & ~np.isin(background, border)
    return mask | holes


def _mask_bbox(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def remove_background(img: RasterImage, cfg: PreprocessConfig) -> BackgroundResult:
    """Threshold at the k-means split, open with a square element, keep the
    largest 4-connected component, intersect with the raw threshold mask,
    fill interior holes, then zero the background and crop to the mask.

    Degenerate inputs (no foreground survives) come back unchanged with a
    full mask and a warning instead of an error, so batch jobs keep going.
    """
    cfg.validate()
    full_mask = RasterImage(np.full(img.pixels.shape, 255, dtype=np.uint8))
    full_box = Box(0, 0, img.width, img.height)

    work = img.pixels
    if cfg.renormalize_washed_out:
        mean = float(work.mean())
        if mean > 220.0:
            work = _to_u8(work.astype(np.float64) * (128.0 / mean))
    threshold = kmeans_threshold(RasterImage.from_array(work))
    raw_mask = work > threshold

    opened = raw_mask
    for _ in range(cfg.erode_iters):
        opened = _binary_erode(opened, cfg.morph_ksize)
    for _ in range(cfg.dilate_iters):
        opened = _binary_dilate(opened, cfg.morph_ksize)

    labels, n_components = ndimage.label(opened)
    if n_components == 0:
        return BackgroundResult(img, full_mask, full_box, (WARN_EMPTY_FOREGROUND,))
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    largest = labels == int(np.argmax(sizes))

    combined = raw_mask & largest
    if not combined.any():
        return BackgroundResult(img, full_mask, full_box, (WARN_EMPTY_FOREGROUND,))
    final = _fill_holes(combined)

    box = _mask_bbox(final)
    masked = np.where(final, img.pixels, 0).astype(np.uint8)
    cropped = masked[box.top : box.bottom, box.left : box.right]
    mask_img = RasterImage((final.astype(np.uint8) * 255))
    return BackgroundResult(RasterImage(cropped), mask_img, box)


def auto_brightness_contrast(
    img: RasterImage, clip_percent: float
) -> ContrastResult:
    """Histogram-clipped linear stretch g = alpha * f + beta onto [0, 255].

    minimum_gray is the smallest intensity whose cumulative fraction exceeds
    clip_percent; maximum_gray the largest whose upper-tail fraction does.
    A flat clipped range yields the identity transform plus a warning.
    """
    if not 0 <= clip_percent < 0.5:
        raise ValueError(f"clip_percent must be in [0, 0.5), got {clip_percent}")
    hist = np.bincount(img.pixels.ravel(), minlength=256)
    total = hist.sum()
    cum_frac = np.cumsum(hist) / total
    tail_frac = (total - np.concatenate(([0], np.cumsum(hist)[:-1]))) / total
    minimum_gray = int(np.argmax(cum_frac > clip_percent))
    above = tail_frac > clip_percent
    maximum_gray = 255 - int(np.argmax(above[::-1]))
    if maximum_gray <= minimum_gray:
        return ContrastResult(img, 1.0, 0.0, (WARN_FLAT_RANGE,))
    alpha = 255.0 / (maximum_gray - minimum_gray)
    beta = -minimum_gray * alpha
    out = _to_u8(alpha * img.pixels.astype(np.float64) + beta)
    return ContrastResult(RasterImage(out), alpha, beta)


def resize_bilinear(img: RasterImage, target: int) -> RasterImage:
    """Half-pixel-centered bilinear resample to a target x target square."""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    src = img.pixels.astype(np.float64)
    h, w = src.shape

    def axis_coords(n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(target, dtype=np.float64) + 0.5) * n_src / target - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bottom = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bottom * fy
    return RasterImage(_to_u8(out))


def preprocess(img: RasterImage, cfg: PreprocessConfig) -> PreprocessResult:
    """Fixed-order composition: background removal, contrast, sharpen, resize."""
    cfg.validate()
    bg = remove_background(img, cfg)
    contrast = auto_brightness_contrast(bg.image, cfg.clip_percent)
    sharpened = unsharp_mask(contrast.image, cfg)
    resized = resize_bilinear(sharpened, cfg.target_size)
    return PreprocessResult(
        image=resized,
        box=bg.box,
        alpha=contrast.alpha,
        beta=contrast.beta,
        warnings=bg.warnings + contrast.warnings,
    )
