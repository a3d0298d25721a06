"""Per-segment feature vectors.

Segments become fixed-size crops (mask bbox plus a border, background
zeroed, bilinear resize to 224) and crops become vectors, either through
the built-in histogram descriptor or by lookup in an external feature
file keyed by segment.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MissingFeatureError
from .formats import read_features

CROP_SIZE = 224
BORDER_FRACTION = 0.1
COLOR_BINS = 8
ORIENT_BINS = 16
BUILTIN_DIM = COLOR_BINS ** 3 + ORIENT_BINS


@dataclass(frozen=True)
class SegmentCrop:
    pixels: np.ndarray  # CROP_SIZE x CROP_SIZE x 3, in [0, 1]
    mask: np.ndarray  # CROP_SIZE x CROP_SIZE bool
    image_id: str = ""
    segment_key: Optional[int] = None
    bbox: tuple = (0, 0, 0, 0)  # source window, half-open (r0, c0, r1, c1)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    segment_key: Optional[int] = None

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resampling at half-pixel centers, no prefilter."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1.0 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1.0 - fx) + img[y1][:, x1] * fx
    return top * (1.0 - fy) + bot * fy


def crop_segment(
    image: np.ndarray,
    mask: np.ndarray,
    border_fraction: float = BORDER_FRACTION,
    image_id: str = "",
    segment_key: Optional[int] = None,
) -> SegmentCrop:
    """Cut the masked region out of the image as a CROP_SIZE crop.

    The mask's bounding box is widened by border_fraction of its height
    and width on each side (clamped to the image), pixels outside the
    mask are zeroed, and the window is resized. The resized mask is
    reapplied so background stays exactly zero after interpolation.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be HxW or HxWx3")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError("mask shape must match image shape")
    if not mask.any():
        raise ValueError("mask is empty")

    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    br = int(round(border_fraction * (r1 - r0 + 1)))
    bc = int(round(border_fraction * (c1 - c0 + 1)))
    r0 = max(0, r0 - br)
    c0 = max(0, c0 - bc)
    r1 = min(image.shape[0], r1 + br + 1)
    c1 = min(image.shape[1], c1 + bc + 1)

    window = image[r0:r1, c0:c1] * mask[r0:r1, c0:c1, None]
    pixels = bilinear_resize(window, CROP_SIZE, CROP_SIZE)
    support = bilinear_resize(mask[r0:r1, c0:c1].astype(np.float64), CROP_SIZE, CROP_SIZE) > 0.0
    pixels[~support] = 0.0
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return SegmentCrop(
        pixels=pixels,
        mask=support,
        image_id=image_id,
        segment_key=segment_key,
        bbox=(r0, c0, r1, c1),
    )


def _l2(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # no support at all: fall back to a uniform block
        vec = np.ones_like(vec)
        norm = float(np.linalg.norm(vec))
    return vec / norm


def builtin_descriptor(pixels: np.ndarray) -> np.ndarray:
    """Color plus gradient-orientation histograms of a zero-padded crop.

    The color block counts nonzero pixels into an 8x8x8 RGB cube; the
    orientation block weights 16 angle bins by gradient magnitude, taken
    from central differences of luminance only where the pixel and its
    four neighbours are all nonzero, so the mask border contributes no
    fake edges. Both blocks are L2-normalized.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    fg = pixels.any(axis=2)

    color = np.zeros(COLOR_BINS ** 3)
    if fg.any():
        quant = np.minimum((pixels[fg] * COLOR_BINS).astype(np.intp), COLOR_BINS - 1)
        flat = (quant[:, 0] * COLOR_BINS + quant[:, 1]) * COLOR_BINS + quant[:, 2]
        color = np.bincount(flat, minlength=COLOR_BINS ** 3).astype(np.float64)

    lum = pixels.mean(axis=2)
    orient = np.zeros(ORIENT_BINS)
    inner = fg[1:-1, 1:-1] & fg[:-2, 1:-1] & fg[2:, 1:-1] & fg[1:-1, :-2] & fg[1:-1, 2:]
    if inner.any():
        gx = (lum[1:-1, 2:] - lum[1:-1, :-2]) / 2.0
        gy = (lum[2:, 1:-1] - lum[:-2, 1:-1]) / 2.0
        mag = np.hypot(gx[inner], gy[inner])
        ang = np.arctan2(gy[inner], gx[inner])
        bins = np.minimum(
            ((ang + np.pi) / (2.0 * np.pi / ORIENT_BINS)).astype(np.intp), ORIENT_BINS - 1
        )
        orient = np.bincount(bins, weights=mag, minlength=ORIENT_BINS)

    return np.concatenate([_l2(color), _l2(orient)])


class BuiltinProvider:
    """Self-contained descriptor, D_in = 528."""

    dim = BUILTIN_DIM

    def __call__(self, crop: SegmentCrop) -> np.ndarray:
        return builtin_descriptor(crop.pixels)


class FileProvider:
    """Vectors precomputed elsewhere, looked up by segment key."""

    def __init__(self, source):
        if isinstance(source, (str, os.PathLike)):
            self.table = read_features(source)
        else:
            self.table = {int(k): np.asarray(v, dtype=np.float64) for k, v in dict(source).items()}
        self.dim = int(next(iter(self.table.values())).shape[0]) if self.table else 0

    def __call__(self, crop: SegmentCrop) -> np.ndarray:
        key = crop.segment_key
        if key is None or key not in self.table:
            raise MissingFeatureError(f"no feature record for segment key {key!r}")
        return np.asarray(self.table[key], dtype=np.float64).copy()


def describe(crop: SegmentCrop, provider) -> FeatureVector:
    values = np.asarray(provider(crop), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("feature vector contains non-finite values")
    return FeatureVector(values=values, segment_key=crop.segment_key)
