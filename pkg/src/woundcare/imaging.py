"""Image decoding, resizing, and contrast normalization.

Wound photographs arrive as JPEG/PNG payloads, get resized to the
network input resolution, and are contrast-normalized with CLAHE
(contrast-limited adaptive histogram equalization) applied to the
luminance channel before being converted to a mean-centered float
array the classifier consumes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    EmptyImage,
    ImageTooSmall,
    MalformedImage,
    ShapeMismatch,
    UnsupportedFormat,
)

INPUT_SIZE = 224
HISTOGRAM_BINS = 256

# Channel means (RGB, on the 0-1 scale) subtracted during normalization.
CHANNEL_MEANS = (0.485, 0.456, 0.406)
PREPROCESSING_TAG = "rgb-unit-imagenet-mean"

# Rec. 601 luma weights, used to split luminance from chroma for CLAHE.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RawImage:
    """8-bit RGB image, pixels in row-major (height, width, channel) order."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeMismatch(f"expected (h, w, 3) pixel array, got {p.shape}")
        if p.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {p.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class ClaheConfig:
    """Tile grid size (per axis) and relative clip limit."""

    tile_grid: int = 8
    clip_factor: float = 1.0

    def __post_init__(self):
        if self.tile_grid < 1:
            raise ValueError("tile_grid must be >= 1")
        if self.clip_factor <= 0:
            raise ValueError("clip_factor must be > 0")


@dataclass(frozen=True)
class ModelInput:
    """Normalized real-valued array ready for the classifier.

    ``preprocessing_tag`` names the normalization convention so that
    serialized models remain self-describing.
    """

    data: np.ndarray
    preprocessing_tag: str = PREPROCESSING_TAG

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeMismatch(f"expected (h, w, 3) array, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("model input contains non-finite values")


def decode_image(payload: bytes) -> RawImage:
    """Decode a JPEG or PNG payload into an RGB image.

    Grayscale inputs are replicated across the three channels. Raises
    MalformedImage for undecodable bytes and UnsupportedFormat for any
    other image format.
    """
    try:
        with Image.open(io.BytesIO(payload)) as im:
            fmt = im.format
            if fmt not in ("JPEG", "PNG"):
                raise UnsupportedFormat(f"unsupported image format: {fmt}")
            rgb = im.convert("RGB")
            pixels = np.asarray(rgb, dtype=np.uint8)
    except UnsupportedFormat:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise MalformedImage(f"cannot decode image payload: {exc}") from exc
    return RawImage(pixels)


def resize_image(img: RawImage, size: int) -> RawImage:
    """Bilinear resize to ``size`` x ``size`` pixels.

    Aspect distortion is permitted; source photographs are pre-cropped
    squares.
    """
    if img.width == 0 or img.height == 0:
        raise EmptyImage("cannot resize an image with a zero dimension")
    if img.width == size and img.height == size:
        return img
    resized = cv2.resize(img.pixels, (size, size), interpolation=cv2.INTER_LINEAR)
    return RawImage(resized)


def resize_to_input(img: RawImage) -> RawImage:
    """Resize to the classifier's native input resolution."""
    return resize_image(img, INPUT_SIZE)


def _tile_lut(hist: np.ndarray, tile_pixels: int, clip_factor: float) -> np.ndarray:
    """Equalization lookup table for one tile's histogram.

    The clip limit is ``clip_factor`` times the mean bin content (at
    least 1); clipped excess is redistributed uniformly across bins,
    with the integer remainder stepped through the low bins. A tile
    with a single occupied bin has no contrast to equalize and maps
    through the identity.
    """
    nbins = HISTOGRAM_BINS
    if np.count_nonzero(hist) <= 1:
        return np.arange(nbins, dtype=np.float64)
    clip = max(int(clip_factor * tile_pixels / nbins), 1)
    hist = hist.astype(np.int64, copy=True)
    over = hist > clip
    excess = int((hist[over] - clip).sum())
    hist[over] = clip
    hist += excess // nbins
    residual = excess - (excess // nbins) * nbins
    if residual:
        step = max(nbins // residual, 1)
        hist[0 : residual * step : step] += 1
    cdf = np.cumsum(hist)
    lut = np.floor(cdf * ((nbins - 1) / tile_pixels) + 0.5)
    return np.clip(lut, 0, nbins - 1)


def _clahe_plane(plane: np.ndarray, cfg: ClaheConfig) -> np.ndarray:
    """CLAHE on a single uint8 plane; returns float64 values in [0, 255].

    Per-tile equalization transforms are blended with bilinear
    interpolation between tile centers to avoid visible tile borders.
    The image is reflect-padded when its sides are not multiples of
    the grid.
    """
    grid = cfg.tile_grid
    h, w = plane.shape
    pad_h = (grid - h % grid) % grid
    pad_w = (grid - w % grid) % grid
    padded = plane
    if pad_h or pad_w:
        padded = np.pad(plane, ((0, pad_h), (0, pad_w)), mode="reflect")
    ph, pw = padded.shape
    th, tw = ph // grid, pw // grid
    tile_pixels = th * tw

    luts = np.empty((grid, grid, HISTOGRAM_BINS), dtype=np.float64)
    for i in range(grid):
        for j in range(grid):
            tile = padded[i * th : (i + 1) * th, j * tw : (j + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=HISTOGRAM_BINS)
            luts[i, j] = _tile_lut(hist, tile_pixels, cfg.clip_factor)

    rows, cols = np.mgrid[0:ph, 0:pw]
    fy = rows / th - 0.5
    fx = cols / tw - 0.5
    iy = np.floor(fy).astype(np.intp)
    ix = np.floor(fx).astype(np.intp)
    wy = fy - iy
    wx = fx - ix
    y0 = np.clip(iy, 0, grid - 1)
    y1 = np.clip(iy + 1, 0, grid - 1)
    x0 = np.clip(ix, 0, grid - 1)
    x1 = np.clip(ix + 1, 0, grid - 1)

    v = padded
    blended = (1 - wy) * ((1 - wx) * luts[y0, x0, v] + wx * luts[y0, x1, v]) + wy * (
        (1 - wx) * luts[y1, x0, v] + wx * luts[y1, x1, v]
    )
    return blended[:h, :w]


def apply_clahe(img: RawImage, cfg: ClaheConfig | None = None) -> RawImage:
    """Contrast-limited adaptive histogram equalization.

    Equalization runs on the luminance channel only; the resulting
    luminance shift is added to all three channels, which preserves
    chroma and avoids hue drift. Output dimensions equal the input's.
    """
    cfg = cfg or ClaheConfig()
    if img.height < cfg.tile_grid or img.width < cfg.tile_grid:
        raise ImageTooSmall(
            f"{img.width}x{img.height} image cannot be split into a "
            f"{cfg.tile_grid}x{cfg.tile_grid} tile grid"
        )
    pixels = img.pixels
    luma = np.rint(pixels.astype(np.float64) @ _LUMA_WEIGHTS).astype(np.uint8)
    equalized = _clahe_plane(luma, cfg)
    delta = equalized - luma.astype(np.float64)
    out = np.clip(np.rint(pixels.astype(np.float64) + delta[..., None]), 0, 255)
    return RawImage(out.astype(np.uint8))


def to_model_input(img: RawImage, size: int = INPUT_SIZE) -> ModelInput:
    """Scale to [0, 1] and subtract the per-channel means.

    Deterministic; the applied convention is recorded in the returned
    ModelInput's ``preprocessing_tag``.
    """
    if img.height != size or img.width != size or img.channels != 3:
        raise ShapeMismatch(
            f"expected {size}x{size}x3 image, got "
            f"{img.height}x{img.width}x{img.channels}"
        )
    data = img.pixels.astype(np.float32) / np.float32(255.0)
    data -= np.asarray(CHANNEL_MEANS, dtype=np.float32)
    return ModelInput(data=data, preprocessing_tag=PREPROCESSING_TAG)
