"""Seeded random training-time augmentation.

Each training batch is fed copies of its images warped by a randomly
sampled affine transform (rotation, shift, zoom, shear) plus optional
horizontal/vertical flips. Labels are always carried over unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import LabelVector
from .errors import ShapeMismatch
from .imaging import RawImage


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges for the random transform parameters."""

    rotation_range: float = 360.0  # degrees
    shift_limit: float = 10.0  # pixels, per axis
    zoom_factor: float = 0.30  # zoom drawn from [1 - z, 1 + z]
    shear_factor: float = 0.20
    flip_probability: float = 0.5

    def __post_init__(self):
        if min(self.rotation_range, self.shift_limit, self.zoom_factor,
               self.shear_factor) < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")
        if self.rotation_range > 360.0:
            raise ValueError("rotation_range must be at most 360 degrees")


@dataclass(frozen=True)
class TransformParams:
    """One sampled realization of an AugmentConfig."""

    angle: float
    dx: float
    dy: float
    zoom: float
    shear: float
    flip_h: bool
    flip_v: bool

    @classmethod
    def identity(cls) -> "TransformParams":
        return cls(angle=0.0, dx=0.0, dy=0.0, zoom=1.0, shear=0.0,
                   flip_h=False, flip_v=False)


def sample_params(cfg: AugmentConfig, rng: np.random.Generator) -> TransformParams:
    """Draw transform parameters uniformly from the configured ranges."""
    return TransformParams(
        angle=float(rng.uniform(0.0, cfg.rotation_range)),
        dx=float(rng.uniform(-cfg.shift_limit, cfg.shift_limit)),
        dy=float(rng.uniform(-cfg.shift_limit, cfg.shift_limit)),
        zoom=float(rng.uniform(1.0 - cfg.zoom_factor, 1.0 + cfg.zoom_factor)),
        shear=float(rng.uniform(-cfg.shear_factor, cfg.shear_factor)),
        flip_h=bool(rng.random() < cfg.flip_probability),
        flip_v=bool(rng.random() < cfg.flip_probability),
    )


def forward_matrix(params: TransformParams) -> np.ndarray:
    """2x2 forward map (input -> output) in (x, y) coordinates.

    Composition order: rotate about the center, zoom, then shear;
    translation is handled separately.
    """
    theta = math.radians(params.angle)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    zoom = np.array([[params.zoom, 0.0], [0.0, params.zoom]])
    shear = np.array([[1.0, params.shear], [0.0, 1.0]])
    return shear @ zoom @ rot


def apply_transform(
    img: RawImage, labels: LabelVector, params: TransformParams
) -> tuple[RawImage, LabelVector]:
    """Warp the image by one composed affine transform, then flip.

    Pixels pulled from outside the frame are filled by nearest-edge
    replication. Labels are returned unchanged.
    """
    if img.channels != 3:
        raise ShapeMismatch(f"expected a 3-channel image, got {img.channels}")
    pixels = img.pixels

    is_identity = (
        params.angle == 0.0
        and params.dx == 0.0
        and params.dy == 0.0
        and params.zoom == 1.0
        and params.shear == 0.0
    )
    if not is_identity:
        h, w = pixels.shape[:2]
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        fwd = forward_matrix(params)
        inv = np.linalg.inv(fwd)
        # ndimage maps output (row, col) -> input; swap axes from (x, y).
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        matrix = swap @ inv @ swap
        shift = np.array([params.dx, params.dy])
        offset_xy = center - inv @ (center + shift)
        offset = offset_xy[::-1]
        warped = np.empty_like(pixels)
        src = pixels.astype(np.float64)
        for c in range(3):
            out = ndimage.affine_transform(
                src[..., c], matrix, offset=offset, order=1, mode="nearest"
            )
            warped[..., c] = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        pixels = warped

    if params.flip_h:
        pixels = pixels[:, ::-1]
    if params.flip_v:
        pixels = pixels[::-1, :]
    return RawImage(np.ascontiguousarray(pixels)), labels
