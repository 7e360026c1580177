"""Raster buffer types shared by the whole engine.

Conventions, fixed once here:
  - RGB images are float arrays of shape (H, W, 3) with values in [0, 1].
  - Alpha masks are float arrays of shape (H, W) in [0, 1]; a pixel is
    "known" iff its value >= KNOWN_THRESHOLD.
  - Depth maps carry metric values (meters) plus an explicit validity plane;
    valid entries are finite and > 0.
  - PNG interchange: RGB as 8-bit, masks as 8-bit grayscale (255 = known),
    depth as 16-bit grayscale storing round(depth_m * 1000), 0 = invalid,
    saturating at 65535.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import InputError

KNOWN_THRESHOLD = 0.5
DEPTH_PNG_SCALE = 1000.0  # stored unit: millimeters


def validate_rgb(image: np.ndarray) -> np.ndarray:
    """Check an (H, W, 3) float image in [0, 1]; returns it as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"rgb image must have shape (H, W, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError("rgb image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("rgb image values must lie in [0, 1]")
    return arr


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check an (H, W) float mask in [0, 1]; returns it as float64."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"mask must have shape (H, W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError("mask contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("mask values must lie in [0, 1]")
    return arr


def known(mask: np.ndarray, threshold: float = KNOWN_THRESHOLD) -> np.ndarray:
    """Boolean plane of pixels the mask marks as known."""
    return np.asarray(mask) >= threshold


@dataclass
class DepthMap:
    """Metric depth raster with explicit per-pixel validity.

    `values` holds camera-frame z-depth in meters; entries where `validity`
    is False are meaningless and must not be read.
    """

    values: np.ndarray
    validity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"depth values must be 2-D, got shape {self.values.shape}")
        if self.validity is None:
            self.validity = np.isfinite(self.values) & (self.values > 0)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.validity.shape != self.values.shape:
            raise InputError("depth validity shape must match values")
        valid = self.values[self.validity]
        if valid.size and (not np.isfinite(valid).all() or (valid <= 0).any()):
            raise InputError("valid depth entries must be finite and > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.validity.copy())


@dataclass
class PointMap:
    """Per-pixel 3-D world points with validity, shape (H, W, 3) / (H, W)."""

    points: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise InputError(f"point map must have shape (H, W, 3), got {self.points.shape}")
        if self.validity.shape != self.points.shape[:2]:
            raise InputError("point map validity shape mismatch")


# ---------------------------------------------------------------------------
# PNG interchange


def save_rgb_png(image: np.ndarray, path) -> None:
    arr = validate_rgb(image)
    data = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


def save_mask_png(mask: np.ndarray, path) -> None:
    """8-bit grayscale, 255 = known."""
    arr = validate_mask(mask)
    data = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64)
    return data / 255.0


def depth_to_u16(depth: DepthMap) -> np.ndarray:
    """Quantize to the wire/file encoding: mm, 0 = invalid, saturating."""
    mm = np.floor(depth.values * DEPTH_PNG_SCALE + 0.5)
    mm = np.clip(mm, 1.0, 65535.0)  # reserve 0 for invalid
    out = np.where(depth.validity, mm, 0.0)
    return out.astype(np.uint16)


def depth_from_u16(data: np.ndarray) -> DepthMap:
    arr = np.asarray(data, dtype=np.uint16)
    validity = arr > 0
    values = arr.astype(np.float64) / DEPTH_PNG_SCALE
    values[~validity] = np.nan
    return DepthMap(values, validity)


def save_depth_png(depth: DepthMap, path) -> None:
    Image.fromarray(depth_to_u16(depth), mode="I;16").save(path, format="PNG")


def load_depth_png(path) -> DepthMap:
    with Image.open(path) as im:
        data = np.asarray(im, dtype=np.uint16)
    return depth_from_u16(data)
