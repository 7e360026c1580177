"""Depth-map algebra: inverse-depth affine alignment, forward warping to
novel views, and margin cropping.

Alignment fits (alpha, beta) minimizing sum ||alpha/D_est + beta - 1/D_ref||^2
over jointly-valid masked pixels via the 2x2 normal equations in double
precision; the fit lives in inverse-depth space throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_geometry import CameraIntrinsics, CameraPose, project, unproject
from .errors import DegeneracyError, InputError
from .rasters import KNOWN_THRESHOLD, DepthMap, known, validate_mask, validate_rgb


@dataclass(frozen=True)
class AffineDepthParams:
    """Scale/offset on inverse estimated depth: 1/D_aligned = alpha/D_est + beta."""

    alpha: float
    beta: float


def align_depth_affine(estimated: DepthMap, rendered: DepthMap,
                       mask: np.ndarray) -> AffineDepthParams:
    """Closed-form least squares for the inverse-depth affine fit.

    Fits over pixels that are valid in both maps and known in `mask`.
    Raises InputError with fewer than 2 usable pixels and DegeneracyError
    when the inverse estimated depth is constant (singular normal matrix).
    """
    mask = validate_mask(mask)
    if estimated.shape != rendered.shape or mask.shape != estimated.shape:
        raise InputError("estimated/rendered/mask shapes must match")
    sel = estimated.validity & rendered.validity & known(mask)
    n = int(sel.sum())
    if n < 2:
        raise InputError(f"affine depth fit needs >= 2 pixels, got {n}")
    x = 1.0 / estimated.values[sel]
    y = 1.0 / rendered.values[sel]
    sx, sxx = x.sum(), (x * x).sum()
    sy, sxy = y.sum(), (x * y).sum()
    # Normal matrix [[sxx, sx], [sx, n]]; its determinant is n^2 * var(x)
    # and vanishes iff the inverse estimated depth is constant.
    var_x = sxx / n - (sx / n) ** 2
    if var_x <= 1e-14 * (sxx / n):
        raise DegeneracyError("inverse estimated depth is constant; fit is singular")
    det = n * sxx - sx * sx
    alpha = (n * sxy - sx * sy) / det
    beta = (sxx * sy - sx * sxy) / det
    return AffineDepthParams(alpha=float(alpha), beta=float(beta))


def apply_affine(estimated: DepthMap, params: AffineDepthParams) -> DepthMap:
    """D_aligned = 1 / (alpha/D_est + beta); non-positive results invalidate."""
    inv = np.where(estimated.validity, params.alpha / np.where(
        estimated.validity, estimated.values, 1.0) + params.beta, -1.0)
    validity = estimated.validity & (inv > 0)
    values = np.where(validity, 1.0 / np.where(validity, inv, 1.0), np.nan)
    return DepthMap(values, validity)


def forward_warp(image: np.ndarray, depth: DepthMap, src: CameraPose,
                 dst: CameraPose, intrinsics: CameraIntrinsics,
                 dst_intrinsics: CameraIntrinsics | None = None):
    """Splat `image` from the src view into the dst view.

    Unprojects under src, projects under dst, and z-buffers with a one-pixel
    footprint: the nearest-depth source pixel wins each destination pixel,
    ties broken by the smaller source linear index. Returns (rgb, alpha)
    where alpha is 1 exactly where a source pixel landed.
    """
    image = validate_rgb(image)
    if image.shape[:2] != depth.shape:
        raise InputError("depth must be registered to the image")
    dst_intr = dst_intrinsics or intrinsics
    pts = unproject(depth, intrinsics, src)
    u, v, z, ok = project(pts.points, pts.validity, dst_intr, dst)

    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    ok = ok & (ui >= 0) & (ui < dst_intr.width) & (vi >= 0) & (vi < dst_intr.height)

    out = np.zeros((dst_intr.height, dst_intr.width, 3))
    alpha = np.zeros((dst_intr.height, dst_intr.width))
    src_idx = np.flatnonzero(ok.reshape(-1))
    if src_idx.size == 0:
        return out, alpha
    flat_dst = (vi.reshape(-1)[src_idx] * dst_intr.width + ui.reshape(-1)[src_idx])
    zf = z.reshape(-1)[src_idx]
    order = np.lexsort((src_idx, zf, flat_dst))
    flat_sorted = flat_dst[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = src_idx[order[first]]
    targets = flat_sorted[first]
    out.reshape(-1, 3)[targets] = image.reshape(-1, 3)[winners]
    alpha.reshape(-1)[targets] = 1.0
    return out, alpha


def crop_margins(image: np.ndarray, fraction: float) -> np.ndarray:
    """Remove round(fraction * W) columns from each side; height unchanged."""
    arr = np.asarray(image)
    if not (0.0 <= fraction < 0.5):
        raise InputError(f"crop fraction must lie in [0, 0.5), got {fraction}")
    w = arr.shape[1]
    m = crop_margin_px(w, fraction)
    if m == 0:
        return arr.copy()
    if w - 2 * m < 1:
        raise InputError("crop fraction removes the whole image")
    return arr[:, m:w - m].copy()


def crop_margin_px(width: int, fraction: float) -> int:
    return int(np.floor(fraction * width + 0.5))


def crop_margins_depth(depth: DepthMap, fraction: float) -> DepthMap:
    return DepthMap(crop_margins(depth.values, fraction),
                    crop_margins(depth.validity, fraction))


def unknown_from_alpha(alpha: np.ndarray, threshold: float = KNOWN_THRESHOLD) -> np.ndarray:
    """Binary generate-mask (1 = unknown/to generate) from a rendered alpha map."""
    return (~known(validate_mask(alpha), threshold)).astype(np.float64)
