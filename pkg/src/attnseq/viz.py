"""Attention-map reconstruction and netpbm export.

An attention map is the attention-vector-weighted sum of the extractor's
per-channel spatial maps, upsampled back to frame size for overlay:

    A[h,w] = sum_i a[i] * F[i][h,w]

Pure numpy; nothing here touches the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .features import resize_bilinear


@dataclass
class AttentionMap:
    frame_index: int
    map: np.ndarray        # [h', w'] at extractor resolution
    overlay: np.ndarray    # [H, W] upsampled to the input frame


def attention_map(a: np.ndarray, maps: np.ndarray) -> np.ndarray:
    """Weighted sum of spatial maps: a [m] against maps [m, h, w]."""
    a = np.asarray(a)
    maps = np.asarray(maps)
    if a.ndim != 1 or maps.ndim != 3 or a.shape[0] != maps.shape[0]:
        raise DimensionError(f"attention_map: {a.shape} weights for {maps.shape} maps")
    return np.tensordot(a, maps, axes=1)


def upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling to (out_h, out_w)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DimensionError(f"upsample: expected a 2-d grid, got {grid.shape}")
    if out_h < grid.shape[0] or out_w < grid.shape[1]:
        raise ContractError(f"upsample target {(out_h, out_w)} smaller than source {grid.shape}")
    return resize_bilinear(grid, out_h, out_w)


def normalize01(grid: np.ndarray) -> np.ndarray:
    """Min-max to [0,1]; a constant grid maps to all 0.5."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.full_like(grid, 0.5)
    return (grid - lo) / (hi - lo)


def export_pgm(grid: np.ndarray, path):
    """Min-max normalized binary P5 graymap; constant grids become mid-gray 128."""
    grid = np.asarray(grid)
    if not np.isfinite(grid).all():
        raise NumericError("export_pgm: grid has non-finite values")
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        pix = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        pix = np.clip(np.rint((grid - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def export_ppm(image: np.ndarray, path):
    """Binary P6 for an [H, W, 3] image with channels in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"export_ppm: expected [H,W,3], got {image.shape}")
    if not np.isfinite(image).all():
        raise NumericError("export_ppm: image has non-finite values")
    pix = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def side_by_side(frame: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Frame next to its grayscale attention map, as one [H, 2W, 3] image."""
    if frame.shape[:2] != heat.shape:
        raise DimensionError(f"frame {frame.shape} and map {heat.shape} disagree")
    gray = normalize01(heat)
    return np.concatenate([frame, np.repeat(gray[:, :, None], 3, axis=2)], axis=1)


def localization_score(grid: np.ndarray, mask: np.ndarray):
    """(mean inside mask, mean outside) of the min-max normalized map."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise DimensionError(f"mask {mask.shape} does not match map {np.asarray(grid).shape}")
    if not mask.any() or mask.all():
        raise ContractError("mask must have both inside and outside pixels")
    norm = normalize01(grid)
    return float(norm[mask].mean()), float(norm[~mask].mean())
