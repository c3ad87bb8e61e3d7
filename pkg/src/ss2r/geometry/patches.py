from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import DepthMap, unproject

REAL = 0
GENERATED = 1


@dataclass
class PointPatch:
    """3D points of one depth window together with the CAD points of the same window."""

    points: np.ndarray
    cad_points: np.ndarray
    label: int | None
    origin: tuple[int, int]  # (row, col) of the window's top-left pixel
    size: int


def windows(h: int, w: int, patch_px: int):
    if patch_px < 1 or patch_px > h or patch_px > w:
        raise ValueError(f"patch size {patch_px} does not fit a {h}x{w} map")
    if h % patch_px or w % patch_px:
        raise ValueError(f"patch size {patch_px} must divide the map size {h}x{w}")
    for r in range(0, h, patch_px):
        for c in range(0, w, patch_px):
            yield r, c, (slice(r, r + patch_px), slice(c, c + patch_px))


def split_patches(d: DepthMap, cad: DepthMap, patch_px: int, min_points: int = 32,
                  label: int | None = None) -> list[PointPatch]:
    """Tile both maps into non-overlapping windows and unproject each one.

    Windows where either map has fewer than ``min_points`` valid pixels are
    skipped.
    """
    if d.depth.shape != cad.depth.shape:
        raise ValueError(f"map shapes differ: {d.depth.shape} vs {cad.depth.shape}")
    out = []
    for r, c, win in windows(d.height, d.width, patch_px):
        if d.mask[win].sum() < min_points or cad.mask[win].sum() < min_points:
            continue
        out.append(PointPatch(unproject(d, win), unproject(cad, win), label, (r, c), patch_px))
    return out


def fixed_size(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Subsample without replacement, or repeat-pad, to exactly ``n`` points."""
    k = len(points)
    if k == 0:
        raise ValueError("cannot resize an empty point set")
    if k >= n:
        idx = np.sort(rng.choice(k, size=n, replace=False)) if k > n else np.arange(n)
    else:
        idx = np.concatenate([np.arange(k), rng.choice(k, size=n - k, replace=True)])
    return points[idx]
