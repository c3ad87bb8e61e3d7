"""Point-cloud agreement metrics in the unit-box protocol.

Both clouds are first expressed in the frame where the reference cloud's
bounding box is centred and its longest side is 1. Chamfer is reported
x1000, F-score and IoU in percent.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def _cloud(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise ValueError("point cloud is empty")
    return arr


def normalize_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Shift and uniformly scale both clouds so that ``b`` fits [-0.5, 0.5]^3."""
    a, b = _cloud(a), _cloud(b)
    lo, hi = b.min(axis=0), b.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise ValueError("reference cloud has a degenerate (zero-extent) bounding box")
    center = 0.5 * (lo + hi)
    return (a - center) / extent, (b - center) / extent


def sq_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = p - q
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_sq_dist(a, b, candidates: int = 8) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest point in ``b``.

    A k-d tree proposes candidates; the exact value is recomputed with
    :func:`sq_dist` so results match a brute-force search bit for bit.
    """
    a, b = _cloud(a), _cloud(b)
    k = min(candidates, len(b))
    _, idx = cKDTree(b).query(a, k=k)
    idx = np.asarray(idx).reshape(len(a), k)
    return sq_dist(a[:, None, :], b[idx]).min(axis=1)


def chamfer_l2(a, b) -> float:
    return float((nearest_sq_dist(a, b).mean() + nearest_sq_dist(b, a).mean()) * 1000.0)


def precision_recall(a, b, tau: float = 0.01) -> tuple[float, float]:
    p = float(np.mean(np.sqrt(nearest_sq_dist(a, b)) < tau))
    r = float(np.mean(np.sqrt(nearest_sq_dist(b, a)) < tau))
    return p, r


def f_score(a, b, tau: float = 0.01) -> float:
    p, r = precision_recall(a, b, tau)
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r) * 100.0


def occupancy(p, resolution: int) -> set[tuple[int, int, int]]:
    """Occupied voxel indices of the points inside [-0.5, 0.5]^3."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    p = p[np.all((p >= -0.5) & (p <= 0.5), axis=1)]
    idx = np.minimum(np.floor((p + 0.5) * resolution).astype(np.int64), resolution - 1)
    return set(map(tuple, np.unique(idx, axis=0).tolist()))


def voxel_iou(a, b, resolution: int = 32) -> float:
    """Occupancy IoU in percent (the mIoU stand-in)."""
    oa, ob = occupancy(a, resolution), occupancy(b, resolution)
    union = oa | ob
    if not union:
        raise ValueError("both occupancies are empty")
    return len(oa & ob) / len(union) * 100.0


def cloud_metrics(sim, real, tau: float = 0.01, iou_resolution: int = 32) -> dict[str, float]:
    """All three metrics after normalizing against ``real``."""
    a, b = normalize_pair(sim, real)
    return {
        "chamfer_l2_x1000": chamfer_l2(a, b),
        "f_score": f_score(a, b, tau),
        "voxel_iou": voxel_iou(a, b, iou_resolution),
    }
