"""Truncated signed-distance fusion of depth maps and zero-crossing point extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import DepthMap, project


@dataclass(frozen=True)
class GridConfig:
    bounds_min: tuple[float, float, float] = (-1.6, -1.6, 0.6)
    bounds_max: tuple[float, float, float] = (1.6, 1.6, 4.2)
    resolution: int = 64
    trunc_voxels: float = 3.0

    @property
    def voxel_size(self) -> float:
        ext = np.asarray(self.bounds_max, dtype=np.float64) - np.asarray(self.bounds_min, dtype=np.float64)
        if np.any(ext <= 0):
            raise ValueError(f"empty grid bounds {self.bounds_min} .. {self.bounds_max}")
        return float(ext.max()) / self.resolution

    @property
    def truncation(self) -> float:
        return self.trunc_voxels * self.voxel_size

    def to_dict(self) -> dict:
        return {"bounds_min": list(self.bounds_min), "bounds_max": list(self.bounds_max),
                "resolution": self.resolution, "trunc_voxels": self.trunc_voxels}


@dataclass
class TsdfGrid:
    config: GridConfig
    sdf: np.ndarray      # (R, R, R), indexed [ix, iy, iz]
    weight: np.ndarray   # (R, R, R)

    def centers(self) -> np.ndarray:
        return voxel_centers(self.config)


def voxel_centers(cfg: GridConfig) -> np.ndarray:
    r = cfg.resolution
    idx = (np.arange(r, dtype=np.float64) + 0.5) * cfg.voxel_size
    lo = np.asarray(cfg.bounds_min, dtype=np.float64)
    gx, gy, gz = np.meshgrid(idx + lo[0], idx + lo[1], idx + lo[2], indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def _canonical_order(maps: list[DepthMap]) -> list[DepthMap]:
    # integration order fixed by content so the fused grid is independent of input order
    def key(m: DepthMap):
        return (m.pose.tobytes(), m.depth.tobytes(), m.mask.tobytes())
    return sorted(maps, key=key)


def fuse_depths(maps: list[DepthMap], cfg: GridConfig) -> TsdfGrid:
    """Uniform-weight projective TSDF integration."""
    if not maps:
        raise ValueError("fusion needs at least one depth map")
    r = cfg.resolution
    trunc = cfg.truncation
    pts = voxel_centers(cfg).reshape(-1, 3)
    total = np.zeros(len(pts))
    weight = np.zeros(len(pts))
    for m in _canonical_order(list(maps)):
        uvz = project(pts, m.intrinsics, m.pose)
        z = uvz[:, 2]
        ok = z > 1e-6
        u = np.full(len(pts), -1, dtype=np.int64)
        v = np.full(len(pts), -1, dtype=np.int64)
        u[ok] = np.floor(uvz[ok, 0] + 0.5).astype(np.int64)
        v[ok] = np.floor(uvz[ok, 1] + 0.5).astype(np.int64)
        ok &= (u >= 0) & (u < m.width) & (v >= 0) & (v < m.height)
        idx = np.nonzero(ok)[0]
        valid = m.mask[v[idx], u[idx]]
        idx = idx[valid]
        sdf = m.depth[v[idx], u[idx]].astype(np.float64) - z[idx]
        keep = sdf >= -trunc
        idx, sdf = idx[keep], np.minimum(sdf[keep], trunc)
        total[idx] += sdf
        weight[idx] += 1.0
    sdf = np.full(len(pts), trunc)
    seen = weight > 0
    sdf[seen] = total[seen] / weight[seen]
    return TsdfGrid(cfg, sdf.reshape(r, r, r), weight.reshape(r, r, r))


def extract_points(grid: TsdfGrid) -> np.ndarray:
    """Midpoints of axis-neighbour voxel centres whose signed distances change sign."""
    trunc = grid.config.truncation
    centers = grid.centers()
    inside = (grid.weight > 0) & (np.abs(grid.sdf) < trunc)
    out = []
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        s0, s1 = grid.sdf[a], grid.sdf[b]
        hit = inside[a] & inside[b] & (((s0 < 0) & (s1 >= 0)) | ((s0 >= 0) & (s1 < 0)))
        out.append(0.5 * (centers[a][hit] + centers[b][hit]))
    return np.concatenate(out, axis=0) if out else np.zeros((0, 3))


def fuse_to_points(maps: list[DepthMap], cfg: GridConfig) -> np.ndarray:
    return extract_points(fuse_depths(maps, cfg))
