from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class DepthMap:
    """Metric z-depth image with validity mask, pinhole intrinsics and camera-to-world pose.

    Pixel (u, v) is column u, row v; its ray passes through ((u - cx) / fx, (v - cy) / fy, 1).
    """

    depth: np.ndarray
    mask: np.ndarray
    intrinsics: Intrinsics
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.depth.ndim != 2 or self.depth.shape != self.mask.shape:
            raise ValueError(f"depth {self.depth.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        if np.any(self.depth[self.mask] <= 0):
            raise ValueError("valid depths must be positive")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def with_depth(self, depth: np.ndarray, mask: np.ndarray | None = None) -> "DepthMap":
        m = self.mask if mask is None else mask
        d = np.where(m, depth, 0.0)
        return DepthMap(d, m, self.intrinsics, self.pose.copy())


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose for an x-right, y-down, z-forward camera at ``eye``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
    return pose


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:h, 0:w]
    return u.astype(np.float64), v.astype(np.float64)


def camera_rays(intr: Intrinsics, h: int, w: int) -> np.ndarray:
    """Per-pixel camera-frame ray directions with unit z component, shape (h, w, 3)."""
    u, v = pixel_grid(h, w)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def unproject(d: DepthMap, window: tuple[slice, slice] | None = None) -> np.ndarray:
    """World-frame points (N, 3) for the valid pixels of ``d`` (optionally one window)."""
    u, v = pixel_grid(d.height, d.width)
    z = d.depth.astype(np.float64)
    m = d.mask
    if window is not None:
        u, v, z, m = u[window], v[window], z[window], m[window]
    u, v, z = u[m], v[m], z[m]
    intr = d.intrinsics
    cam = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=-1)
    return cam @ d.pose[:3, :3].T + d.pose[:3, 3]


def project(points: np.ndarray, intr: Intrinsics, pose: np.ndarray) -> np.ndarray:
    """World points to (u, v, z) in the camera described by ``pose``."""
    pts = np.asarray(points, dtype=np.float64)
    cam = (pts - pose[:3, 3]) @ pose[:3, :3]
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam[:, 0] / z * intr.fx + intr.cx
        v = cam[:, 1] / z * intr.fy + intr.cy
    return np.stack([u, v, z], axis=-1)
