"""Procedural paired depth data: clean renders S and oracle-noised stand-ins for real captures R.

Scenes are a tilted back wall plus a couple of spheres and boxes. The noise
oracle is a parametric sensor model with known ground truth, so anything the
simulator learns can be checked against the parameters that produced the data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry.camera import DepthMap, Intrinsics, camera_rays, look_at
from .geometry.io import load_depth, save_depth

R_MAX = 0.15                  # residual normalization scale (m)
DEPTH_RANGE = (0.5, 4.5)      # synthetic depth normalization range (m)
PIVOT = (0.0, 0.0, 2.2)       # multi-view cameras look at this point


def rng_for(seed: int, *ids: int) -> np.random.Generator:
    """Counter-based generator keyed by a seed and any number of sub-stream ids."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, ids)])))


# ---------------------------------------------------------------- primitives

@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def intersect(self, o, d):
        c = np.asarray(self.center)
        oc = o - c
        a = np.einsum("...i,...i->...", d, d)
        b = 2.0 * np.einsum("...i,...i->...", d, oc)
        cc = float(oc @ oc) - self.radius ** 2
        disc = b * b - 4 * a * cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        return np.where(hit & (t > 0), t, np.inf)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf).max(axis=-1)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf).min(axis=-1)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 0), t, np.inf)

    def sdf(self, p):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        q = np.abs(p - c) - h
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


@dataclass(frozen=True)
class Plane:
    """Points x with normal . x = offset; the normal points towards the camera side."""

    normal: tuple[float, float, float]
    offset: float

    def intersect(self, o, d):
        n = np.asarray(self.normal)
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ n) / den
        return np.where(np.isfinite(t) & (t > 0), t, np.inf)

    def sdf(self, p):
        return p @ np.asarray(self.normal) - self.offset


PRIMITIVES = {"sphere": Sphere, "box": Box, "plane": Plane}


@dataclass
class Scene:
    primitives: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = []
        for p in self.primitives:
            kind = next(k for k, v in PRIMITIVES.items() if isinstance(p, v))
            out.append({"kind": kind, **asdict(p)})
        return {"primitives": out}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        prims = []
        for item in d["primitives"]:
            item = dict(item)
            kind = item.pop("kind")
            prims.append(PRIMITIVES[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in item.items()}))
        return cls(prims)


def _world_rays(intr: Intrinsics, pose: np.ndarray, h: int, w: int):
    d = camera_rays(intr, h, w) @ np.asarray(pose)[:3, :3].T
    return np.asarray(pose)[:3, 3], d


def render_depth(scene: Scene, intr: Intrinsics, pose: np.ndarray, resolution: tuple[int, int]) -> DepthMap:
    """Nearest ray-primitive hit per pixel as z-depth; misses are invalid.

    Rays have unit camera-z component, so the ray parameter is the z-depth.
    """
    h, w = resolution
    o, d = _world_rays(intr, pose, h, w)
    t = np.full((h, w), np.inf)
    for p in scene.primitives:
        t = np.minimum(t, p.intersect(o, d))
    mask = np.isfinite(t)
    return DepthMap(np.where(mask, t, 0.0), mask, intr, pose)


def raymarch_depth(scene: Scene, intr: Intrinsics, pose: np.ndarray, resolution: tuple[int, int],
                   t_max: float = 50.0, max_iter: int = 20000, tol: float = 1e-10) -> DepthMap:
    """Sphere-tracing reference renderer refined by bisection; slow but independent."""
    h, w = resolution
    o, d = _world_rays(intr, pose, h, w)
    d = d.reshape(-1, 3)
    norm = np.linalg.norm(d, axis=-1)
    u = d / norm[:, None]

    def field_(t, idx):
        pts = o + t[:, None] * u[idx]
        return np.min([prim.sdf(pts) for prim in scene.primitives], axis=0)

    n = len(u)
    s = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.full(n, bool(scene.primitives))
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        f = field_(s[idx], idx)
        done = f < 1e-7
        hit[idx[done]] = True
        s[idx[~done]] += f[~done]
        active &= ~hit & (s <= t_max)
    # sphere tracing stops just short of the surface; bisect to pin it down
    idx = np.nonzero(hit)[0]
    lo = s[idx].copy()
    hi = s[idx] + 1e-3
    while len(idx) and np.any(field_(hi, idx) > 0):
        hi = np.where(field_(hi, idx) > 0, hi + 1e-3, hi)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        inside = field_(mid, idx) <= 0
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
        if np.all(hi - lo < tol):
            break
    depth = np.zeros(n)
    depth[idx] = 0.5 * (lo + hi) / norm[idx]
    return DepthMap(depth.reshape(h, w), hit.reshape(h, w), intr, pose)


# ---------------------------------------------------------------- oracle

@dataclass(frozen=True)
class NoiseOracleParams:
    a: float = 0.003              # axial std intercept (m)
    b: float = 0.0025             # axial std quadratic coefficient (1/m)
    jitter_px: float = 0.5        # lateral jitter std (px)
    band_px: int = 2              # edge band width (px)
    dropout: float = 0.4          # dropout probability inside the edge band
    quant: float = 0.002          # quantization step (m)
    edge_threshold: float = 0.1   # depth jump that counts as an edge (m)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"oracle parameter {k} must be finite and >= 0, got {v}")
        if self.dropout > 1:
            raise ValueError(f"dropout probability must be <= 1, got {self.dropout}")
        if self.band_px != int(self.band_px):
            raise ValueError("band_px must be an integer")

    @classmethod
    def zero(cls) -> "NoiseOracleParams":
        return cls(0.0, 0.0, 0.0, 0, 0.0, 0.0)

    def sigma(self, z):
        return self.a + self.b * np.asarray(z, dtype=np.float64) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def edge_map(depth: np.ndarray, mask: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels with a 4-neighbour across a depth jump or on the boundary of the valid region."""
    z = np.where(mask, depth.astype(np.float64), np.inf)
    edge = np.zeros(depth.shape, dtype=bool)
    for axis in (0, 1):
        a = np.take(z, np.arange(z.shape[axis] - 1), axis=axis)
        b = np.take(z, np.arange(1, z.shape[axis]), axis=axis)
        with np.errstate(invalid="ignore"):
            jump = ~(np.abs(a - b) <= threshold)
        pad_lo = [(0, 0), (0, 0)]
        pad_hi = [(0, 0), (0, 0)]
        pad_lo[axis] = (0, 1)
        pad_hi[axis] = (1, 0)
        edge |= np.pad(jump, pad_lo) | np.pad(jump, pad_hi)
    return edge & mask


def edge_band(depth: np.ndarray, mask: np.ndarray, band_px: int, threshold: float) -> np.ndarray:
    if band_px <= 0:
        return np.zeros(depth.shape, dtype=bool)
    e = edge_map(depth, mask, threshold)
    if band_px > 1:
        e = ndimage.binary_dilation(e, structure=np.ones((3, 3), bool), iterations=band_px - 1)
    return e & mask


def apply_oracle_noise(s: DepthMap, p: NoiseOracleParams, seed) -> DepthMap:
    """Sensor-noise oracle: lateral jitter, axial Gaussian noise, edge dropout, quantization.

    Jitter resamples S at a rounded Gaussian pixel offset, but never across a
    depth jump or into a hole, so silhouettes do not smear into huge residuals.
    """
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    h, w = s.depth.shape
    z = s.depth.astype(np.float64)
    mask = s.mask.copy()
    vv, uu = np.mgrid[0:h, 0:w]

    du = np.rint(rng.normal(0.0, 1.0, (h, w)) * p.jitter_px).astype(np.int64)
    dv = np.rint(rng.normal(0.0, 1.0, (h, w)) * p.jitter_px).astype(np.int64)
    su = np.clip(uu + du, 0, w - 1)
    sv = np.clip(vv + dv, 0, h - 1)
    src = z[sv, su]
    ok = mask & s.mask[sv, su] & (np.abs(src - z) <= p.edge_threshold)
    r = np.where(ok, src, z)

    r = r + rng.normal(0.0, 1.0, (h, w)) * p.sigma(r)

    band = edge_band(s.depth, s.mask, p.band_px, p.edge_threshold)
    drop = band & (rng.random((h, w)) < p.dropout)
    mask &= ~drop

    if p.quant > 0:
        r = p.quant * np.rint(r / p.quant)
    mask &= r > 0
    return s.with_depth(np.where(mask, r, 0.0), mask)


# ---------------------------------------------------------------- datasets

@dataclass
class SimulationSample:
    S: DepthMap
    R: DepthMap
    residual: np.ndarray          # R - S on the joint mask, 0 elsewhere
    mask: np.ndarray              # joint validity of S and R
    scene_id: int
    view_id: int

    @property
    def pose(self) -> np.ndarray:
        return self.S.pose


def make_sample(S: DepthMap, R: DepthMap, scene_id: int, view_id: int) -> SimulationSample:
    mask = S.mask & R.mask
    res = np.where(mask, R.depth.astype(np.float64) - S.depth.astype(np.float64), 0.0).astype(np.float32)
    return SimulationSample(S, R, res, mask, scene_id, view_id)


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    focal: float = 64.0
    max_objects: int = 2
    views_per_scene: int = 1
    view_tilt_deg: float = 12.0

    @property
    def intrinsics(self) -> Intrinsics:
        c = self.resolution / 2.0
        return Intrinsics(self.focal, self.focal, c, c)

    def to_dict(self) -> dict:
        return asdict(self)


def random_scene(rng: np.random.Generator, max_objects: int = 2) -> Scene:
    tilt = np.deg2rad(rng.uniform(-15, 15, size=2))
    n = np.array([np.sin(tilt[0]), np.sin(tilt[1]), -1.0])
    n /= np.linalg.norm(n)
    wall_z = rng.uniform(3.0, 3.6)
    prims: list = [Plane(tuple(n.tolist()), float(n @ np.array([0.0, 0.0, wall_z])))]
    for _ in range(int(rng.integers(1, max_objects + 1))):
        c = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(1.5, 2.4)])
        if rng.random() < 0.5:
            prims.append(Sphere(tuple(c.tolist()), float(rng.uniform(0.15, 0.35))))
        else:
            half = rng.uniform(0.12, 0.3, size=3)
            prims.append(Box(tuple((c - half).tolist()), tuple((c + half).tolist())))
    return Scene(prims)


def view_poses(views: int, tilt_deg: float = 12.0) -> list[np.ndarray]:
    """Identity for a single view, otherwise cameras on a cone around the pivot."""
    if views == 1:
        return [np.eye(4)]
    pivot = np.asarray(PIVOT)
    dist = float(np.linalg.norm(pivot))
    tilt = np.deg2rad(tilt_deg)
    poses = []
    for k in range(views):
        az = 2 * np.pi * k / views
        direction = np.array([np.sin(tilt) * np.cos(az), np.sin(tilt) * np.sin(az), -np.cos(tilt)])
        poses.append(look_at(pivot + dist * direction, pivot))
    return poses


@dataclass
class Dataset:
    samples: list[SimulationSample]
    train_scenes: list[int]
    val_scenes: list[int]
    params: NoiseOracleParams
    scene_config: SceneConfig
    seed: int
    scenes: list[Scene] = field(default_factory=list)
    audit: dict = field(default_factory=dict)

    def split(self, name: str) -> list[SimulationSample]:
        keep = set(self.train_scenes if name == "train" else self.val_scenes)
        return [s for s in self.samples if s.scene_id in keep]


def split_scenes(n: int, seed: int) -> tuple[list[int], list[int]]:
    if n < 2:
        return list(range(n)), []
    n_val = max(1, int(round(0.1 * n)))
    perm = rng_for(seed, 7).permutation(n)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def audit_dataset(samples: list[SimulationSample], r_max: float = R_MAX) -> dict:
    validity = float(np.mean([s.mask.mean() for s in samples]))
    res = np.concatenate([np.abs(s.residual[s.mask]) for s in samples])
    p999 = float(np.percentile(res, 99.9)) if res.size else 0.0
    return {"mean_validity": validity, "residual_p99_9": p999, "r_max": r_max,
            "validity_ok": validity >= 0.95, "residual_ok": p999 < r_max}


def make_dataset(n_scenes: int, params: NoiseOracleParams, seed: int,
                 scene_config: SceneConfig | None = None) -> Dataset:
    """Reproducible paired dataset; every stochastic choice keyed by (seed, scene, view)."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    cfg = scene_config or SceneConfig()
    intr = cfg.intrinsics
    poses = view_poses(cfg.views_per_scene, cfg.view_tilt_deg)
    samples, scenes = [], []
    for i in range(n_scenes):
        scene = random_scene(rng_for(seed, 1, i), cfg.max_objects)
        scenes.append(scene)
        for k, pose in enumerate(poses):
            S = render_depth(scene, intr, pose, (cfg.resolution, cfg.resolution))
            R = apply_oracle_noise(S, params, rng_for(seed, 2, i, k))
            samples.append(make_sample(S, R, i, k))
    train, val = split_scenes(n_scenes, seed)
    return Dataset(samples, train, val, params, cfg, seed, scenes, audit_dataset(samples))


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        stem = f"{s.scene_id:05d}_{s.view_id:02d}"
        save_depth(root / f"{stem}_S", s.S)
        save_depth(root / f"{stem}_R", s.R, {"oracle": ds.params.to_dict()})
    index = {
        "seed": ds.seed, "oracle": ds.params.to_dict(), "scene_config": ds.scene_config.to_dict(),
        "train_scenes": ds.train_scenes, "val_scenes": ds.val_scenes, "audit": ds.audit,
        "samples": [[s.scene_id, s.view_id] for s in ds.samples],
        "scenes": [sc.to_dict() for sc in ds.scenes],
    }
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_dataset(root) -> Dataset:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    samples = []
    for scene_id, view_id in index["samples"]:
        stem = f"{scene_id:05d}_{view_id:02d}"
        S, _ = load_depth(root / f"{stem}_S")
        R, _ = load_depth(root / f"{stem}_R")
        samples.append(make_sample(S, R, scene_id, view_id))
    return Dataset(samples, index["train_scenes"], index["val_scenes"],
                   NoiseOracleParams(**index["oracle"]), SceneConfig(**index["scene_config"]),
                   index["seed"], [Scene.from_dict(d) for d in index["scenes"]], index["audit"])


def normalize_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    lo, hi = DEPTH_RANGE
    x = 2.0 * (depth.astype(np.float64) - lo) / (hi - lo) - 1.0
    return np.where(mask, np.clip(x, -1.0, 1.0), -1.0).astype(np.float32)


def normalize_residual(res: np.ndarray, r_max: float = R_MAX) -> np.ndarray:
    return np.clip(np.asarray(res, dtype=np.float64) / r_max, -1.0, 1.0).astype(np.float32)
