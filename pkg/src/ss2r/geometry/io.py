"""PFM depth images with JSON sidecars, ASCII PLY clouds, mask run-length codes."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .camera import DepthMap, Intrinsics


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: not a greyscale PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", fh.readline())
        if not dims:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = int(dims.group(1)), int(dims.group(2))
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM payload")
    return data.reshape(h, w)[::-1].astype(np.float32)


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, starting with a (possibly empty) run of False."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    vals = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(vals, runs)
    if flat.size != shape[0] * shape[1]:
        raise ValueError("run lengths do not cover the mask shape")
    return flat.reshape(shape)


def save_depth(stem, d: DepthMap, extra: dict | None = None) -> None:
    """Write ``stem.pfm`` plus ``stem.json`` (intrinsics, pose, mask RLE, extras)."""
    stem = Path(stem)
    write_pfm(stem.with_suffix(".pfm"), np.where(d.mask, d.depth, 0.0))
    meta = {
        "width": d.width,
        "height": d.height,
        "intrinsics": d.intrinsics.to_dict(),
        "pose": d.pose.tolist(),
        "mask_rle": rle_encode(d.mask),
    }
    if extra:
        meta.update(extra)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_depth(stem) -> tuple[DepthMap, dict]:
    stem = Path(stem)
    depth = read_pfm(stem.with_suffix(".pfm"))
    meta = json.loads(stem.with_suffix(".json").read_text())
    mask = rle_decode(meta["mask_rle"], depth.shape)
    d = DepthMap(depth, mask, Intrinsics(**meta["intrinsics"]), np.asarray(meta["pose"]))
    return d, meta


def write_ply(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pts.astype(np.float32).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    n = next(int(l.split()[-1]) for l in text if l.startswith("element vertex"))
    start = text.index("end_header") + 1
    return np.array([[float(v) for v in l.split()[:3]] for l in text[start:start + n]]).reshape(-1, 3)
