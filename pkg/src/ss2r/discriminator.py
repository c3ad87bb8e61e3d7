"""PointNet-style real/generated classifier over depth-window point patches.

The classifier sees a patch's points and, through a separate branch, the CAD
(synthetic) points of the same window. Its verdicts become the per-pixel loss
weights used by the refinement stage.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .geometry.camera import DepthMap
from .geometry.patches import GENERATED, REAL, PointPatch, split_patches, windows
from .numerics import GradTape, OptimizerState, Tensor, adamw_step, backward, ops
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .scenegen import rng_for

# centred coordinates are snapped to a 1 micron grid; a non-dyadic step keeps
# float32-derived coordinates away from rounding ties
LATTICE = 1e-6


@dataclass(frozen=True)
class DiscriminatorConfig:
    widths: tuple[int, ...] = (64, 64, 64)
    cad_width: int = 64
    head_width: int = 64
    n_points: int = 256
    min_points: int = 32
    patch_px: int = 16
    input_scale: float = 10.0    # fixed metres -> network units, the same for every patch
    threshold: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    val_fraction: float = 0.2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class ClassBalanceError(ValueError):
    pass


def init_weights(cfg: DiscriminatorConfig, seed: int) -> dict[str, Tensor]:
    rng = rng_for(seed, 31)

    def he(fan_in, fan_out):
        return (rng.normal(size=(fan_in, fan_out)) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    p: dict[str, np.ndarray] = {}
    prev = 3
    for i, w in enumerate(cfg.widths):
        p[f"pt{i}.w"], p[f"pt{i}.b"] = he(prev, w), np.zeros(w, np.float32)
        prev = w
    p["cad.w"], p["cad.b"] = he(3, cfg.cad_width), np.zeros(cfg.cad_width, np.float32)
    p["head.w"] = he(prev + cfg.cad_width, cfg.head_width)
    p["head.b"] = np.zeros(cfg.head_width, np.float32)
    # zero-initialized output layer: every patch starts at P(generated) = 0.5
    p["out.w"] = np.zeros((cfg.head_width, 1), np.float32)
    p["out.b"] = np.zeros(1, np.float32)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def canonical_points(pts: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Centre on ``origin``, snap to the lattice and sort rows lexicographically.

    The snapping makes translated copies of a patch land on identical inputs;
    the sort makes the input independent of point order.
    """
    c = np.rint((np.asarray(pts, np.float64) - origin) / LATTICE) * LATTICE
    return c[np.lexsort(c.T[::-1])]


def patch_arrays(patch: PointPatch, cfg: DiscriminatorConfig, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-size (n_points, 3) network inputs for a patch and its CAD window."""
    if len(patch.points) < cfg.min_points or len(patch.cad_points) < cfg.min_points:
        raise ValueError(f"patch at {patch.origin} has fewer than {cfg.min_points} points")
    centre = np.asarray(patch.cad_points, np.float64).mean(axis=0)
    out = []
    for k, pts in enumerate((patch.points, patch.cad_points)):
        c = canonical_points(pts, centre)
        rng = rng_for(seed, 41, patch.origin[0], patch.origin[1], k)
        n = len(c)
        if n >= cfg.n_points:
            idx = np.sort(rng.choice(n, size=cfg.n_points, replace=False))
        else:
            idx = np.concatenate([np.arange(n), np.sort(rng.choice(n, size=cfg.n_points - n))])
        out.append((c[idx] * cfg.input_scale).astype(np.float32))
    return out[0], out[1]


def logits(points: np.ndarray | Tensor, cad: np.ndarray | Tensor, w: dict[str, Tensor],
           cfg: DiscriminatorConfig) -> Tensor:
    """Batch forward pass: (B, P, 3) point and CAD arrays -> (B,) logits."""
    h = points if isinstance(points, Tensor) else Tensor(points)
    for i in range(len(cfg.widths)):
        h = ops.relu(ops.dense(h, w[f"pt{i}.w"], w[f"pt{i}.b"]))
    g = ops.max_reduce(h, axis=1)
    c = cad if isinstance(cad, Tensor) else Tensor(cad)
    gc = ops.max_reduce(ops.relu(ops.dense(c, w["cad.w"], w["cad.b"])), axis=1)
    z = ops.relu(ops.dense(ops.concat([g, gc], axis=1), w["head.w"], w["head.b"]))
    z = ops.dense(z, w["out.w"], w["out.b"])
    return ops.reshape(z, (z.shape[0],))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z.astype(np.float64)))


def stack_patches(patches: list[PointPatch], cfg: DiscriminatorConfig, seed: int = 0):
    if not patches:
        return np.zeros((0, cfg.n_points, 3), np.float32), np.zeros((0, cfg.n_points, 3), np.float32)
    arrs = [patch_arrays(p, cfg, seed) for p in patches]
    return np.stack([a for a, _ in arrs]), np.stack([b for _, b in arrs])


def predict_proba(patches: list[PointPatch], w: dict[str, Tensor], cfg: DiscriminatorConfig,
                  seed: int = 0, chunk: int = 256) -> np.ndarray:
    pts, cad = stack_patches(patches, cfg, seed)
    out = [_sigmoid(logits(pts[i:i + chunk], cad[i:i + chunk], w, cfg).data)
           for i in range(0, len(pts), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def classify_patch(patch: PointPatch, w: dict[str, Tensor], cfg: DiscriminatorConfig, seed: int = 0) -> float:
    """Probability that ``patch`` is generated rather than a real capture."""
    return float(predict_proba([patch], w, cfg, seed)[0])


def check_balance(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ClassBalanceError("discriminator training needs both real and generated patches")
    frac = float(np.mean(labels == GENERATED))
    if not 0.3 <= frac <= 0.7:
        raise ClassBalanceError(f"generated fraction {frac:.3f} outside [0.3, 0.7]")
    return frac


@dataclass
class DiscriminatorReport:
    val_accuracy: float
    curve: list[tuple[int, float, float]]   # (epoch, train_loss, val_acc)
    n_train: int
    n_val: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "train_loss", "val_acc"])
            for e, loss, acc in self.curve:
                wr.writerow([e, f"{loss:.8f}", f"{acc:.6f}"])


def accuracy(prob: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    pred = (prob > threshold).astype(int)
    return float(np.mean(pred == np.asarray(labels))) if len(prob) else float("nan")


def train_discriminator(patches: list[PointPatch], epochs: int, seed: int,
                        cfg: DiscriminatorConfig | None = None) -> tuple[dict[str, Tensor], DiscriminatorReport]:
    """BCE training with AdamW on a seeded train/validation split of labelled patches."""
    cfg = cfg or DiscriminatorConfig()
    labels = np.array([p.label for p in patches])
    if any(l not in (REAL, GENERATED) for l in labels):
        raise ValueError("every training patch needs a real/generated label")
    check_balance(labels)
    pts, cad = stack_patches(patches, cfg, seed)
    rng = rng_for(seed, 51)
    perm = rng.permutation(len(patches))
    n_val = max(1, int(round(cfg.val_fraction * len(patches))))
    val, tr = perm[:n_val], perm[n_val:]
    w = init_weights(cfg, seed)
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    for epoch in range(1, epochs + 1):
        order = tr[rng_for(seed, 52, epoch).permutation(len(tr))]
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            with GradTape() as tape:
                loss = ops.bce_with_logits(logits(pts[b], cad[b], w, cfg), labels[b].astype(np.float32))
            grads = backward(loss, tape, list(w.values()))
            named = {k: grads[v] for k, v in w.items()}
            w, state = adamw_step(w, named, state)
            losses.append(loss.item())
        acc = evaluate(pts[val], cad[val], labels[val], w, cfg)
        curve.append((epoch, float(np.mean(losses)), acc))
    final = curve[-1][2] if curve else evaluate(pts[val], cad[val], labels[val], w, cfg)
    return w, DiscriminatorReport(final, curve, len(tr), len(val))


def evaluate(pts, cad, labels, w, cfg: DiscriminatorConfig) -> float:
    prob = _sigmoid(logits(pts, cad, w, cfg).data) if len(pts) else np.zeros(0)
    return accuracy(prob, labels, cfg.threshold)


def build_weight_mask(generated: DepthMap, synthetic: DepthMap, w: dict[str, Tensor],
                      cfg: DiscriminatorConfig, omega: float, lam: float, seed: int = 0) -> np.ndarray:
    """Per-pixel loss weights: lam inside windows judged generated, omega elsewhere."""
    mask = np.full(generated.depth.shape, omega, dtype=np.float32)
    patches = split_patches(generated, synthetic, cfg.patch_px, cfg.min_points)
    if not patches:
        return mask
    prob = predict_proba(patches, w, cfg, seed)
    for p, pr in zip(patches, prob):
        if pr > cfg.threshold:
            r, c = p.origin
            mask[r:r + p.size, c:c + p.size] = lam
    return mask


def patch_probabilities(generated: DepthMap, synthetic: DepthMap, w, cfg: DiscriminatorConfig,
                        seed: int = 0) -> dict[tuple[int, int], float]:
    patches = split_patches(generated, synthetic, cfg.patch_px, cfg.min_points)
    return {p.origin: float(pr) for p, pr in zip(patches, predict_proba(patches, w, cfg, seed))}


def save_weights(path, w: dict[str, Tensor]) -> None:
    save_checkpoint(path, {k: v.data for k, v in w.items()})


def load_weights(path, cfg: DiscriminatorConfig) -> dict[str, Tensor]:
    raw = load_checkpoint(path)
    ref = init_weights(cfg, 0)
    if set(raw) != set(ref):
        raise ValueError(f"discriminator checkpoint names do not match the config: {sorted(set(raw) ^ set(ref))}")
    for k, v in raw.items():
        if v.shape != ref[k].shape:
            raise ValueError(f"{k}: checkpoint shape {v.shape} vs config {ref[k].shape}")
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


__all__ = [
    "DiscriminatorConfig", "ClassBalanceError", "init_weights", "classify_patch", "predict_proba",
    "train_discriminator", "build_weight_mask", "patch_probabilities", "save_weights", "load_weights",
    "DiscriminatorReport", "windows",
]
