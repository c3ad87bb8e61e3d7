"""Finite-difference gradient checks for every op and for both networks at reduced size."""

from __future__ import annotations

import numpy as np

from . import discriminator as disc
from .denoiser import Denoiser, DenoiserConfig, init_weights
from .diffusion import DiffusionBatch, make_schedule, stage2_loss
from .numerics import ops
from .numerics.gradcheck import check_gradients, op_checks, three_layer_net_check

TOLERANCE = 1e-4


def _randomized(params: dict, rng: np.random.Generator, scale: float = 0.3) -> dict[str, np.ndarray]:
    # zero-initialized gates would hide whole sub-networks from the check
    return {k: rng.standard_normal(v.shape) * scale for k, v in params.items()}


def denoiser_check(seed: int = 0) -> float:
    """Full denoiser forward + weighted diffusion loss, all parameters at once (8x8, width 4)."""
    cfg = DenoiserConfig(resolution=8, widths=(4, 8), blocks_per_level=1, time_dim=4, cond_channels=2, groups=2)
    rng = np.random.default_rng(seed)
    base = _randomized({k: v.data for k, v in init_weights(cfg, seed).items()}, rng)
    names = sorted(base)
    sched = make_schedule(20, 1e-3, 0.2)
    batch = DiffusionBatch(
        x0=rng.uniform(-1, 1, (2, 1, 8, 8)), condition=rng.uniform(-1, 1, (2, 2, 8, 8)),
        t=np.array([3, 15]), eps=rng.standard_normal((2, 1, 8, 8)),
        valid=rng.random((2, 1, 8, 8)) > 0.2, weight_mask=np.where(rng.random((2, 1, 8, 8)) > 0.5, 1.5, 0.5))

    def loss(*arrays):
        net = Denoiser(cfg, dict(zip(names, arrays)), sched.alpha_bar)
        return stage2_loss(batch, net, sched, 0.5, 1.5)

    return check_gradients(loss, [base[k] for k in names])


def discriminator_check(seed: int = 0) -> float:
    """PointNet classifier + BCE, all parameters (width 4, 8 points per patch)."""
    cfg = disc.DiscriminatorConfig(widths=(4, 4), cad_width=4, head_width=4, n_points=8, min_points=8)
    rng = np.random.default_rng(seed)
    base = _randomized({k: v.data for k, v in disc.init_weights(cfg, seed).items()}, rng, 0.7)
    names = sorted(base)
    pts = rng.standard_normal((3, 8, 3))
    cad = rng.standard_normal((3, 8, 3))
    labels = np.array([0.0, 1.0, 1.0])

    def loss(*arrays):
        return ops.bce_with_logits(disc.logits(pts, cad, dict(zip(names, arrays)), cfg), labels)

    return check_gradients(loss, [base[k] for k in names])


def all_checks(seed: int = 0) -> dict[str, float]:
    out = op_checks(seed)
    out["three_layer_net"] = three_layer_net_check(seed)
    out["denoiser"] = denoiser_check(seed)
    out["discriminator"] = discriminator_check(seed)
    return out
