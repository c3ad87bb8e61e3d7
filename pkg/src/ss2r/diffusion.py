"""Noise schedules, forward/backward diffusion steps, DDIM sampling and stage losses.

Index convention: arrays are 0-based, ``alpha_bar[t] = prod(alpha[:t+1])``.
Step index ``t`` is the (t+1)-th noising step, so a backward step from
``t = 0`` lands on clean data; ``-1`` denotes the clean level (alpha_bar = 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import Tensor, ops
from .numerics.tensor import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in [0, 1)")
        alpha = 1.0 - beta
        for arr in (beta, alpha):
            arr.setflags(write=False)
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(beta)
        alpha_bar.setflags(write=False)
        sigma.setflags(write=False)
        return cls(beta, alpha, alpha_bar, sigma)

    def abar(self, t) -> np.ndarray:
        """alpha_bar at ``t`` with t = -1 meaning the clean level."""
        t = np.asarray(t)
        return np.where(t < 0, 1.0, self.alpha_bar[np.clip(t, 0, None)])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _check_t(t, s: NoiseSchedule, lo: int = 0) -> np.ndarray:
    arr = np.asarray(t)
    if arr.dtype.kind not in "iu" or np.any(arr < lo) or np.any(arr >= s.T):
        raise ValueError(f"timestep {t!r} outside [{lo}, {s.T})")
    return arr


def _per_sample(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0): sqrt(abar) x0 + sqrt(1 - abar) eps.

    ``t`` is an int or one index per leading (batch) entry.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = _check_t(t, s)
    ab = _per_sample(s.alpha_bar[t], x0)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def forward_step(x: np.ndarray, t: int, noise: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Single Markov transition from level t-1 to level t (t = 0 starts from clean data)."""
    t = int(_check_t(t, s))
    return np.sqrt(s.alpha[t]) * x + np.sqrt(s.beta[t]) * noise


def ddpm_step(x_t: np.ndarray, t: int, eps_pred: np.ndarray, s: NoiseSchedule, noise: np.ndarray | None = None) -> np.ndarray:
    """Ancestral backward step x_t -> x_{t-1} with the schedule's sigma_t."""
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ShapeError(f"x_t {x_t.shape} and eps_pred {eps_pred.shape} differ")
    t = int(_check_t(t, s))
    a, ab = s.alpha[t], s.alpha_bar[t]
    denom = np.sqrt(a * (1.0 - ab))
    coef = (1.0 - a) / denom if denom > 0 else 0.0
    out = x_t / np.sqrt(a) - coef * eps_pred
    if noise is not None:
        noise = np.asarray(noise)
        if noise.shape != x_t.shape:
            raise ShapeError(f"noise {noise.shape} and x_t {x_t.shape} differ")
        out = out + s.sigma[t] * noise
    return out.astype(x_t.dtype, copy=False)


def predict_x0(x_t: np.ndarray, t, eps_pred: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    ab = _per_sample(s.abar(t), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_pred: np.ndarray, s: NoiseSchedule,
              eta: float = 0.0, noise: np.ndarray | None = None) -> np.ndarray:
    """Generalized DDIM update from level t to t_prev (< t; -1 = clean)."""
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ShapeError(f"x_t {x_t.shape} and eps_pred {eps_pred.shape} differ")
    t = int(_check_t(t, s))
    if not (-1 <= t_prev < t):
        raise ValueError(f"t_prev must satisfy -1 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ab = float(s.abar(t))
    ab_prev = float(s.abar(t_prev))
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    sig = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)) if eta > 0 else 0.0
    out = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sig * sig, 0.0)) * eps_pred
    if sig > 0:
        if noise is None:
            raise ValueError("eta > 0 needs an explicit noise sample")
        out = out + sig * np.asarray(noise)
    return out.astype(x_t.dtype, copy=False)


def ddim_timesteps(s: NoiseSchedule, steps: int, spacing: str = "logsnr") -> np.ndarray:
    """Descending timestep indices for DDIM sampling.

    ``uniform`` takes every (T/steps)-th index. ``logsnr`` spaces the indices
    evenly in log(abar / (1 - abar)), which resolves the low-noise end where
    small-variance residual targets are decided.
    """
    if steps < 1 or steps > s.T:
        raise ValueError(f"need 1 <= steps <= T, got {steps}")
    if spacing == "uniform":
        ts = np.round(np.linspace(0, s.T - 1, steps)).astype(np.int64)
    elif spacing == "logsnr":
        lsnr = np.log(s.alpha_bar) - np.log1p(-s.alpha_bar)
        targets = np.linspace(lsnr[0], lsnr[-1], steps)
        ts = np.searchsorted(-lsnr, -targets, side="left").clip(0, s.T - 1)
        # keep indices distinct and strictly increasing within [0, T)
        for i in range(1, steps):
            ts[i] = max(ts[i], ts[i - 1] + 1)
        ts[-1] = min(ts[-1], s.T - 1)
        for i in range(steps - 2, -1, -1):
            ts[i] = min(ts[i], ts[i + 1] - 1)
    else:
        raise ValueError(f"unknown DDIM spacing {spacing!r}")
    return ts[::-1].copy()


def ddim_sample(eps_fn: Callable[[np.ndarray, int], np.ndarray], x_T: np.ndarray, s: NoiseSchedule,
                steps: int = 50, spacing: str = "logsnr", eta: float = 0.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the DDIM chain from pure noise ``x_T`` to the clean level."""
    ts = ddim_timesteps(s, steps, spacing)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        eps = eps_fn(x, int(t))
        noise = rng.standard_normal(x.shape).astype(x.dtype) if eta > 0 else None
        x = ddim_step(x, int(t), t_prev, eps, s, eta=eta, noise=noise)
    return x


def ddpm_sample(eps_fn: Callable[[np.ndarray, int], np.ndarray], x_T: np.ndarray, s: NoiseSchedule,
                rng: np.random.Generator) -> np.ndarray:
    x = x_T
    for t in range(s.T - 1, -1, -1):
        noise = rng.standard_normal(x.shape).astype(x.dtype) if t > 0 else None
        x = ddpm_step(x, t, eps_fn(x, t), s, noise)
    return x


# -- training losses --------------------------------------------------------------

@dataclass
class DiffusionBatch:
    """One training batch. ``valid`` marks pixels that enter the loss."""

    x0: np.ndarray
    condition: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    valid: np.ndarray | None = None
    weight_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.x0.shape != self.eps.shape:
            raise ShapeError(f"x0 {self.x0.shape} and eps {self.eps.shape} differ")
        if self.valid is not None and self.valid.shape != self.x0.shape:
            raise ShapeError(f"valid mask {self.valid.shape} does not match x0 {self.x0.shape}")
        if self.weight_mask is not None and self.weight_mask.shape != self.x0.shape:
            raise ShapeError(f"weight mask {self.weight_mask.shape} does not match x0 {self.x0.shape}")

    def noisy(self, s: NoiseSchedule) -> np.ndarray:
        return forward_diffuse(self.x0, self.t, self.eps, s)


Denoiser = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def _masked_loss(batch: DiffusionBatch, denoiser: Denoiser, s: NoiseSchedule, weights: np.ndarray) -> Tensor:
    x_t = batch.noisy(s)
    pred = denoiser(Tensor(x_t, dtype=x_t.dtype), batch.t, batch.condition)
    if pred.shape != batch.eps.shape:
        raise ShapeError(f"denoiser output {pred.shape} does not match noise {batch.eps.shape}")
    valid = np.ones(batch.x0.shape) if batch.valid is None else batch.valid.astype(np.float64)
    count = float(valid.sum())
    if count == 0:
        raise ValueError("batch has no valid pixels")
    total = ops.weighted_sum_of_squares(pred, batch.eps, weights * valid)
    return ops.mul(total, 1.0 / count)


def stage1_loss(batch: DiffusionBatch, denoiser: Denoiser, s: NoiseSchedule) -> Tensor:
    """Mean squared noise-prediction error over valid pixels."""
    return _masked_loss(batch, denoiser, s, np.ones(batch.x0.shape))


def stage2_loss(batch: DiffusionBatch, denoiser: Denoiser, s: NoiseSchedule, omega: float, lam: float) -> Tensor:
    """Re-weighted loss: omega on real-like regions, lambda on discriminated ones."""
    if batch.weight_mask is None:
        raise ValueError("stage-2 loss needs a weight mask")
    check_weights(omega, lam)
    return _masked_loss(batch, denoiser, s, batch.weight_mask)


def check_weights(omega: float, lam: float) -> None:
    if not lam > omega:
        raise ValueError(f"loss weights must satisfy lambda > omega (got omega={omega}, lambda={lam})")
