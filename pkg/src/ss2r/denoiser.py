"""Conditional noise-prediction U-Net with an additive condition branch.

The backbone is a small pixel-space U-Net. Condition maps (synthetic depth,
optionally concatenated with a previous-stage residual) pass through a
separate encoder whose per-level outputs end in zero-initialized 1x1
convolutions and are added to the skip tensors that feed the decoder
blocks. At initialization the condition therefore has no effect at all.

With ``output_skip`` the network output F is mixed with its input as
eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) F. At high noise x_t is already
almost exactly eps, so F only has to supply a small correction instead of
reproducing x_t to within the tiny tolerance that DDIM's 1/sqrt(abar)
amplification demands. The training target stays the noise itself.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .numerics import Tensor, ops
from .numerics.tensor import ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 64
    widths: tuple[int, ...] = (32, 64, 128)
    blocks_per_level: int = 2
    time_dim: int = 64
    cond_channels: int = 1
    groups: int = 8
    output_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        levels = len(self.widths)
        if levels < 1:
            raise ValueError("need at least one resolution level")
        if self.resolution % (2 ** (levels - 1)):
            raise ValueError(f"resolution {self.resolution} not divisible by 2^{levels - 1}")
        if self.cond_channels not in (1, 2):
            raise ValueError(f"condition channels must be 1 or 2, got {self.cond_channels}")
        if self.time_dim % 2:
            raise ValueError("time embedding dimension must be even")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by {self.groups} norm groups")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def time_embedding(t, dim: int, base: float = 1e4) -> np.ndarray:
    """Interleaved sinusoidal embedding: [sin(t f0), cos(t f0), sin(t f1), ...].

    Frequencies are ``base ** (-i / (dim / 2))``. Accepts a scalar or a vector
    of timesteps; returns shape (dim,) or (len(t), dim) in float64.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = t_arr[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# -- parameter construction ------------------------------------------------------

class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def conv(self, name: str, cin: int, cout: int, k: int = 3, zero: bool = False, gain: float = 1.0):
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else self.rng.standard_normal((cout, cin, k, k)) * gain * np.sqrt(1.0 / fan_in)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(cout))

    def dense(self, name: str, fin: int, fout: int, zero: bool = False):
        w = np.zeros((fin, fout)) if zero else self.rng.standard_normal((fin, fout)) * np.sqrt(1.0 / fin)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(fout))

    def norm(self, name: str, c: int):
        self._add(f"{name}.g", np.ones(c))
        self._add(f"{name}.b", np.zeros(c))

    def _add(self, name: str, arr):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(arr, requires_grad=True, dtype=self.dtype, name=name)


def init_weights(cfg: DenoiserConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.Philox(seed))
    ini = _Init(rng, dtype)
    w = cfg.widths
    temb = 4 * w[0]
    ini.dense("time.fc1", cfg.time_dim, temb)
    ini.dense("time.fc2", temb, temb)
    ini.conv("in", 1, w[0])

    def resblock(name, cin, cout):
        ini.norm(f"{name}.n1", cin)
        ini.conv(f"{name}.c1", cin, cout)
        ini.dense(f"{name}.t", temb, cout)
        ini.norm(f"{name}.n2", cout)
        ini.conv(f"{name}.c2", cout, cout, zero=True)
        if cin != cout:
            ini.conv(f"{name}.skip", cin, cout, k=1)

    for lvl, width in enumerate(w):
        for k in range(cfg.blocks_per_level):
            resblock(f"enc{lvl}.{k}", width, width)
        if lvl + 1 < cfg.levels:
            ini.conv(f"down{lvl}", width, w[lvl + 1])
    resblock("mid", w[-1], w[-1])
    for lvl in range(cfg.levels - 1, -1, -1):
        if lvl + 1 < cfg.levels:
            ini.conv(f"up{lvl}", w[lvl + 1], w[lvl])
        for k in range(cfg.blocks_per_level):
            resblock(f"dec{lvl}.{k}", 2 * w[lvl] if k == 0 else w[lvl], w[lvl])
    ini.norm("out.n", w[0])
    ini.conv("out", w[0], 1, gain=0.1)

    ini.conv("cond.in", cfg.cond_channels, w[0])
    ini.conv("cond.c0", w[0], w[0])
    ini.conv("cond.zero0", w[0], w[0], k=1, zero=True)
    for lvl in range(1, cfg.levels):
        ini.conv(f"cond.down{lvl}", w[lvl - 1], w[lvl])
        ini.conv(f"cond.zero{lvl}", w[lvl], w[lvl], k=1, zero=True)
    return ini.params


def widen_condition(params: dict[str, Tensor], cfg: DenoiserConfig, cond_channels: int) -> dict[str, Tensor]:
    """Copy weights into a config with more condition channels.

    The new input channels get zero kernels, so the copy computes exactly the
    same function as the original until training moves them.
    """
    if cond_channels < cfg.cond_channels:
        raise ValueError("cannot drop condition channels")
    out = {}
    for name, p in params.items():
        data = p.data
        if name == "cond.in.w" and cond_channels != cfg.cond_channels:
            pad = np.zeros((data.shape[0], cond_channels - data.shape[1]) + data.shape[2:], dtype=data.dtype)
            data = np.concatenate([data, pad], axis=1)
        out[name] = Tensor(data, requires_grad=True, dtype=data.dtype, name=name)
    return out


# -- forward pass ----------------------------------------------------------------------

def _conv(h, p, name, stride=1):
    k = p[f"{name}.w"].shape[-1]
    return ops.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=k // 2)


def _norm_act(h, p, name, groups):
    return ops.silu(ops.group_norm(h, groups, p[f"{name}.g"], p[f"{name}.b"]))


def _resblock(h, temb_act, p, name, groups):
    g = _conv(_norm_act(h, p, f"{name}.n1", groups), p, f"{name}.c1")
    tproj = ops.dense(temb_act, p[f"{name}.t.w"], p[f"{name}.t.b"])
    g = ops.add(g, ops.reshape(tproj, tproj.shape + (1, 1)))
    g = _conv(_norm_act(g, p, f"{name}.n2", groups), p, f"{name}.c2")
    skip = _conv(h, p, f"{name}.skip") if f"{name}.skip.w" in p else h
    return ops.add(skip, g)


def encode_condition(cond: np.ndarray | Tensor, params: dict[str, Tensor], cfg: DenoiserConfig) -> list[Tensor]:
    """Per-level additive features, finest level first."""
    c = cond if isinstance(cond, Tensor) else Tensor(cond, dtype=params["cond.in.w"].dtype)
    if c.ndim != 4 or c.shape[1] != cfg.cond_channels:
        raise ShapeError(f"condition has shape {c.shape}, expected [N,{cfg.cond_channels},H,W]")
    h = ops.silu(_conv(c, params, "cond.in"))
    h = ops.silu(_conv(h, params, "cond.c0"))
    feats = [_conv(h, params, "cond.zero0")]
    for lvl in range(1, cfg.levels):
        h = ops.silu(_conv(h, params, f"cond.down{lvl}", stride=2))
        feats.append(_conv(h, params, f"cond.zero{lvl}"))
    return feats


def predict_noise(x_t: np.ndarray | Tensor, t, cond_feats: list[Tensor], params: dict[str, Tensor],
                  cfg: DenoiserConfig, alpha_bar: np.ndarray | None = None) -> Tensor:
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=params["in.w"].dtype)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"noisy input must be [N,1,H,W], got {x.shape}")
    if x.shape[2] % (2 ** (cfg.levels - 1)) or x.shape[3] % (2 ** (cfg.levels - 1)):
        raise ShapeError(f"spatial size {x.shape[2:]} not divisible by 2^{cfg.levels - 1}")
    if len(cond_feats) != cfg.levels:
        raise ShapeError(f"expected {cfg.levels} condition feature maps, got {len(cond_feats)}")
    n = x.shape[0]
    t_vec = np.broadcast_to(np.asarray(t), (n,))
    emb = Tensor(time_embedding(t_vec, cfg.time_dim), dtype=x.dtype)
    temb = ops.dense(ops.silu(ops.dense(emb, params["time.fc1.w"], params["time.fc1.b"])),
                     params["time.fc2.w"], params["time.fc2.b"])
    temb_act = ops.silu(temb)
    g = cfg.groups

    h = _conv(x, params, "in")
    skips = []
    for lvl in range(cfg.levels):
        for k in range(cfg.blocks_per_level):
            h = _resblock(h, temb_act, params, f"enc{lvl}.{k}", g)
        skips.append(h)
        if lvl + 1 < cfg.levels:
            h = _conv(h, params, f"down{lvl}", stride=2)
    h = _resblock(h, temb_act, params, "mid", g)
    for lvl in range(cfg.levels - 1, -1, -1):
        if lvl + 1 < cfg.levels:
            h = _conv(ops.upsample_nearest(h, 2), params, f"up{lvl}")
        skip = ops.add(skips[lvl], cond_feats[lvl])
        h = ops.concat([h, skip], axis=1)
        for k in range(cfg.blocks_per_level):
            h = _resblock(h, temb_act, params, f"dec{lvl}.{k}", g)
    out = _conv(_norm_act(h, params, "out.n", g), params, "out")
    if cfg.output_skip:
        if alpha_bar is None:
            raise ValueError("output_skip needs the schedule's alpha_bar")
        ab = np.asarray(alpha_bar, np.float64)[t_vec].reshape(n, 1, 1, 1)
        out = ops.add(ops.mul(x, np.sqrt(1.0 - ab).astype(x.dtype)), ops.mul(out, np.sqrt(ab).astype(x.dtype)))
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite activations in denoiser output")
    return out


@dataclass
class Denoiser:
    """Config plus weights; callable as ``eps_pred = net(x_t, t, condition)``.

    ``alpha_bar`` is the noise schedule's cumulative product, needed when the
    config uses the output skip.
    """

    config: DenoiserConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    alpha_bar: np.ndarray | None = None

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int, dtype=np.float32, alpha_bar=None) -> "Denoiser":
        return cls(config, init_weights(config, seed, dtype), alpha_bar)

    def __call__(self, x_t, t, condition) -> Tensor:
        feats = encode_condition(condition, self.params, self.config)
        return predict_noise(x_t, t, feats, self.params, self.config, self.alpha_bar)

    def eps(self, x_t: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        """Inference-only prediction as a plain array."""
        return self(Tensor._wrap(np.asarray(x_t, dtype=np.float32)), t, condition).data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        expected = init_weights(self.config, 0)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, a in arrays.items():
            if a.shape != expected[k].shape:
                raise ShapeError(f"{k}: checkpoint shape {a.shape} vs config {expected[k].shape}")
        self.params = {k: Tensor(a, requires_grad=True, dtype=np.float32, name=k) for k, a in arrays.items()}

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()
