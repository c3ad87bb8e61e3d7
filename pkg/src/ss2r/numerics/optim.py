from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    """AdamW moments and hyper-parameters; lr 3e-5 is the fine-tuning default."""

    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState) -> tuple[dict[str, Tensor], OptimizerState]:
    """One decoupled-weight-decay Adam update.

    Returns fresh parameter tensors and a new state; the inputs are left as
    they were. Raises :class:`NonFiniteGradient` before touching anything if
    any gradient contains NaN or inf.
    """
    if state.step < 0:
        raise ValueError(f"optimizer step counter must be >= 0, got {state.step}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")

    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        data = p.data * (1.0 - state.lr * state.weight_decay) - state.lr * upd
        new_params[name] = Tensor._wrap(data.astype(p.dtype, copy=False), requires_grad=p.requires_grad)
        new_m[name] = m
        new_v[name] = v
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps, state.weight_decay,
                               step, new_m, new_v)
    return new_params, new_state
