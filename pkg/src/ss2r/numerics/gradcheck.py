"""Central finite-difference checks of the recorded adjoints."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import GradTape, Tensor, backward, precision


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation scaled by the largest gradient magnitude."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-3) -> float:
    """Compare tape gradients of the scalar ``fn(*tensors)`` with central differences.

    Runs entirely in float64. Returns the worst relative error over all inputs.
    """
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with GradTape() as tape:
            out = fn(*leaves)
        grads = backward(out, tape, leaves)

        def value(args):
            return float(fn(*[Tensor(a) for a in args]).data)

        worst = 0.0
        for k, base in enumerate(arrays):
            numeric = np.zeros_like(base)
            flat = numeric.reshape(-1)
            for i in range(base.size):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k].reshape(-1)[i] += step
                minus[k].reshape(-1)[i] -= step
                flat[i] = (value(plus) - value(minus)) / (2 * step)
            worst = max(worst, max_relative_error(grads[leaves[k]], numeric))
    return worst


def _projection(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


def op_checks(seed: int = 0) -> dict[str, float]:
    """Gradient error for every differentiable op on small random inputs.

    Each op output is contracted with a fixed random tensor so the check
    exercises the full Jacobian rather than just its column sums.
    """
    rng = np.random.default_rng(seed)

    def contract(t: Tensor, salt: int) -> Tensor:
        return ops.sum(ops.mul(t, _projection(t.shape, seed + salt)))

    def spread(shape, lo=0.2):
        # values bounded away from zero and from each other: keeps relu/max off their kinks
        n = int(np.prod(shape))
        vals = (np.arange(n) + 1.0) / n * 2.0 + lo
        signs = rng.choice([-1.0, 1.0], size=n)
        return (rng.permutation(vals) * signs).reshape(shape)

    x4 = rng.standard_normal((2, 3, 5, 5))
    results = {
        "add": check_gradients(lambda a, b: contract(ops.add(a, b), 1), [rng.standard_normal((3, 4)), rng.standard_normal((1, 4))]),
        "sub": check_gradients(lambda a, b: contract(ops.sub(a, b), 2), [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))]),
        "mul": check_gradients(lambda a, b: contract(ops.mul(a, b), 3), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "square": check_gradients(lambda a: contract(ops.square(a), 4), [rng.standard_normal((4, 3))]),
        "mean": check_gradients(lambda a: contract(ops.mean(a, axis=1), 5), [rng.standard_normal((4, 3))]),
        "reshape": check_gradients(lambda a: contract(ops.reshape(a, (6, 2)), 6), [rng.standard_normal((3, 4))]),
        "concat": check_gradients(lambda a, b: contract(ops.concat([a, b], axis=1), 7),
                                  [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))]),
        "relu": check_gradients(lambda a: contract(ops.relu(a), 8), [spread((3, 5))]),
        "sigmoid": check_gradients(lambda a: contract(ops.sigmoid(a), 9), [rng.standard_normal((3, 5))]),
        "silu": check_gradients(lambda a: contract(ops.silu(a), 10), [rng.standard_normal((3, 5))]),
        "dense": check_gradients(lambda a, w, b: contract(ops.dense(a, w, b), 11),
                                 [rng.standard_normal((2, 4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)]),
        "conv2d": check_gradients(lambda a, w, b: contract(ops.conv2d(a, w, b, stride=1, padding=1), 12),
                                  [x4, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "conv2d_stride2": check_gradients(lambda a, w: contract(ops.conv2d(a, w, stride=2, padding=1), 13),
                                          [x4, rng.standard_normal((2, 3, 3, 3))]),
        "group_norm": check_gradients(lambda a, g, b: contract(ops.group_norm(a, 2, g, b), 14),
                                      [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)]),
        "upsample_nearest": check_gradients(lambda a: contract(ops.upsample_nearest(a, 2), 15), [rng.standard_normal((1, 2, 3, 3))]),
        "downsample_nearest": check_gradients(lambda a: contract(ops.downsample_nearest(a, 2), 16), [rng.standard_normal((1, 2, 4, 4))]),
        "max_reduce": check_gradients(lambda a: contract(ops.max_reduce(a, axis=1), 17), [spread((2, 6, 3))]),
        "bce_with_logits": check_gradients(lambda z: ops.bce_with_logits(z, (np.arange(6) % 2).reshape(6, 1)),
                                           [rng.standard_normal((6, 1))]),
        "weighted_sum_of_squares": check_gradients(
            lambda p: ops.weighted_sum_of_squares(p, np.ones((2, 3)), np.array([[0.5, 1.5, 1.0]])),
            [rng.standard_normal((2, 3))]),
    }
    return results


def three_layer_net_check(seed: int = 0) -> float:
    """Random conv -> silu -> conv -> relu -> conv network, all parameters checked."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 6, 6))
    w1 = rng.standard_normal((3, 2, 3, 3)) * 0.5
    w2 = rng.standard_normal((3, 3, 3, 3)) * 0.5
    w3 = rng.standard_normal((1, 3, 1, 1))
    proj = _projection((2, 1, 3, 3), seed + 99)

    def net(x, w1, w2, w3):
        h = ops.silu(ops.conv2d(x, w1, padding=1))
        h = ops.relu(ops.conv2d(h, w2, stride=2, padding=1))
        return ops.sum(ops.mul(ops.conv2d(h, w3), proj))

    return check_gradients(net, [x, w1, w2, w3])
