"""Differentiable operations used by the denoiser and the point classifier.

Every function takes and returns :class:`Tensor` values and records a
vector-Jacobian product on the active tape. Layouts follow NCHW for images
and (batch, points, channels) for point sets.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), vjp)


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return record(out.copy(), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {xs[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tuple(xs), vjp)


# -- activations -------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit, x * sigmoid(x)."""
    s = _sigmoid(x.data)
    return record(x.data * s, (x,), lambda g: (g * (s * (1 + x.data * (1 - s))),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and avoids boolean masking
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- dense and convolution -----------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer on the last axis: ``x @ w + b`` with w of shape (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input features {x.shape} do not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    flat = x.data.reshape(-1, w.shape[0])
    out = flat @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, vjp)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[N,C,H,W] with w[O,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")

    cols, ho, wo = _im2col(_pad(x.data, padding), kh, kw, stride)
    wmat = w.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kh - 1 - padding >= 0 and kw == kh:
                # full correlation of g with the flipped, transposed kernel
                wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, o * kh * kw)
                gcols, _, _ = _im2col(_pad(np.ascontiguousarray(g), kh - 1 - padding), kh, kw, 1)
                gx = np.ascontiguousarray((gcols @ wf.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
            else:
                dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
                gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, vjp)


# -- normalization and resampling ----------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/groups, H, W) blocks of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    for p, label in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"group_norm: {label} shape {p.shape} does not match {c} channels")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(1, c, 1, 1)
    if beta is not None:
        out = out + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        gg = g * gamma.data.reshape(1, c, 1, 1) if gamma is not None else g
        gx = None
        if x.requires_grad:
            dh = gg.reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            gx = (inv / m) * (m * dh - dh.sum(-1, keepdims=True) - xh * (dh * xh).sum(-1, keepdims=True))
            gx = gx.reshape(x.shape)
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    return record(np.ascontiguousarray(out), inputs, vjp)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NCHW input, got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return record(out, (x,), vjp)


def downsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Keep the top-left sample of every factor x factor block."""
    if x.ndim != 4 or x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"downsample_nearest: shape {x.shape} not divisible by {factor}")
    out = np.ascontiguousarray(x.data[:, :, ::factor, ::factor])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::factor, ::factor] = g
        return (gx,)

    return record(out, (x,), vjp)


# -- reductions over point sets -------------------------------------------------

def max_reduce(x: Tensor, axis: int = 1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    if x.ndim == 0:
        raise ShapeError("max_reduce needs at least one axis")
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), vjp)


# -- losses ----------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy, computed stably from raw logits."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss.mean(), dtype=logits.dtype)
    scale = 1.0 / z.size

    def vjp(g):
        return ((_sigmoid(z) - y) * (g * scale),)

    return record(out, (logits,), vjp)


def weighted_sum_of_squares(pred: Tensor, target, weights) -> Tensor:
    """sum(weights * (pred - target)^2) with constant target and weights."""
    t = np.asarray(target, dtype=pred.dtype)
    w = np.asarray(weights, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"target shape {t.shape} does not match prediction {pred.shape}")
    w = np.broadcast_to(w, pred.shape)
    d = pred.data - t
    out = np.asarray((w * d * d).sum(dtype=np.float64), dtype=pred.dtype)
    return record(out, (pred,), lambda g: (2.0 * g * w * d,))


__all__ = [
    "add", "sub", "mul", "square", "sum", "mean", "reshape", "concat",
    "relu", "sigmoid", "silu", "dense", "conv2d", "group_norm",
    "upsample_nearest", "downsample_nearest", "max_reduce",
    "bce_with_logits", "weighted_sum_of_squares", "as_tensor",
]
