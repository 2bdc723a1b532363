"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like) inputs and returns a
:class:`Tensor` whose backward closure computes exact vector-Jacobian
products. Layout conventions: channel-first ``(B, C, L)`` for convolutions,
feature-last ``(..., F)`` for ``linear``/``layer_norm``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

PADDING_MODES = ("zeros", "replicate")


class ConfigError(ValueError):
    """An operation was configured with an unsupported option."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# --- elementwise arithmetic -------------------------------------------------

def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast(x.data, y.data)
    return make_result(x.data + y.data, (x, y),
                       lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast(x.data, y.data)
    return make_result(x.data - y.data, (x, y),
                       lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_broadcast(x.data, y.data)
    return make_result(x.data * y.data, (x, y),
                       lambda g: (_unbroadcast(g * y.data, x.shape),
                                  _unbroadcast(g * x.data, y.shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)  # a numpy float64 scalar would promote float32 data
    return make_result(x.data * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows; pick the matching algebraic form per sign
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s
    return make_result(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def softplus_np(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow for large positive z or underflow loss for negative z."""
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = softplus_np(x.data)
    s = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * s,))


# --- reductions and shape ---------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inverse),))


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return make_result(out, xs, backward)


def concat_channels(xs: Sequence) -> Tensor:
    """Concatenate ``(B, C_i, L)`` tensors along the channel axis."""
    return concat(xs, axis=1)


def global_avg_pool_time(x) -> Tensor:
    """``(B, C, L) -> (B, C)`` mean over time."""
    return mean(x, axis=-1)


# --- linear algebra ---------------------------------------------------------

def matmul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {x.shape} @ {y.shape}")
    out = np.matmul(x.data, y.data)

    def backward(g):
        gx = np.matmul(g, np.swapaxes(y.data, -1, -2))
        gy = np.matmul(np.swapaxes(x.data, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return make_result(out, (x, y), backward)


def linear(x, W, b=None) -> Tensor:
    """``y = x @ W.T + b`` over the last axis; ``W`` is ``(out, in)``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear expects x[..., {W.shape[-1]}], got {x.shape}")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {W.shape[0]} outputs")
        out = out + b.data
        parents.append(b)

    def backward(g):
        gx = g @ W.data
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ x.data.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return make_result(out, parents, backward)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma, beta = as_tensor(gamma), as_tensor(beta)
        out = xhat * gamma.data + beta.data
        parents += [gamma, beta]

    def backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        n = x.shape[-1]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        if gamma is None:
            return (gx,)
        flat = g.reshape(-1, n)
        return gx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return make_result(out, parents, backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward)


# --- convolutions -----------------------------------------------------------

def _pad_time(x: np.ndarray, left: int, right: int, mode: str) -> np.ndarray:
    if left == 0 and right == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return np.pad(x, widths, mode="constant" if mode == "zeros" else "edge")


def _unpad_time_grad(g: np.ndarray, left: int, right: int, mode: str) -> np.ndarray:
    n = g.shape[-1] - left - right
    core = g[..., left:left + n].copy()
    if mode == "replicate":
        core[..., 0] += g[..., :left].sum(axis=-1)
        core[..., -1] += g[..., left + n:].sum(axis=-1)
    return core


def depthwise_conv1d(x, K, bias=None, stride: int = 1, padding: int | None = None,
                     padding_mode: str = "zeros") -> Tensor:
    """Per-channel cross-correlation. ``x`` is ``(B, C, L)``, ``K`` is ``(C, k)``.

    ``padding`` defaults to ``(k - 1) // 2`` on both sides.
    """
    if padding_mode not in PADDING_MODES:
        raise ConfigError(f"unknown padding mode {padding_mode!r}")
    x, K = as_tensor(x), as_tensor(K)
    if x.ndim != 3 or K.ndim != 2 or K.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_conv1d: x {x.shape} incompatible with kernel {K.shape}")
    k = K.shape[1]
    p = (k - 1) // 2 if padding is None else padding
    xp = _pad_time(x.data, p, p, padding_mode)
    n_out = (xp.shape[-1] - k) // stride + 1
    if n_out < 1:
        raise ShapeError(f"kernel of length {k} longer than padded input {xp.shape[-1]}")
    span = stride * (n_out - 1) + 1
    Kd = K.data
    out = np.zeros(x.shape[:2] + (n_out,), dtype=np.result_type(x.data, Kd))
    for i in range(k):
        out += Kd[:, i, None] * xp[..., i:i + span:stride]
    parents = [x, K]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp, dtype=g.dtype)
        gK = np.empty_like(Kd, dtype=g.dtype)
        for i in range(k):
            gxp[..., i:i + span:stride] += Kd[:, i, None] * g
            gK[:, i] = (xp[..., i:i + span:stride] * g).sum(axis=(0, 2))
        gx = _unpad_time_grad(gxp, p, p, padding_mode)
        if bias is None:
            return gx, gK
        return gx, gK, g.sum(axis=(0, 2))

    return make_result(out, parents, backward)


def pointwise_conv1d(x, W, b=None, stride: int = 1) -> Tensor:
    """1-tap convolution mixing channels: ``(B, Cin, L) -> (B, Cout, ceil(L/stride))``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 3 or W.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv1d: x {x.shape} incompatible with weight {W.shape}")
    xs = x.data[..., ::stride]
    out = np.matmul(W.data, xs)
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None]
        parents.append(b)

    def backward(g):
        gxs = np.matmul(W.data.T, g)
        if stride == 1:
            gx = gxs
        else:
            gx = np.zeros_like(x.data, dtype=g.dtype)
            gx[..., ::stride] = gxs
        gW = np.tensordot(g, xs, axes=([0, 2], [0, 2]))
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=(0, 2))

    return make_result(out, parents, backward)


# --- losses -----------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    """Mean over every element of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs label {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)
    return make_result(out, (pred, target),
                       lambda g: (g * 2.0 / n * diff, -g * 2.0 / n * diff))
