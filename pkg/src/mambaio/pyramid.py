"""Fixed-kernel Laplacian split of a windowed signal into low and high bands.

The low-pass is a uniform ``k``-tap average (weights ``1/k``) applied with
stride 2 under edge-replicate padding, so constants pass through unchanged.
Nearest-neighbour upsampling restores the length and the high band is the
residual, which makes ``low + high == x`` exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ShapeError, Tensor, as_tensor, make_result
from .diffcore import ops

STRIDE = 2


class InvalidWindowError(ValueError):
    pass


class KernelTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyBands:
    low: np.ndarray
    high: np.ndarray
    low_downsampled: np.ndarray


def _validate(length: int, k: int, s: int) -> int:
    if s != STRIDE:
        raise ValueError(f"only stride {STRIDE} is supported, got {s}")
    if k % 2 != 1 or k < 1:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    if length % 2:
        raise InvalidWindowError(f"window length must be even, got {length}")
    if k > length:
        raise KernelTooLongError(f"kernel of {k} taps exceeds window length {length}")
    return (k - 1) // 2


def lowpass_downsample(x: np.ndarray, k: int = 5, s: int = STRIDE) -> np.ndarray:
    """``(..., L) -> (..., L/2)``: replicate-padded ``k``-tap mean, every ``s``-th output."""
    p = _validate(x.shape[-1], k, s)
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(p, p)], mode="edge")
    n_out = (xp.shape[-1] - k) // s + 1
    span = s * (n_out - 1) + 1
    acc = np.zeros(x.shape[:-1] + (n_out,), dtype=np.result_type(x, np.float32))
    for i in range(k):
        acc += xp[..., i:i + span:s]
    return acc / k


def lowpass_downsample_adjoint(g: np.ndarray, length: int, k: int = 5, s: int = STRIDE) -> np.ndarray:
    """Transpose of :func:`lowpass_downsample` for an input of ``length`` samples."""
    p = _validate(length, k, s)
    n_out = g.shape[-1]
    span = s * (n_out - 1) + 1
    gp = np.zeros(g.shape[:-1] + (length + 2 * p,), dtype=g.dtype)
    scaled = g / k
    for i in range(k):
        gp[..., i:i + span:s] += scaled
    gx = gp[..., p:p + length].copy()
    gx[..., 0] += gp[..., :p].sum(axis=-1)
    gx[..., -1] += gp[..., p + length:].sum(axis=-1)
    return gx


def upsample_nearest(x: np.ndarray, s: int = STRIDE) -> np.ndarray:
    return np.repeat(x, s, axis=-1)


def decompose(x: np.ndarray, k: int = 5, s: int = STRIDE) -> FrequencyBands:
    """Split ``x`` of shape ``(..., C, L)`` into low/high bands.

    Single-precision windows (the sensor/storage precision) come back as
    float64 bands: the low band is rounded onto the float32 grid and the
    residual is formed in float64, where the subtraction is exact. That
    makes ``low + high == x`` hold bitwise whenever every nonzero sample is
    within a factor 2^29 of its local mean (any realistic sensor window;
    exact zeros are always fine). For float64 input no such
    headroom exists and reconstruction is exact only to rounding.
    """
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise InvalidWindowError("window contains non-finite values")
    if x.dtype.itemsize <= 4 and np.issubdtype(x.dtype, np.floating):
        low_ds = lowpass_downsample(x.astype(np.float64), k, s).astype(x.dtype).astype(np.float64)
        x = x.astype(np.float64)
    else:
        low_ds = lowpass_downsample(x, k, s)
    low = upsample_nearest(low_ds, s)
    return FrequencyBands(low=low, high=x - low, low_downsampled=low_ds)


def decompose_backward(grad_low: np.ndarray, grad_high: np.ndarray, k: int = 5,
                       s: int = STRIDE) -> np.ndarray:
    """Adjoint of ``x -> (low, high)``: returns dLoss/dx."""
    grad_low = np.asarray(grad_low)
    grad_high = np.asarray(grad_high)
    if grad_low.shape != grad_high.shape:
        raise ShapeError(f"band gradients differ in shape: {grad_low.shape} vs {grad_high.shape}")
    length = grad_low.shape[-1]
    # low = U D x, high = x - U D x  =>  dx = g_high + D^T U^T (g_low - g_high)
    diff = grad_low - grad_high
    folded = diff.reshape(diff.shape[:-1] + (length // s, s)).sum(axis=-1)
    return grad_high + lowpass_downsample_adjoint(folded, length, k, s)


def decompose_multilevel(x: np.ndarray, depth: int = 1, k: int = 5, s: int = STRIDE) -> list[FrequencyBands]:
    """Recursive split; level ``i + 1`` decomposes level ``i``'s downsampled low band."""
    levels = []
    current = np.asarray(x)
    for _ in range(depth):
        bands = decompose(current, k, s)
        levels.append(bands)
        current = bands.low_downsampled
    return levels


def decompose_tensor(x, k: int = 5, s: int = STRIDE) -> tuple[Tensor, Tensor]:
    """Differentiable version returning ``(low, high)`` tensors."""
    x = as_tensor(x)
    _validate(x.shape[-1], k, s)
    low_data = upsample_nearest(lowpass_downsample(x.data, k, s), s).astype(x.dtype)
    # one record per band; each backward routes through the shared adjoint
    low = make_result(low_data, (x,),
                      lambda g: (decompose_backward(g, np.zeros_like(g), k, s),))
    high = make_result(x.data - low_data, (x,),
                       lambda g: (decompose_backward(np.zeros_like(g), g, k, s),))
    return low, high


def lowpass_tensor(x, k: int = 5, s: int = STRIDE) -> Tensor:
    x = as_tensor(x)
    length = x.shape[-1]
    out = lowpass_downsample(x.data, k, s).astype(x.dtype)
    return make_result(out, (x,), lambda g: (lowpass_downsample_adjoint(g, length, k, s),))


def upsample_tensor(x, factor: int) -> Tensor:
    x = as_tensor(x)
    out = np.repeat(x.data, factor, axis=-1)
    return make_result(out, (x,),
                       lambda g: (g.reshape(g.shape[:-1] + (x.shape[-1], factor)).sum(axis=-1),))


def split_tensor(x, k: int = 5, s: int = STRIDE, depth: int = 1) -> tuple[Tensor, Tensor]:
    """``depth``-level split: the coarsest low band, upsampled to full length, and the residual."""
    x = as_tensor(x)
    if depth == 1:
        return decompose_tensor(x, k, s)
    coarse = x
    for _ in range(depth):
        coarse = lowpass_tensor(coarse, k, s)
    low = upsample_tensor(coarse, s ** depth)
    return low, ops.sub(x, low)
