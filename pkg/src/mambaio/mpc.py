"""Multi-path convolution block for the high-frequency band.

Three depthwise convolutions (1, 3 and 7 taps, zero padded to keep the
length) run in parallel, their outputs are stacked to ``3C`` channels,
reweighted by a squeeze-and-excitation gate and fused back to ``C`` channels
by a pointwise convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ParamStore, ShapeError, Tensor, as_tensor
from .diffcore import ops
from .diffcore.ops import ConfigError

KERNEL_SIZES = (1, 3, 7)


class WindowTooShortError(ValueError):
    pass


@dataclass
class MpcBlockParams:
    kernels: list[Tensor]      # (C, k) for k in KERNEL_SIZES
    kernel_biases: list[Tensor]
    se_squeeze_W: Tensor       # (3C/r, 3C)
    se_squeeze_b: Tensor
    se_excite_W: Tensor        # (3C, 3C/r)
    se_excite_b: Tensor
    fuse_W: Tensor             # (C, 3C)
    fuse_b: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, rng: np.random.Generator,
               se_ratio: int = 4) -> "MpcBlockParams":
        wide = 3 * channels
        if wide % se_ratio:
            raise ConfigError(f"SE ratio {se_ratio} does not divide {wide} channels")
        hidden = wide // se_ratio
        kernels, biases = [], []
        for k in KERNEL_SIZES:
            K = rng.uniform(-0.05, 0.05, size=(channels, k))
            K[:, k // 2] += 1.0
            kernels.append(store.add(f"{prefix}.dw{k}.weight", K))
            biases.append(store.add(f"{prefix}.dw{k}.bias", np.zeros(channels)))
        return cls(
            kernels=kernels,
            kernel_biases=biases,
            se_squeeze_W=store.add(f"{prefix}.se.squeeze.weight",
                                   rng.uniform(-1, 1, (hidden, wide)) / np.sqrt(wide)),
            se_squeeze_b=store.add(f"{prefix}.se.squeeze.bias", np.zeros(hidden)),
            se_excite_W=store.add(f"{prefix}.se.excite.weight",
                                  rng.uniform(-1, 1, (wide, hidden)) / np.sqrt(hidden)),
            se_excite_b=store.add(f"{prefix}.se.excite.bias", np.zeros(wide)),
            fuse_W=store.add(f"{prefix}.fuse.weight", rng.uniform(-1, 1, (channels, wide)) / np.sqrt(wide)),
            fuse_b=store.add(f"{prefix}.fuse.bias", np.zeros(channels)),
        )

    @property
    def channels(self) -> int:
        return self.fuse_W.shape[0]


def multi_path(x, p: MpcBlockParams, strict: bool = True) -> Tensor:
    """The concatenated ``(N, 3C, L)`` outputs of the three depthwise paths.

    ``strict=False`` skips the minimum-length check; zero padding still gives
    same-length outputs, which deep stages of short windows rely on.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != p.channels:
        raise ShapeError(f"MPC block expects (N, {p.channels}, L), got {x.shape}")
    if strict and x.shape[-1] < max(KERNEL_SIZES):
        raise WindowTooShortError(f"need at least {max(KERNEL_SIZES)} samples, got {x.shape[-1]}")
    paths = [ops.depthwise_conv1d(x, K, b, padding=K.shape[1] // 2, padding_mode="zeros")
             for K, b in zip(p.kernels, p.kernel_biases)]
    return ops.concat_channels(paths)


def se_gate(x_concat: Tensor, p: MpcBlockParams) -> Tensor:
    pooled = ops.global_avg_pool_time(x_concat)
    hidden = ops.silu(ops.linear(pooled, p.se_squeeze_W, p.se_squeeze_b))
    return ops.sigmoid(ops.linear(hidden, p.se_excite_W, p.se_excite_b))


def mpc_forward(x, p: MpcBlockParams, return_gates: bool = False, strict: bool = True):
    """``(N, C, L) -> (N, C, L)``; optionally also the ``(N, 3C)`` SE gates."""
    x_concat = multi_path(x, p, strict)
    gates = se_gate(x_concat, p)
    n, wide = gates.shape
    scaled = ops.mul(x_concat, ops.reshape(gates, (n, wide, 1)))
    out = ops.pointwise_conv1d(scaled, p.fuse_W, p.fuse_b)
    return (out, gates) if return_gates else out
