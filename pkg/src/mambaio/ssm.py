"""State-space branch: ZOH discretization, scans, and the Mamba/attention blocks.

Two views of the same recurrence live here. :func:`scan` and
:func:`ssm_kernel` are plain numpy routines over a shared state of size ``H``
(``B_bar`` is ``H x D``, ``C`` is ``D x H``). The network uses the
per-channel diagonal form, where each of the ``D`` channels owns ``H`` states
and ``A`` is a ``D x H`` array of negative reals; :func:`selective_scan_op`
implements that form as a single differentiable op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ParamStore, ShapeError, Tensor, as_tensor, make_result
from .diffcore import ops
from .diffcore.ops import ConfigError

ZOH_LIMIT = 1e-8


class InvalidStepError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class DiscretizedPair:
    A_bar: np.ndarray
    B_bar: np.ndarray


@dataclass(frozen=True)
class SsmKernel:
    K_bar: np.ndarray  # (S, D, D): K_bar[j] maps x_{t-j} to its contribution in y_t


def phi1(z: np.ndarray) -> np.ndarray:
    """``(exp(z) - 1) / z`` with the removable singularity at 0 filled by 1."""
    z = np.asarray(z)
    small = np.abs(z) < ZOH_LIMIT
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe).astype(z.dtype, copy=False)


def zoh_discretize(A: np.ndarray, B: np.ndarray, delta) -> DiscretizedPair:
    """Zero-order-hold discretization of a diagonal system.

    ``A_bar = exp(delta*A)`` and ``B_bar = (exp(delta*A) - 1) / A * B``; the
    factor reduces to ``delta`` when ``|delta*A| < 1e-8``. Trailing axes of
    ``B`` beyond ``A``'s are treated as input channels.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise InvalidStepError("discretization step must be positive")
    if np.any(A > 0):
        raise ValueError("diagonal A must be non-positive for a stable system")
    z = delta * A
    factor = delta * phi1(z)
    factor = factor.reshape(factor.shape + (1,) * (B.ndim - factor.ndim))
    return DiscretizedPair(A_bar=np.exp(z), B_bar=factor * B)


def scan(A_bar: np.ndarray, B_bar: np.ndarray, C: np.ndarray, x: np.ndarray,
         h0: np.ndarray | None = None) -> np.ndarray:
    """Sequential recurrence ``h_t = A_bar_t * h_{t-1} + B_bar_t x_t``, ``y_t = C_t h_t``.

    ``x`` is ``(S, D)``. Parameters may be time-invariant (``A_bar (H,)``,
    ``B_bar (H, D)``, ``C (D, H)``) or carry a leading time axis of length S.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"x must be (S, D), got {x.shape}")
    S, D = x.shape
    A_bar, B_bar, C = (np.asarray(a, dtype=float) for a in (A_bar, B_bar, C))
    a_tv, b_tv, c_tv = A_bar.ndim == 2, B_bar.ndim == 3, C.ndim == 3
    H = A_bar.shape[-1]
    if B_bar.shape[-2:] != (H, D) or C.shape[-2:] != (D, H):
        raise ShapeError(f"inconsistent shapes A_bar {A_bar.shape}, B_bar {B_bar.shape}, C {C.shape}")
    h = np.zeros(H) if h0 is None else np.asarray(h0, dtype=float).copy()
    y = np.empty((S, D))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(S):
            h = (A_bar[t] if a_tv else A_bar) * h + (B_bar[t] if b_tv else B_bar) @ x[t]
            if not np.all(np.isfinite(h)):
                raise NumericError(f"state became non-finite at step {t}", step=t)
            y[t] = (C[t] if c_tv else C) @ h
    return y


def ssm_kernel(A_bar: np.ndarray, B_bar: np.ndarray, C: np.ndarray, S: int) -> SsmKernel:
    """``K_bar[j] = C diag(A_bar)^j B_bar`` for ``j = 0 .. S-1`` (time-invariant case)."""
    if S <= 0:
        raise ValueError("kernel length must be positive")
    A_bar, B_bar, C = (np.asarray(a, dtype=float) for a in (A_bar, B_bar, C))
    powers = A_bar[None, :] ** np.arange(S)[:, None]  # (S, H)
    return SsmKernel(np.einsum("dh,sh,he->sde", C, powers, B_bar))


def selective_scan_op(u, delta, A, Bm, Cm) -> Tensor:
    """Differentiable per-channel selective scan.

    Shapes: ``u, delta (N, S, D)``; ``A (D, H)`` (negative); ``Bm, Cm (N, S, H)``.
    Returns ``y (N, S, D)`` with ``y_t[d] = sum_h Cm_t[h] h_t[d, h]``.
    """
    u, delta, A, Bm, Cm = (as_tensor(t) for t in (u, delta, A, Bm, Cm))
    N, S, D = u.shape
    H = A.shape[1]
    if delta.shape != u.shape or A.shape != (D, H) or Bm.shape != (N, S, H) or Cm.shape != (N, S, H):
        raise ShapeError(
            f"selective scan shapes: u {u.shape}, delta {delta.shape}, A {A.shape}, "
            f"B {Bm.shape}, C {Cm.shape}")
    return _scan(u, delta, A, Bm, Cm)


def _raise_if_nonfinite(hs: np.ndarray) -> None:
    if not np.all(np.isfinite(hs)):
        S = hs.shape[1]
        finite_steps = np.isfinite(hs).transpose(1, 0, 2, 3).reshape(S, -1).all(axis=1)
        bad = int(np.argmin(finite_steps))
        raise NumericError(f"selective scan state became non-finite at step {bad}", step=bad)


def _scan(u, delta, A, Bm, Cm) -> Tensor:
    N, S, D = u.shape
    dl = delta.data[..., None]
    Ad = A.data
    z = dl * Ad
    em1 = np.expm1(z)
    a = em1 + 1.0
    # bfac = (exp(delta*A) - 1) / A, i.e. delta * phi1(delta*A)
    small = np.abs(z) < ZOH_LIMIT
    any_small = bool(small.any())
    if any_small:
        bfac = np.where(small, dl, em1 / np.where(small, 1.0, Ad))
    else:
        bfac = em1 / Ad
    Bx = Bm.data[:, :, None, :]
    bu = bfac * Bx * u.data[..., None]
    hs = np.empty_like(bu)
    h = np.zeros_like(bu[:, 0])
    for t in range(S):
        np.multiply(a[:, t], h, out=h)
        h += bu[:, t]
        hs[:, t] = h
    _raise_if_nonfinite(hs)
    y = np.matmul(hs, Cm.data[..., None])[..., 0]

    def backward(g):
        g = g.astype(hs.dtype, copy=False)
        gC = np.matmul(g[:, :, None, :], hs)[:, :, 0, :]
        direct = g[..., None] * Cm.data[:, :, None, :]
        # G_t = dL/dh_t, accumulated backwards in time (in place over `direct`)
        G = direct
        for t in range(S - 2, -1, -1):
            G[:, t] += a[:, t + 1] * G[:, t + 1]
        h_prev = np.empty_like(hs)
        h_prev[:, 0] = 0.0
        h_prev[:, 1:] = hs[:, :-1]
        ga = G * h_prev
        gbu = G * u.data[..., None]          # dL/d(bfac * B)
        gu = np.matmul(G * bfac, Bm.data[..., None])[..., 0]
        gbfac = gbu * Bx
        gB = (gbu * bfac).sum(axis=2)
        # d a / d delta = A a,  d bfac / d delta = a
        gdelta = (a * (ga * Ad + gbfac)).sum(axis=-1)
        # d a / d A = delta a,  d bfac / d A = (delta a - bfac) / A  (-> delta^2/2 as A -> 0)
        if any_small:
            dbfac_dA = np.where(small, 0.5 * dl * dl, (dl * a - bfac) / np.where(small, 1.0, Ad))
        else:
            dbfac_dA = (dl * a - bfac) / Ad
        gA = (ga * dl * a + gbfac * dbfac_dA).sum(axis=(0, 1))
        return gu, gdelta, gA, gB, gC

    return make_result(y, (u, delta, A, Bm, Cm), backward)


# --- parameter containers ---------------------------------------------------

def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmCoreParams:
    A_log: Tensor     # (D, H); A = -exp(A_log)
    delta_W: Tensor   # (D, D)
    delta_b: Tensor   # (D,)
    B_W: Tensor       # (H, D)
    C_W: Tensor       # (H, D)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, h: int,
               rng: np.random.Generator) -> "SsmCoreParams":
        bound = 1.0 / np.sqrt(d)
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        return cls(
            A_log=store.add(f"{prefix}.A_log", np.log(np.tile(np.arange(1, h + 1, dtype=float), (d, 1)))),
            delta_W=store.add(f"{prefix}.delta_proj.weight", _uniform(rng, (d, d), bound)),
            delta_b=store.add(f"{prefix}.delta_proj.bias", inverse_softplus(dt)),
            B_W=store.add(f"{prefix}.B_proj.weight", _uniform(rng, (h, d), bound)),
            C_W=store.add(f"{prefix}.C_proj.weight", _uniform(rng, (h, d), bound)),
        )

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]


def selective_scan(x, p: SsmCoreParams) -> Tensor:
    """Input-dependent scan over ``x (N, S, D)`` (or ``(S, D)``)."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    delta = ops.softplus(ops.linear(x, p.delta_W, p.delta_b))
    Bm = ops.linear(x, p.B_W)
    Cm = ops.linear(x, p.C_W)
    A = ops.neg(ops.exp(p.A_log))
    y = selective_scan_op(x, delta, A, Bm, Cm)
    if squeeze:
        y = ops.reshape(y, y.shape[1:])
    return y


@dataclass
class MambaBlockParams:
    norm_g: Tensor
    norm_b: Tensor
    in1_W: Tensor
    in1_b: Tensor
    in2_W: Tensor
    in2_b: Tensor
    conv1_K: Tensor
    conv1_b: Tensor
    conv2_K: Tensor
    conv2_b: Tensor
    core: SsmCoreParams
    out_W: Tensor
    out_b: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, state: int,
               rng: np.random.Generator, conv_k: int = 3, width: int | None = None) -> "MambaBlockParams":
        e = width or channels
        b_in = 1.0 / np.sqrt(channels)
        b_conv = 1.0 / np.sqrt(conv_k)
        return cls(
            norm_g=store.add(f"{prefix}.norm.weight", np.ones(channels)),
            norm_b=store.add(f"{prefix}.norm.bias", np.zeros(channels)),
            in1_W=store.add(f"{prefix}.in_ssm.weight", _uniform(rng, (e, channels), b_in)),
            in1_b=store.add(f"{prefix}.in_ssm.bias", np.zeros(e)),
            in2_W=store.add(f"{prefix}.in_gate.weight", _uniform(rng, (e, channels), b_in)),
            in2_b=store.add(f"{prefix}.in_gate.bias", np.zeros(e)),
            conv1_K=store.add(f"{prefix}.conv_ssm.weight", _uniform(rng, (e, conv_k), b_conv)),
            conv1_b=store.add(f"{prefix}.conv_ssm.bias", np.zeros(e)),
            conv2_K=store.add(f"{prefix}.conv_gate.weight", _uniform(rng, (e, conv_k), b_conv)),
            conv2_b=store.add(f"{prefix}.conv_gate.bias", np.zeros(e)),
            core=SsmCoreParams.create(store, f"{prefix}.ssm", e, state, rng),
            out_W=store.add(f"{prefix}.out.weight", _uniform(rng, (channels, 2 * e), 1.0 / np.sqrt(2 * e))),
            out_b=store.add(f"{prefix}.out.bias", np.zeros(channels)),
        )

    @property
    def branch_width(self) -> int:
        return self.in1_W.shape[0]


def _conv_time(x: Tensor, K: Tensor, b: Tensor) -> Tensor:
    # (N, L, E) -> depthwise conv along L -> (N, L, E)
    xc = ops.transpose(x, (0, 2, 1))
    return ops.transpose(ops.depthwise_conv1d(xc, K, b, padding_mode="zeros"), (0, 2, 1))


def mamba_branches(x, p: MambaBlockParams) -> tuple[Tensor, Tensor]:
    """The two pre-fusion branches for ``x (N, L, C)``: scanned and gating paths."""
    x = as_tensor(x)
    xn = ops.layer_norm(x, p.norm_g, p.norm_b)
    x1 = ops.silu(_conv_time(ops.linear(xn, p.in1_W, p.in1_b), p.conv1_K, p.conv1_b))
    x1 = selective_scan(x1, p.core)
    x2 = ops.silu(_conv_time(ops.linear(xn, p.in2_W, p.in2_b), p.conv2_K, p.conv2_b))
    return x1, x2


def mamba_block(x, p: MambaBlockParams) -> Tensor:
    """Residual block: ``x + Linear(Concat(SSM branch, gate branch))``."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != p.norm_g.shape[0]:
        raise ShapeError(f"mamba block expects (N, L, {p.norm_g.shape[0]}), got {x.shape}")
    x1, x2 = mamba_branches(x, p)
    mixed = ops.linear(ops.concat([x1, x2], axis=-1), p.out_W, p.out_b)
    return ops.add(x, mixed)


@dataclass
class AttentionParams:
    norm_g: Tensor
    norm_b: Tensor
    qkv_W: Tensor
    qkv_b: Tensor
    out_W: Tensor
    out_b: Tensor
    heads: int

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, heads: int,
               rng: np.random.Generator) -> "AttentionParams":
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        bound = 1.0 / np.sqrt(channels)
        return cls(
            norm_g=store.add(f"{prefix}.norm.weight", np.ones(channels)),
            norm_b=store.add(f"{prefix}.norm.bias", np.zeros(channels)),
            qkv_W=store.add(f"{prefix}.qkv.weight", _uniform(rng, (3 * channels, channels), bound)),
            qkv_b=store.add(f"{prefix}.qkv.bias", np.zeros(3 * channels)),
            out_W=store.add(f"{prefix}.out.weight", _uniform(rng, (channels, channels), bound)),
            out_b=store.add(f"{prefix}.out.bias", np.zeros(channels)),
            heads=heads,
        )


def attention_block(x, p: AttentionParams, return_weights: bool = False):
    """Pre-norm multi-head self-attention with a residual; no positional encoding."""
    x = as_tensor(x)
    N, L, C = x.shape
    if C % p.heads:
        raise ConfigError(f"{C} channels not divisible by {p.heads} heads")
    dh = C // p.heads
    qkv = ops.linear(ops.layer_norm(x, p.norm_g, p.norm_b), p.qkv_W, p.qkv_b)
    # (N, L, 3, heads, dh) -> (3, N, heads, L, dh)
    qkv = ops.transpose(ops.reshape(qkv, (N, L, 3, p.heads, dh)), (2, 0, 3, 1, 4))
    parts = [ops.reshape(_take(qkv, i), (N, p.heads, L, dh)) for i in range(3)]
    q, k, v = parts
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(weights, v)  # (N, heads, L, dh)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (N, L, C))
    out = ops.add(x, ops.linear(ctx, p.out_W, p.out_b))
    return (out, weights) if return_weights else out


def _take(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis, differentiable."""
    def backward(g):
        full = np.zeros_like(x.data, dtype=g.dtype)
        full[i] = g
        return (full,)

    return make_result(x.data[i], (x,), backward)
