from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import gradcheck_with_key_bias, scramble_params
from mambaio import ssm
from mambaio.diffcore import ConfigError, ParamStore, ShapeError, Tensor, finite_diff_check, ops


def series_zoh(a, d, b, terms=20):
    """Truncated exponential series for one diagonal entry.

    A_bar = sum z^n / n!, B_bar = d * sum z^n / (n + 1)! * b with z = d * a.
    """
    z = d * a
    A_bar = math.fsum(z ** n / math.factorial(n) for n in range(terms))
    B_fac = math.fsum(z ** n / math.factorial(n + 1) for n in range(terms))
    return A_bar, d * B_fac * b


def causal_conv(K, x):
    """Direct ``y_t = sum_j K[j] x_{t-j}``."""
    S, D = x.shape
    y = np.zeros((S, D))
    for t in range(S):
        for j in range(t + 1):
            y[t] += K[j] @ x[t - j]
    return y


def random_lti(rng, H, D):
    A = -rng.uniform(0.05, 3.0, H)
    delta = rng.uniform(0.01, 0.5)
    pair = ssm.zoh_discretize(A, rng.normal(size=(H, D)), delta)
    return pair.A_bar, pair.B_bar, rng.normal(size=(D, H))


# --- discretization ---

def test_zoh_analytic_value():
    pair = ssm.zoh_discretize(np.array([-1.0]), np.array([1.0]), math.log(2))
    assert abs(pair.A_bar[0] - 0.5) < 1e-15
    assert abs(pair.B_bar[0] - 0.5) < 1e-15


def test_zoh_small_step_limit():
    B = np.array([2.0, -3.0])
    pair = ssm.zoh_discretize(np.array([-1.0, -5.0]), B, 1e-12)
    assert np.all(np.abs(pair.A_bar - 1) < 1e-10)
    assert np.all(np.abs(pair.B_bar) < 1e-10 * np.abs(B))


def test_zoh_zero_A_limit():
    pair = ssm.zoh_discretize(np.array([0.0, -1e-20]), np.array([3.0, 3.0]), 0.25)
    assert pair.B_bar.tolist() == [0.75, 0.75]
    assert pair.A_bar.tolist() == [1.0, 1.0]


def test_zoh_against_series_oracle(rng):
    # |delta * A| <= 2 keeps the 20-term truncation below 1e-13 relative
    for _ in range(500):
        a, d, b = -rng.uniform(1e-3, 2.0), rng.uniform(1e-3, 1.0), rng.normal()
        pair = ssm.zoh_discretize(np.array([a]), np.array([b]), d)
        A_ref, B_ref = series_zoh(a, d, b)
        assert abs(pair.A_bar[0] - A_ref) <= 1e-10 * abs(A_ref)
        assert abs(pair.B_bar[0] - B_ref) <= 1e-10 * abs(B_ref)


def test_zoh_errors():
    with pytest.raises(ssm.InvalidStepError):
        ssm.zoh_discretize(np.array([-1.0]), np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        ssm.zoh_discretize(np.array([1.0]), np.array([1.0]), 0.1)


@given(st.floats(-50, -1e-6), st.floats(1e-6, 10))
def test_discretized_A_in_unit_interval(a, d):
    A_bar = ssm.zoh_discretize(np.array([a]), np.array([1.0]), d).A_bar[0]
    assert 0 < A_bar < 1 or (A_bar == 0 and a * d < -700)


# --- scan and kernel ---

def test_scan_memoryless_and_single_step(rng):
    H, D = 3, 2
    B_bar, C, x = rng.normal(size=(H, D)), rng.normal(size=(D, H)), rng.normal(size=(6, D))
    y = ssm.scan(np.zeros(H), B_bar, C, x)
    np.testing.assert_allclose(y, x @ (C @ B_bar).T, atol=1e-14)
    y1 = ssm.scan(rng.uniform(0, 1, H), B_bar, C, x[:1])
    np.testing.assert_allclose(y1[0], C @ B_bar @ x[0], atol=1e-14)


def test_scalar_kernel_by_hand():
    K = ssm.ssm_kernel(np.array([0.5]), np.array([[1.0]]), np.array([[1.0]]), 4).K_bar
    assert K[:, 0, 0].tolist() == [1.0, 0.5, 0.25, 0.125]
    K0 = ssm.ssm_kernel(np.zeros(2), np.ones((2, 1)), np.ones((1, 2)), 3).K_bar
    assert K0[:, 0, 0].tolist() == [2.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        ssm.ssm_kernel(np.zeros(2), np.ones((2, 1)), np.ones((1, 2)), 0)


def test_kernel_first_tap_and_decay(rng):
    A_bar, B_bar, C = random_lti(rng, 4, 3)
    K = ssm.ssm_kernel(A_bar, B_bar, C, 20).K_bar
    np.testing.assert_allclose(K[0], C @ B_bar, atol=1e-14)
    bound = np.abs(C) @ np.abs(B_bar)
    for j in range(20):
        assert np.all(np.abs(K[j]) <= bound * A_bar.max() ** j + 1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_duality_s32(seed):
    rng = np.random.default_rng(seed)
    A_bar, B_bar, C = random_lti(rng, 5, 3)
    x = rng.normal(size=(32, 3))
    K = ssm.ssm_kernel(A_bar, B_bar, C, 32).K_bar
    assert np.abs(ssm.scan(A_bar, B_bar, C, x) - causal_conv(K, x)).max() < 1e-6


def test_zero_input_state_decays(rng):
    H = 4
    A_bar = ssm.zoh_discretize(-rng.uniform(0.1, 2, H), np.ones((H, H)), 0.3).A_bar
    y = ssm.scan(A_bar, np.zeros((H, H)), np.eye(H), np.zeros((30, H)), h0=rng.normal(size=H))
    norms = np.linalg.norm(y, axis=1)
    assert np.all(np.diff(norms) < 0)


def test_scan_overflow_reports_step():
    with pytest.raises(ssm.NumericError) as exc:
        ssm.scan(np.array([1e200]), np.ones((1, 1)), np.ones((1, 1)), np.full((10, 1), 1e200))
    assert exc.value.step == 1


def test_scan_shape_errors(rng):
    with pytest.raises(ShapeError):
        ssm.scan(np.zeros(3), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        ssm.scan(np.zeros(3), np.zeros((3, 2)), np.zeros((2, 3)), np.zeros(4))


# --- selective scan ---

def test_selective_op_with_constant_inputs_is_time_invariant(rng):
    S, D, H = 12, 3, 4
    A = -rng.uniform(0.1, 2, (D, H))
    delta = np.full((1, S, D), 0.2)
    Bv, Cv = rng.normal(size=H), rng.normal(size=H)
    u = rng.normal(size=(1, S, D))
    y = ssm.selective_scan_op(u, delta, A, np.tile(Bv, (1, S, 1)), np.tile(Cv, (1, S, 1))).data[0]
    for d in range(D):
        pair = ssm.zoh_discretize(A[d], Bv[:, None], 0.2)
        ref = ssm.scan(pair.A_bar, pair.B_bar, Cv[None, :], u[0, :, d:d + 1])[:, 0]
        np.testing.assert_allclose(y[:, d], ref, atol=1e-13)


def test_selective_scan_vanishing_step_gives_zero(rng):
    store = ParamStore(np.float64)
    p = ssm.SsmCoreParams.create(store, "s", 4, 3, rng)
    p.delta_W.data[...] = 0
    p.delta_b.data[...] = -60.0
    y = ssm.selective_scan(rng.normal(size=(10, 4)), p)
    assert np.abs(y.data).max() < 1e-20


def test_selective_scan_A_negative(rng):
    store = ParamStore(np.float64)
    p = ssm.SsmCoreParams.create(store, "s", 4, 16, rng)
    A = -np.exp(p.A_log.data)
    assert np.all(A < 0)
    np.testing.assert_allclose(A[0], -np.arange(1, 17))
    steps = ops.softplus(p.delta_b).data
    assert np.all((steps >= 1e-3 * (1 - 1e-9)) & (steps <= 1e-1 * (1 + 1e-9)))


def test_selective_scan_gradients(rng):
    store = ParamStore(np.float64)
    p = ssm.SsmCoreParams.create(store, "s", 4, 3, rng)
    scramble_params(store, rng)
    x = Tensor(rng.normal(size=(16, 4)), requires_grad=True)
    w = rng.normal(size=(16, 4))
    f = lambda: ops.sum(ops.mul(ssm.selective_scan(x, p), w))  # noqa: E731
    assert finite_diff_check(f, list(store) + [x]) < 1e-4


def test_selective_scan_op_gradients_wrt_inputs(rng):
    N, S, D, H = 2, 7, 3, 4
    leaves = [Tensor(a, requires_grad=True) for a in (
        rng.normal(size=(N, S, D)), rng.uniform(0.1, 1.0, (N, S, D)), -rng.uniform(0.2, 2, (D, H)),
        rng.normal(size=(N, S, H)), rng.normal(size=(N, S, H)))]
    w = rng.normal(size=(N, S, D))
    f = lambda: ops.sum(ops.mul(ssm.selective_scan_op(*leaves), w))  # noqa: E731
    assert finite_diff_check(f, leaves) < 1e-6


def test_selective_scan_op_small_A_series_branch(rng):
    # |delta * A| below the series threshold exercises the removable-singularity path
    N, S, D, H = 1, 5, 2, 3
    leaves = [Tensor(a, requires_grad=True) for a in (
        rng.normal(size=(N, S, D)), rng.uniform(0.1, 1.0, (N, S, D)), np.full((D, H), -1e-9),
        rng.normal(size=(N, S, H)), rng.normal(size=(N, S, H)))]
    w = rng.normal(size=(N, S, D))
    f = lambda: ops.sum(ops.mul(ssm.selective_scan_op(*leaves), w))  # noqa: E731
    f().backward()
    assert np.all(np.isfinite(leaves[2].grad))
    assert finite_diff_check(f, leaves[:2] + leaves[3:]) < 1e-6


# --- blocks ---

def make_block(rng, channels=8, state=4):
    store = ParamStore(np.float64)
    return store, ssm.MambaBlockParams.create(store, "b", channels, state, rng)


def test_mamba_block_shapes(rng):
    store, p = make_block(rng)
    x = rng.normal(size=(2, 16, 8))
    x1, x2 = ssm.mamba_branches(x, p)
    assert x1.shape == x2.shape == (2, 16, p.branch_width)
    assert p.out_W.shape[1] == 2 * p.branch_width
    assert ssm.mamba_block(x, p).shape == x.shape
    with pytest.raises(ShapeError):
        ssm.mamba_block(rng.normal(size=(2, 16, 5)), p)


def test_mamba_block_gradients(rng):
    store, p = make_block(rng)
    scramble_params(store, rng)
    x = Tensor(rng.normal(size=(1, 16, 8)), requires_grad=True)
    w = rng.normal(size=(1, 16, 8))
    f = lambda: ops.sum(ops.mul(ssm.mamba_block(x, p), w))  # noqa: E731
    assert finite_diff_check(f, list(store) + [x]) < 1e-4


def make_attention(rng, channels=8, heads=4):
    store = ParamStore(np.float64)
    return store, ssm.AttentionParams.create(store, "a", channels, heads, rng)


def test_attention_rows_sum_to_one(rng):
    _, p = make_attention(rng)
    _, weights = ssm.attention_block(rng.normal(size=(2, 9, 8)), p, return_weights=True)
    assert weights.shape == (2, 4, 9, 9)
    assert np.abs(weights.data.sum(-1) - 1).max() < 1e-12


def test_attention_single_token(rng):
    store, p = make_attention(rng)
    x = rng.normal(size=(1, 1, 8))
    out, weights = ssm.attention_block(x, p, return_weights=True)
    assert np.all(weights.data == 1.0)
    xn = ops.layer_norm(x, p.norm_g, p.norm_b).data
    v = (xn @ p.qkv_W.data.T + p.qkv_b.data)[..., 16:]
    np.testing.assert_allclose(out.data, x + v @ p.out_W.data.T + p.out_b.data, atol=1e-14)


def test_attention_permutation_equivariant(rng):
    _, p = make_attention(rng)
    x = rng.normal(size=(1, 7, 8))
    perm = rng.permutation(7)
    out = ssm.attention_block(x, p).data
    out_perm = ssm.attention_block(x[:, perm], p).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-13)


def test_attention_errors_and_gradients(rng):
    with pytest.raises(ConfigError):
        make_attention(rng, channels=6, heads=4)
    store, p = make_attention(rng)
    scramble_params(store, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    w = rng.normal(size=(2, 5, 8))
    f = lambda: ops.sum(ops.mul(ssm.attention_block(x, p), w))  # noqa: E731
    worst, key_grad, key_fd = gradcheck_with_key_bias(f, list(store.items()) + [("x", x)])
    assert worst < 1e-4
    assert key_grad < 1e-12 and key_fd < 1e-8
