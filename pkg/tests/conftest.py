from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mambaio.diffcore import finite_diff_check
from mambaio.model import ModelConfig, build

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def scramble_params(store, rng, bound=1.0, norm_gain_offset=1.5):
    """Replace every parameter with U(-bound, bound) draws.

    Freshly initialized blocks have many tiny gradient entries (zero biases,
    identity-like kernels) whose central differences sit at the rounding
    floor, so gradient checks use well-scaled random parameters instead.
    """
    for name, t in store.items():
        t.data[...] = rng.uniform(-bound, bound, t.shape)
        if name.endswith("norm.weight"):
            t.data[...] += norm_gain_offset


def tiny_config(**overrides) -> ModelConfig:
    kw = dict(window_len=16, stage_channels=[8, 8, 8, 8], ssm={"H": 4, "conv_k": 3},
              blocks_per_stage=1, precision="float64")
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_model_for_gradcheck(seed=0):
    """Double-precision tiny model with parameters nudged away from their init."""
    model = build(tiny_config(), seed)
    rng = np.random.default_rng(seed + 1000)
    for name, t in model.params.items():
        t.data[...] += rng.uniform(-0.25, 0.25, t.shape)
        if name.endswith("delta_proj.bias"):
            t.data[...] = rng.uniform(-1, 1, t.shape)
    return model


def central_differences(f, t, indices, eps=1e-5):
    """Analytic and numeric derivatives of ``f`` for selected flat entries of ``t``."""
    t.zero_grad()
    f().backward()
    analytic = t.grad.reshape(-1)[indices].copy()
    flat = t.data.reshape(-1)
    numeric = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f().data)
        flat[i] = orig - eps
        down = float(f().data)
        flat[i] = orig
        numeric.append((up - down) / (2 * eps))
    return analytic, np.array(numeric)


def key_bias_split(bias_size: int):
    """Flat indices of the query/value and key thirds of a fused qkv bias.

    Shifting every key by the same vector adds a per-row constant to the
    attention scores, which softmax removes: the key bias has an identically
    zero gradient, so its relative error is pure rounding noise.
    """
    c = bias_size // 3
    idx = np.arange(bias_size)
    return np.concatenate([idx[:c], idx[2 * c:]]), idx[c:2 * c]


def gradcheck_with_key_bias(f, named_params, max_entries=None, seed=0):
    """Relative-error check over all parameters, key biases checked for exact zeros.

    Returns ``(worst relative error, worst |key-bias gradient|, worst |key-bias
    central difference|)``.
    """
    worst, zero_a, zero_n = 0.0, 0.0, 0.0
    rng = np.random.default_rng(seed)
    for name, t in named_params:
        if name.endswith("qkv.bias"):
            live, dead = key_bias_split(t.data.size)
            if max_entries is not None and live.size > max_entries:
                live = np.sort(rng.choice(live, max_entries, replace=False))
                dead = np.sort(rng.choice(dead, min(max_entries, dead.size), replace=False))
            a, n = central_differences(f, t, live)
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8))))
            a, n = central_differences(f, t, dead)
            zero_a, zero_n = max(zero_a, float(np.abs(a).max())), max(zero_n, float(np.abs(n).max()))
        else:
            worst = max(worst, finite_diff_check(f, [t], max_entries=max_entries, seed=seed))
    return worst, zero_a, zero_n


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one (number, title, passed, detail) entry per acceptance criterion, echoed after the run
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    print(line)
    ACCEPTANCE_RESULTS.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(
            f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title}" + (f" ({detail})" if detail else ""))
