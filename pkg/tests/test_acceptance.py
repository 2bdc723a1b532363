"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two training criteria share one dataset and one global-frame model
(module fixtures); together they take roughly 40 minutes on one CPU core.
"""

from __future__ import annotations

import json
import struct
import time
import zlib

import numpy as np
import pytest

from conftest import (gradcheck_with_key_bias, record_criterion, scramble_params, tiny_config,
                      tiny_model_for_gradcheck)
from test_diffcore import CASES
from test_metrics import brute_force_ate, rot2
from test_ssm import causal_conv, random_lti, series_zoh
from mambaio import frames, mpc, pyramid, ssm
from mambaio.data import generate_dataset, generate_trajectory, make_dataset_windows, make_windows
from mambaio.diffcore import ParamStore, Tensor, finite_diff_check, ops
from mambaio.evaluation import constant_velocity_ate, evaluate_dataset
from mambaio.metrics import MetricError, Trajectory, ate, pca_explained_variance, rte
from mambaio.model import CHECKPOINT_MAGIC, ModelConfig, build, load_checkpoint, loss, save_checkpoint
from mambaio.trainer import TrainConfig, fit

# scaled synthetic experiment: 40 training walks (32 fit + 8 validation) and 10 test walks of 60 s
EXP_SEED, EXP_SEQS, EXP_DURATION = 0, 50, 60.0
EXP_CHANNELS, EXP_L = [16, 32, 64, 128], 200
EXP_TRAIN_STRIDE, EXP_BATCH, EXP_EPOCHS = 400, 32, 40
RTE_WINDOW_S = 10.0


# --- 1 ---------------------------------------------------------------------------------

def test_criterion_01_exact_reconstruction():
    rng = np.random.default_rng(1)
    windows = (rng.normal(size=(1000, 6, 200)) * rng.uniform(0.1, 20, (1000, 6, 1))).astype(np.float32)
    t0 = time.perf_counter()
    exact = 0
    for x in windows:
        bands = pyramid.decompose(x)
        exact += int(np.array_equal(bands.low + bands.high, x.astype(np.float64)))
    elapsed = time.perf_counter() - t0
    ok = exact == 1000 and elapsed < 5.0
    record_criterion(1, "low + high == x bitwise on 1000 float32 6x200 windows", ok,
                     f"{exact}/1000 exact, {elapsed:.2f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------------------

def test_criterion_02_zoh_against_series():
    rng = np.random.default_rng(2)
    n = 10_000
    # |delta * A| <= 2 keeps the 20-term series truncation far below the tolerance
    d = rng.uniform(1e-3, 1.0, n)
    a = -rng.uniform(0.0, 2.0, n) / np.maximum(d, 1.0)
    b = rng.normal(size=n)
    pair = ssm.zoh_discretize(a, b, d)
    worst = 0.0
    for i in range(n):
        A_ref, B_ref = series_zoh(a[i], d[i], b[i])
        worst = max(worst, abs(pair.A_bar[i] - A_ref) / abs(A_ref), abs(pair.B_bar[i] - B_ref) / abs(B_ref))
    limit = ssm.zoh_discretize(np.zeros(5), b[:5], d[:5])
    limit_ok = np.array_equal(limit.B_bar, d[:5] * b[:5]) and np.all(limit.A_bar == 1.0)
    ok = worst < 1e-10 and limit_ok
    record_criterion(2, "ZOH discretization vs 20-term series over 1e4 cases, A->0 limit", ok,
                     f"max rel err {worst:.2e}, limit {'ok' if limit_ok else 'wrong'}")
    assert ok


# --- 3 ---------------------------------------------------------------------------------

def test_criterion_03_recurrence_kernel_duality():
    worst = 0.0
    for S in (8, 32, 64):
        for seed in range(100):
            rng = np.random.default_rng([S, seed])
            A_bar, B_bar, C = random_lti(rng, 4, 2)
            x = rng.normal(size=(S, 2))
            K = ssm.ssm_kernel(A_bar, B_bar, C, S).K_bar
            worst = max(worst, float(np.abs(ssm.scan(A_bar, B_bar, C, x) - causal_conv(K, x)).max()))
    ok = worst < 1e-6
    record_criterion(3, "scan == causal convolution with K_bar, S in {8,32,64} x 100 seeds", ok,
                     f"max |diff| {worst:.2e}")
    assert ok


# --- 4 ---------------------------------------------------------------------------------

def _extra_smooth_cases(rng):
    """Shape and reduction ops not covered by the per-op table."""
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
    w_mean, w_t, w_cat = rng.normal(size=(2, 4)), rng.normal(size=(4, 3, 2)), rng.normal(size=(2, 5, 4))
    return {
        "neg/scale": (lambda: ops.sum(ops.mul(ops.scale(ops.neg(x), 1.7), x)), [x]),
        "mean": (lambda: ops.sum(ops.mul(ops.mean(ops.exp(x), axis=1), w_mean)), [x]),
        "reshape/transpose": (lambda: ops.sum(ops.mul(
            ops.transpose(ops.reshape(ops.exp(x), (2, 3, 4)), (2, 1, 0)), w_t)), [x]),
        "concat": (lambda: ops.sum(ops.mul(ops.concat([ops.exp(x), y], axis=1), w_cat)), [x, y]),
    }


def test_criterion_04_gradient_integrity():
    t0 = time.perf_counter()
    smooth = {}
    for name in sorted(CASES):
        f, leaves = CASES[name](np.random.default_rng(zlib.crc32(name.encode())))
        smooth[name] = finite_diff_check(f, leaves)
    for name, (f, leaves) in _extra_smooth_cases(np.random.default_rng(4)).items():
        smooth[name] = finite_diff_check(f, leaves)

    rng = np.random.default_rng(40)
    modules = {}
    x = Tensor(rng.normal(size=(2, 6, 16)), requires_grad=True)
    wl, wh = rng.normal(size=(2, 2, 6, 16))
    modules["pyramid split"] = finite_diff_check(
        lambda: ops.add(*(ops.sum(ops.mul(b, w)) for b, w in zip(pyramid.split_tensor(x, depth=2), (wl, wh)))), [x])

    leaves = [Tensor(a, requires_grad=True) for a in (
        rng.normal(size=(2, 7, 3)), rng.uniform(0.1, 1.0, (2, 7, 3)), -rng.uniform(0.2, 2, (3, 4)),
        rng.normal(size=(2, 7, 4)), rng.normal(size=(2, 7, 4)))]
    w = rng.normal(size=(2, 7, 3))
    modules["selective scan op"] = finite_diff_check(
        lambda: ops.sum(ops.mul(ssm.selective_scan_op(*leaves), w)), leaves)

    store = ParamStore(np.float64)
    mp = mpc.MpcBlockParams.create(store, "m", 6, rng, 3)
    scramble_params(store, rng)
    xm = Tensor(rng.normal(size=(1, 6, 16)), requires_grad=True)
    wm = rng.normal(size=(1, 6, 16))
    modules["MPC block"] = finite_diff_check(lambda: ops.sum(ops.mul(mpc.mpc_forward(xm, mp), wm)), list(store) + [xm])

    store = ParamStore(np.float64)
    bp = ssm.MambaBlockParams.create(store, "b", 8, 4, rng)
    scramble_params(store, rng)
    xb = Tensor(rng.normal(size=(1, 16, 8)), requires_grad=True)
    wb = rng.normal(size=(1, 16, 8))
    modules["Mamba block"] = finite_diff_check(lambda: ops.sum(ops.mul(ssm.mamba_block(xb, bp), wb)),
                                               list(store) + [xb])

    store = ParamStore(np.float64)
    ap = ssm.AttentionParams.create(store, "a", 8, 4, rng)
    scramble_params(store, rng)
    xa = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    wa = rng.normal(size=(2, 5, 8))
    att, key_a1, key_n1 = gradcheck_with_key_bias(lambda: ops.sum(ops.mul(ssm.attention_block(xa, ap), wa)),
                                                  list(store.items()) + [("x", xa)])
    modules["attention block"] = att

    model = tiny_model_for_gradcheck(0)
    xt, yt = rng.normal(size=(1, 6, 16)), rng.normal(size=(1, 2))
    full, key_a2, key_n2 = gradcheck_with_key_bias(lambda: loss(model.forward(xt), yt), model.params.items(),
                                                   max_entries=2)
    modules["tiny model"] = full
    elapsed = time.perf_counter() - t0

    worst_smooth = max(smooth.values())
    worst_module = max(modules.values())
    key_ok = max(key_a1, key_a2) < 1e-12 and max(key_n1, key_n2) < 1e-8
    ok = worst_smooth < 1e-6 and worst_module < 1e-4 and key_ok and elapsed < 120
    record_criterion(4, "finite-difference gradient checks (ops < 1e-6, modules and tiny model < 1e-4)", ok,
                     f"ops {worst_smooth:.1e}, modules {worst_module:.1e}, {elapsed:.0f}s")
    assert ok, {"smooth": smooth, "modules": modules, "key": (key_a1, key_n1, key_a2, key_n2)}


# --- 5 ---------------------------------------------------------------------------------

def test_criterion_05_frame_coherence():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(1000, 4))
    R = frames.quat_to_rotation(q / np.linalg.norm(q, axis=1, keepdims=True))
    gyro, accel = rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3)) * 10
    g2, a2 = frames.rotate_imu(gyro, accel, R)
    g3, a3 = frames.rotate_imu(g2, a2, np.swapaxes(R, -1, -2))
    round_trip = max(np.abs(g3 - gyro).max(), np.abs(a3 - accel).max())

    seq, truth = generate_trajectory(5, 20.0, return_truth=True)
    glob = seq.to_frame("global")
    gen_err = np.abs(glob.accel - (truth.accel_global + frames.GRAVITY)).max()
    back = glob.to_frame("body")
    seq_rt = max(np.abs(back.gyro - seq.gyro).max(), np.abs(back.accel - seq.accel).max())
    wg = make_windows(seq, 200, 100, "global")
    wb = make_windows(seq, 200, 100, "body")
    R_mid = frames.quat_to_rotation(seq.quat[wb.starts + 100])
    # the body label drops the body-z component, so compare against the relabel of the global label
    relabelled = frames.relabel_velocity(frames.VelocityLabel(wg.y, "global"), np.swapaxes(R_mid, -1, -2)).v
    label_err = np.abs(relabelled - wb.y).max()
    ok = round_trip < 1e-12 and seq_rt < 1e-12 and gen_err < 1e-9 and label_err < 1e-12
    record_criterion(5, "frame round trips < 1e-12, generator/transform consistency < 1e-9", ok,
                     f"round trip {max(round_trip, seq_rt):.1e}, generator {gen_err:.1e}, labels {label_err:.1e}")
    assert ok


# --- 6 ---------------------------------------------------------------------------------

def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    invariance = 0.0
    for _ in range(100):
        gt = rng.normal(size=(30, 2)).cumsum(0)
        est = gt + rng.normal(size=(30, 2)) * 0.3
        moved = est @ rot2(rng.uniform(-np.pi, np.pi)).T + rng.uniform(-100, 100, 2)
        invariance = max(invariance, abs(ate(Trajectory(1.0, moved), Trajectory(1.0, gt))
                                         - ate(Trajectory(1.0, est), Trajectory(1.0, gt))))
        invariance = max(invariance, ate(Trajectory(1.0, gt @ rot2(0.3).T + 5), Trajectory(1.0, gt)))
    gt3 = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    est3 = np.array([[0.1, -0.2], [1.3, 0.1], [0.8, 1.4]])
    three = abs(ate(Trajectory(1.0, est3), Trajectory(1.0, gt3)) - brute_force_ate(est3, gt3, 200_000))
    dt, T, d = 0.5, 400, 0.02
    t = dt * np.arange(T)
    gt_line = np.column_stack([t, np.zeros(T)])
    drift = abs(rte(Trajectory(dt, gt_line + np.column_stack([np.zeros(T), d * t])), Trajectory(dt, gt_line), 60.0)
                - d * 60.0)
    ok = invariance < 1e-9 and three < 1e-6 and drift < 1e-9
    record_criterion(6, "ATE rigid invariance, 3-point grid oracle, linear-drift RTE", ok,
                     f"invariance {invariance:.1e}, 3-point {three:.1e}, drift {drift:.1e}")
    assert ok


# --- 7, 8, 9 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiment_data():
    seqs = generate_dataset(EXP_SEED, EXP_SEQS, EXP_DURATION)
    return seqs[:32], seqs[32:40], seqs[40:]


def _train(frame, experiment_data):
    fit_seqs, val_seqs, test_seqs = experiment_data
    train = make_dataset_windows(fit_seqs, EXP_L, EXP_TRAIN_STRIDE, frame)
    val = make_dataset_windows(val_seqs, EXP_L, EXP_L, frame)
    model = build(ModelConfig(stage_channels=EXP_CHANNELS, window_len=EXP_L), seed=0)
    t0 = time.perf_counter()
    result = fit(model, train, val, TrainConfig(batch_size=EXP_BATCH, max_epochs=EXP_EPOCHS, seed=0))
    elapsed = time.perf_counter() - t0
    report = evaluate_dataset(model, test_seqs, frame, RTE_WINDOW_S)
    return {"model": model, "result": result, "elapsed": elapsed, "report": report}


@pytest.fixture(scope="module")
def global_run(experiment_data):
    return _train("global", experiment_data)


def test_criterion_07_synthetic_end_to_end(global_run, experiment_data):
    fit_seqs, _, test_seqs = experiment_data
    res = global_run["result"]
    first = res.history[0].val_loss
    final = res.best_val
    v_mean = make_dataset_windows(fit_seqs, EXP_L, EXP_TRAIN_STRIDE, "global").y.mean(axis=0)
    baseline = float(np.mean([constant_velocity_ate(v_mean, s, EXP_L) for s in test_seqs]))
    model_ate = global_run["report"]["ate_m"]
    elapsed = global_run["elapsed"]
    ok = final < 0.5 * first and model_ate <= 0.7 * baseline and elapsed < 30 * 60
    record_criterion(7, "synthetic training: val MSE < 0.5 x epoch 1, ATE >= 30% below constant velocity", ok,
                     f"val {first:.4f} -> {final:.4f}, ATE {model_ate:.3f} m vs {baseline:.3f} m, "
                     f"{len(res.history)} epochs in {elapsed / 60:.1f} min")
    assert ok


def test_criterion_08_global_frame_not_worse(global_run, experiment_data):
    body_run = _train("body", experiment_data)
    g, b = global_run["report"]["ate_m"], body_run["report"]["ate_m"]
    ok = g <= b
    record_criterion(8, "global-frame windows reach test ATE <= body-frame windows", ok,
                     f"global {g:.3f} m, body {b:.3f} m")
    assert ok


def test_criterion_09_pca_on_latents(global_run, experiment_data):
    _, _, test_seqs = experiment_data
    windows = make_dataset_windows(test_seqs, EXP_L, EXP_L, "global")
    feats = global_run["model"].features(windows.x)
    ev = pca_explained_variance(feats, k=50)
    full = pca_explained_variance(feats, k=min(feats.shape))
    invariants = (len(ev.ratios) == 50 and np.all(ev.ratios >= 0) and np.all(np.diff(ev.ratios) <= 1e-15)
                  and np.all(np.diff(ev.cumulative) >= -1e-15) and ev.cumulative[-1] <= 1 + 1e-12
                  and np.allclose(ev.cumulative, np.cumsum(ev.ratios), rtol=1e-12)
                  and abs(full.cumulative[-1] - 1.0) < 1e-9)
    truncation = np.array_equal(ev.ratios, full.ratios[:50]) and np.array_equal(ev.cumulative, full.cumulative[:50])
    try:
        pca_explained_variance(feats[:20], k=50)
        rejects = False
    except MetricError:
        rejects = True
    ok = bool(invariants and truncation and rejects)
    record_criterion(9, "PCA explained variance on model latents, k=50 contract", ok,
                     f"{feats.shape[0]}x{feats.shape[1]} features, top-50 cumulative {ev.cumulative[-1]:.4f}")
    assert ok


# --- 10 --------------------------------------------------------------------------------

def test_criterion_10_determinism_and_checkpoints(tmp_path):
    rng = np.random.default_rng(10)
    seqs = generate_dataset(10, 3, 4.0)
    cfg = tiny_config(window_len=200, precision="float32")
    train = make_dataset_windows(seqs[:2], 200, 50, "global")
    val = make_dataset_windows(seqs[2:], 200, 200, "global")
    models = []
    for _ in range(2):
        m = build(cfg, 7)
        fit(m, train, val, TrainConfig(max_epochs=2, batch_size=8, seed=7))
        models.append(m)
    same_training = all(t.data.tobytes() == models[1].params[n].data.tobytes() for n, t in models[0].params.items())

    path, again = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(path, models[0], {"seed": 7})
    loaded, _ = load_checkpoint(path)
    save_checkpoint(again, loaded, {"seed": 7})
    x = rng.normal(size=(4, 6, 200)).astype(np.float32)
    round_trip = (path.read_bytes() == again.read_bytes()
                  and loaded.predict(x).tobytes() == models[0].predict(x).tobytes())
    # portable layout: explicit little-endian header and float32 blobs, decodable without numpy
    raw = path.read_bytes()
    _, n = struct.unpack_from("<IQ", raw, 4)
    header = json.loads(raw[16:16 + n])
    portable = raw[:4] == CHECKPOINT_MAGIC
    for entry in header["params"]:
        blob = raw[16 + n + entry["offset"]:16 + n + entry["offset"] + entry["nbytes"]]
        decoded = np.array(struct.unpack(f"<{entry['nbytes'] // 4}f", blob), dtype=np.float32)
        portable &= np.array_equal(decoded, models[0].params[entry["name"]].data.reshape(-1))
    ok = bool(same_training and round_trip and portable)
    record_criterion(10, "bit-identical same-seed training and checkpoint round trip", ok,
                     f"training {'same' if same_training else 'differs'}, checkpoint "
                     f"{'exact' if round_trip else 'differs'}, layout {'portable' if portable else 'broken'}")
    assert ok


# --- 11 --------------------------------------------------------------------------------

def _median_scan_time(S, runs=100):
    rng = np.random.default_rng(S)
    N, D, H = 1, 16, 16
    args = (rng.normal(size=(N, S, D)), rng.uniform(0.01, 0.5, (N, S, D)), -rng.uniform(0.1, 2, (D, H)),
            rng.normal(size=(N, S, H)), rng.normal(size=(N, S, H)))
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        ssm.selective_scan_op(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def test_criterion_11_linear_time_scan():
    _median_scan_time(64, runs=5)  # warm-up
    t512, t1024 = _median_scan_time(512), _median_scan_time(1024)
    ratio = t1024 / t512
    ok = ratio <= 2.5
    record_criterion(11, "selective scan time ratio S=1024 vs S=512 <= 2.5", ok,
                     f"{t512 * 1e3:.2f} ms -> {t1024 * 1e3:.2f} ms, ratio {ratio:.2f}")
    assert ok
