"""Turn window-level velocity predictions into trajectories and score them.

A sequence is cut into back-to-back windows (stride = window length). Each
prediction is treated as the mean planar velocity over its window and
integrated with step ``L * dt``; the ground truth is sampled at the matching
window boundaries. Body-frame predictions are rotated back to the global
frame with the orientation at each window's middle sample, the same rotation
used to build body-frame labels.
"""

from __future__ import annotations

import numpy as np

from . import frames
from .data import ImuSequence, make_windows
from .metrics import Trajectory, ate, integrate_velocity, rte, rte_window_count
from .model import MambaIO


def ground_truth_track(seq: ImuSequence, L: int) -> tuple[np.ndarray, Trajectory]:
    """Window starts and the planar positions at the end of each window step."""
    n = (len(seq) - L) // L + 1
    starts = np.arange(n) * L
    ends = np.minimum(starts + L, len(seq) - 1)
    return starts, Trajectory(L * seq.dt, seq.pos[ends, :2])


def to_global(v: np.ndarray, seq: ImuSequence, starts: np.ndarray, L: int) -> np.ndarray:
    """Rotate planar body-frame velocities into the global frame (z assumed 0 in the body)."""
    R_b2g = frames.quat_to_rotation(seq.quat[starts + L // 2])
    lifted = np.concatenate([v, np.zeros((len(v), 1))], axis=1)
    return np.einsum("nij,nj->ni", R_b2g, lifted)[:, :2]


def predict_velocities(model: MambaIO, seq: ImuSequence, frame: str) -> tuple[np.ndarray, np.ndarray]:
    """Global-frame planar velocity per back-to-back window, and the window starts."""
    L = model.config.window_len
    windows = make_windows(seq, L, L, frame)
    v = model.predict(windows.x)[:, :2]
    if frame == "body":
        v = to_global(v, seq, windows.starts, L)
    return v, windows.starts


def predicted_trajectory(v: np.ndarray, seq: ImuSequence, L: int) -> Trajectory:
    return integrate_velocity(v, L * seq.dt, seq.pos[0, :2])


def evaluate_sequence(model: MambaIO, seq: ImuSequence, frame: str, window_s: float) -> dict:
    L = model.config.window_len
    v, starts = predict_velocities(model, seq, frame)
    _, gt = ground_truth_track(seq, L)
    est = predicted_trajectory(v, seq, L)
    return {"ate_m": ate(est, gt), "rte_m": rte(est, gt, window_s),
            "n_windows": rte_window_count(est, window_s), "est": est, "gt": gt}


def constant_velocity_ate(v_mean: np.ndarray, seq: ImuSequence, L: int) -> float:
    """ATE of a predictor that always outputs ``v_mean`` (global frame)."""
    starts, gt = ground_truth_track(seq, L)
    v = np.tile(np.asarray(v_mean, dtype=float)[:2], (len(starts), 1))
    return ate(predicted_trajectory(v, seq, L), gt)


def evaluate_dataset(model: MambaIO, seqs: list[ImuSequence], frame: str, window_s: float) -> dict:
    """Mean ATE/RTE over ``seqs`` plus the per-sequence values."""
    per = [evaluate_sequence(model, s, frame, window_s) for s in seqs]
    return {
        "ate_m": float(np.mean([p["ate_m"] for p in per])),
        "rte_m": float(np.mean([p["rte_m"] for p in per])),
        "window_s": window_s,
        "n_windows": int(sum(p["n_windows"] for p in per)),
        "per_sequence": [{"ate_m": p["ate_m"], "rte_m": p["rte_m"]} for p in per],
    }
