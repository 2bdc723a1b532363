"""Trajectory reconstruction, ATE/RTE, and PCA explained variance."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MetricError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    dt: float
    positions: np.ndarray  # (T, 2) or (T, 3)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[0] < 2 or pos.shape[1] not in (2, 3):
            raise MetricError(f"trajectory needs shape (T>=2, 2|3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise MetricError("trajectory has non-finite positions")
        if not self.dt > 0:
            raise MetricError("dt must be positive")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt


@dataclass(frozen=True)
class ExplainedVariance:
    ratios: np.ndarray
    cumulative: np.ndarray


def integrate_velocity(v_seq: np.ndarray, dt: float, p0=None) -> Trajectory:
    """Rectangle rule: ``positions[t] = p0 + dt * sum_{i <= t} v_i``."""
    v = np.asarray(v_seq, dtype=float)
    if v.ndim != 2 or v.shape[1] not in (2, 3):
        raise MetricError(f"velocities need shape (T, 2|3), got {v.shape}")
    if not dt > 0:
        raise MetricError("dt must be positive")
    if not np.all(np.isfinite(v)):
        raise MetricError("non-finite velocity")
    p0 = np.zeros(v.shape[1]) if p0 is None else np.asarray(p0, dtype=float)
    return Trajectory(dt, p0 + dt * np.cumsum(v, axis=0))


def rigid_align(est: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``(R, t)`` with ``R @ est_i + t ~ gt_i`` (Kabsch, no scale)."""
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    E, G = est - mu_e, gt - mu_g
    if not np.any(E) or not np.any(G):
        return np.eye(est.shape[1]), mu_g - mu_e
    U, _, Vt = np.linalg.svd(G.T @ E)
    D = np.eye(est.shape[1])
    D[-1, -1] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    return R, mu_g - R @ mu_e


def _check_pair(est: Trajectory, gt: Trajectory) -> None:
    if len(est) != len(gt) or est.positions.shape[1] != gt.positions.shape[1]:
        raise MetricError(f"trajectory shapes differ: {est.positions.shape} vs {gt.positions.shape}")
    if not math.isclose(est.dt, gt.dt, rel_tol=1e-9):
        raise MetricError(f"trajectory dt differs: {est.dt} vs {gt.dt}")


def ate(est: Trajectory, gt: Trajectory) -> float:
    """RMSE after rigid alignment of ``est`` onto ``gt``."""
    _check_pair(est, gt)
    R, t = rigid_align(est.positions, gt.positions)
    aligned = est.positions @ R.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - gt.positions) ** 2, axis=1))))


def rte_window_count(traj: Trajectory, window_s: float) -> int:
    w = int(round(window_s / traj.dt))
    return len(traj) - w


def rte(est: Trajectory, gt: Trajectory, window_s: float = 60.0) -> float:
    """RMSE of the endpoint error over every sliding window of ``window_s`` seconds.

    Each window is shifted so both sub-trajectories start at the same point;
    the error is then just the difference of their displacements.
    """
    _check_pair(est, gt)
    if not window_s > 0:
        raise MetricError("window_s must be positive")
    w = int(round(window_s / est.dt))
    if w < 1 or w > len(est) - 1:
        raise MetricError(f"window of {window_s}s does not fit a {est.duration}s trajectory")
    d_est = est.positions[w:] - est.positions[:-w]
    d_gt = gt.positions[w:] - gt.positions[:-w]
    return float(np.sqrt(np.mean(np.sum((d_est - d_gt) ** 2, axis=1))))


def metric_report(est: Trajectory, gt: Trajectory, window_s: float) -> dict:
    return {
        "ate_m": ate(est, gt),
        "rte_m": rte(est, gt, window_s),
        "window_s": window_s,
        "n_windows": rte_window_count(est, window_s),
    }


def write_report(report: dict, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def pca_explained_variance(features: np.ndarray, k: int = 50) -> ExplainedVariance:
    """Variance share of the top ``k`` principal components of ``features (M, F)``."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise MetricError(f"need an (M>=2, F) matrix, got shape {X.shape}")
    if not 1 <= k <= min(X.shape):
        raise MetricError(f"k={k} must lie in [1, min(M, F) = {min(X.shape)}]")
    Xc = X - X.mean(axis=0)
    s = np.linalg.svd(Xc, compute_uv=False)
    power = s ** 2
    total = power.sum()
    # centering identical rows leaves only rounding residue (~1e-16 relative)
    if total <= X.size * (1e-12 * np.abs(X).max()) ** 2:
        raise DegenerateInputError("all rows are identical; no variance to explain")
    ratios = power / total
    return ExplainedVariance(ratios[:k], np.cumsum(ratios)[:k])
