"""Body/global frame conversions for IMU samples and velocity labels.

Conventions: the accelerometer reports specific force including gravity, so a
level device at rest reads ``+g`` on z. ``R_b2g`` rotates body vectors into the
gravity-aligned global frame, ``R_g2b = R_b2g.T`` goes back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAVITY = np.array([0.0, 0.0, 9.81])
ORTHO_TOL = 1e-9


class InvalidRotationError(ValueError):
    pass


class DegenerateOrientationError(ValueError):
    pass


class WrongFrameError(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: np.ndarray
    accel: np.ndarray
    frame: str = "body"


@dataclass(frozen=True)
class VelocityLabel:
    v: np.ndarray
    frame: str


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise InvalidRotationError(f"expected (..., 3, 3), got {R.shape}")
    eye_err = np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3)).max()
    det_err = np.abs(np.linalg.det(R) - 1.0).max()
    if not (eye_err <= tol and det_err <= tol):
        raise InvalidRotationError(
            f"not a proper rotation: |RR^T - I| = {eye_err:.3g}, |det - 1| = {det_err:.3g}")
    return R


def _rotate(R: np.ndarray, v: np.ndarray) -> np.ndarray:
    # works for single vectors and for stacks (..., 3, 3) x (..., 3)
    return np.einsum("...ij,...j->...i", R, v)


def body_to_global(s: ImuSample, R_b2g: np.ndarray) -> ImuSample:
    if s.frame != "body":
        raise WrongFrameError(f"expected a body-frame sample, got {s.frame}")
    R = check_rotation(R_b2g)
    return ImuSample(s.t, _rotate(R, s.omega), _rotate(R, s.accel), "global")


def global_to_body(s: ImuSample, R_g2b: np.ndarray) -> ImuSample:
    if s.frame != "global":
        raise WrongFrameError(f"expected a global-frame sample, got {s.frame}")
    R = check_rotation(R_g2b)
    return ImuSample(s.t, _rotate(R, s.omega), _rotate(R, s.accel), "body")


def rotate_imu(gyro: np.ndarray, accel: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized conversion for whole sequences: ``(T, 3)`` arrays, ``(T, 3, 3)`` rotations."""
    R = check_rotation(R)
    return _rotate(R, gyro), _rotate(R, accel)


def relabel_velocity(v: VelocityLabel, R_g2b: np.ndarray) -> VelocityLabel:
    """Express a global-frame velocity in the body frame.

    A planar ``[vx, vy]`` label is lifted to ``[vx, vy, 0]``, rotated, and
    truncated back to two components.
    """
    if v.frame != "global":
        raise WrongFrameError(f"expected a global-frame label, got {v.frame}")
    R = check_rotation(R_g2b)
    vec = np.asarray(v.v, dtype=float)
    dim = vec.shape[-1]
    if dim == 2:
        vec = np.concatenate([vec, np.zeros(vec.shape[:-1] + (1,))], axis=-1)
    elif dim != 3:
        raise ValueError(f"velocity must have 2 or 3 components, got {dim}")
    return VelocityLabel(_rotate(R, vec)[..., :dim], "body")


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion ``[w, x, y, z]`` (or a stack of them) to rotation matrices."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateOrientationError("zero quaternion has no orientation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_euler_zyx(yaw, pitch, roll) -> np.ndarray:
    """``q = qz(yaw) * qy(pitch) * qx(roll)``, i.e. ``R = Rz Ry Rx``."""
    yaw, pitch, roll = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (yaw, pitch, roll)))
    zeros = np.zeros_like(yaw)
    qz = np.stack([np.cos(yaw / 2), zeros, zeros, np.sin(yaw / 2)], axis=-1)
    qy = np.stack([np.cos(pitch / 2), zeros, np.sin(pitch / 2), zeros], axis=-1)
    qx = np.stack([np.cos(roll / 2), np.sin(roll / 2), zeros, zeros], axis=-1)
    return quat_multiply(quat_multiply(qz, qy), qx)


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
