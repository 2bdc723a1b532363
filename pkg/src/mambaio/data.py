"""Sequence format, windowing, and a synthetic pedestrian IMU generator.

A sequence lives in one directory: ``meta.json`` (sample rate, frame, units)
and ``data.csv`` with columns ``t,gx,gy,gz,ax,ay,az,qw,qx,qy,qz,px,py,pz``.
Gyro/accel are in the frame named by ``meta.json`` (``body`` for raw
recordings); the quaternion always maps body to global and positions are
always global.

The generator builds a walk whose position, velocity and acceleration are all
known in closed form (apart from the base path, which is integrated with
per-sample Gauss-Legendre quadrature), so the emitted accelerometer signal is
the exact second derivative of the emitted positions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import frames
from .diffcore.ops import ConfigError

CSV_HEADER = ["t", "gx", "gy", "gz", "ax", "ay", "az", "qw", "qx", "qy", "qz", "px", "py", "pz"]
FRAMES = ("body", "global")


class DataFormatError(ValueError):
    """A sequence file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SequenceValidationError(ValueError):
    """Parsed values violate the sequence invariants."""


class WindowError(ValueError):
    """A sequence is too short for the requested window."""


@dataclass
class ImuSequence:
    sample_rate: float
    t: np.ndarray       # (T,)
    gyro: np.ndarray    # (T, 3) rad/s
    accel: np.ndarray   # (T, 3) m/s^2, gravity included
    quat: np.ndarray    # (T, 4) wxyz, body -> global
    pos: np.ndarray     # (T, 3) global, m
    frame: str = "body"

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def rotations(self) -> np.ndarray:
        """Body-to-global rotation per sample, ``(T, 3, 3)``."""
        return frames.quat_to_rotation(self.quat)

    def validate(self) -> None:
        T = len(self.t)
        if self.frame not in FRAMES:
            raise SequenceValidationError(f"unknown frame {self.frame!r}")
        if not self.sample_rate > 0:
            raise SequenceValidationError("sample_rate must be positive")
        for name, arr, width in (("gyro", self.gyro, 3), ("accel", self.accel, 3),
                                 ("quat", self.quat, 4), ("pos", self.pos, 3)):
            if arr.shape != (T, width):
                raise SequenceValidationError(f"{name} has shape {arr.shape}, expected ({T}, {width})")
        if T < 2:
            raise SequenceValidationError("a sequence needs at least two samples")
        if not all(np.all(np.isfinite(a)) for a in (self.t, self.gyro, self.accel, self.quat, self.pos)):
            raise SequenceValidationError("sequence contains non-finite values")
        steps = np.diff(self.t)
        if np.any(steps <= 0):
            bad = int(np.argmax(steps <= 0)) + 1
            raise SequenceValidationError(f"time is not strictly increasing at sample {bad}")
        if np.max(np.abs(steps - self.dt)) > 1e-6 * self.dt:
            raise SequenceValidationError("time stamps are not uniform at the declared sample rate")
        norm_err = np.abs(np.linalg.norm(self.quat, axis=1) - 1.0)
        if norm_err.max() > 1e-6:
            raise SequenceValidationError(f"quaternion not unit-norm at sample {int(norm_err.argmax())}")

    def to_frame(self, frame: str) -> "ImuSequence":
        """The same recording with gyro/accel expressed in ``frame``."""
        if frame not in FRAMES:
            raise ConfigError(f"unknown frame {frame!r}")
        if frame == self.frame:
            return self
        R = self.rotations()
        if frame == "body":
            R = np.swapaxes(R, -1, -2)
        gyro, accel = frames.rotate_imu(self.gyro, self.accel, R)
        return ImuSequence(self.sample_rate, self.t.copy(), gyro, accel, self.quat.copy(),
                           self.pos.copy(), frame)


# --- file format ------------------------------------------------------------------

def save_sequence(seq: ImuSequence, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "mambaio-sequence",
        "version": 1,
        "sample_rate": seq.sample_rate,
        "frame": seq.frame,
        "n_samples": len(seq),
        "axes": "gyro/accel in `frame`; quaternion wxyz body->global; positions global, z up",
        "units": {"t": "s", "gyro": "rad/s", "accel": "m/s^2", "pos": "m"},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    table = np.column_stack([seq.t, seq.gyro, seq.accel, seq.quat, seq.pos])
    with open(path / "data.csv", "w", newline="") as f:
        f.write(",".join(CSV_HEADER) + "\n")
        for row in table:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def load_sequence(path) -> ImuSequence:
    path = Path(path)
    meta_path, data_path = path / "meta.json", path / "data.csv"
    if not meta_path.is_file() or not data_path.is_file():
        raise FileNotFoundError(f"{path} is not a sequence directory (needs meta.json and data.csv)")
    try:
        meta = json.loads(meta_path.read_text())
        rate = float(meta["sample_rate"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{meta_path}: {exc}") from exc
    rows = []
    with open(data_path, newline="") as f:
        text = f.read()
    if text and not text.endswith("\n"):
        # writers always terminate the last row; a missing newline means a cut-off file
        raise DataFormatError("file is truncated (last row has no line terminator)",
                              line=text.count("\n") + 1)
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise DataFormatError(f"expected header {','.join(CSV_HEADER)}", line=1)
    for record in reader:
        line = reader.line_num
        if not record:
            continue
        if len(record) != len(CSV_HEADER):
            raise DataFormatError(f"expected {len(CSV_HEADER)} fields, got {len(record)}", line=line)
        try:
            rows.append([float(v) for v in record])
        except ValueError as exc:
            raise DataFormatError(str(exc), line=line) from exc
    if not rows:
        raise DataFormatError("no samples", line=2)
    table = np.array(rows)
    seq = ImuSequence(rate, table[:, 0], table[:, 1:4], table[:, 4:7], table[:, 7:11], table[:, 11:14],
                      meta.get("frame", "body"))
    seq.validate()
    return seq


def load_dataset(root) -> list[ImuSequence]:
    """Every sequence directory directly under ``root``, in name order."""
    root = Path(root)
    if (root / "data.csv").is_file():
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if (p / "data.csv").is_file())
    if not dirs:
        raise FileNotFoundError(f"no sequence directories under {root}")
    return [load_sequence(d) for d in dirs]


def save_dataset(seqs: list[ImuSequence], root) -> None:
    root = Path(root)
    for i, seq in enumerate(seqs):
        save_sequence(seq, root / f"seq_{i:03d}")


# --- windowing ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingWindow:
    x: np.ndarray      # (6, L): gyro rows then accel rows
    label: np.ndarray  # (2,) mean planar velocity, m/s
    frame: str
    start: int


@dataclass
class WindowSet:
    """Windows stacked into arrays; indexing yields :class:`TrainingWindow`."""

    x: np.ndarray       # (N, 6, L)
    y: np.ndarray       # (N, 2)
    starts: np.ndarray  # (N,) first sample index
    frame: str
    seq_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        if self.seq_index.size == 0:
            self.seq_index = np.zeros(len(self.x), dtype=int)

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> TrainingWindow:
        return TrainingWindow(self.x[i], self.y[i], self.frame, int(self.starts[i]))

    @staticmethod
    def concat(sets: list["WindowSet"]) -> "WindowSet":
        if not sets:
            raise WindowError("no windows to concatenate")
        return WindowSet(
            np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets]),
            np.concatenate([s.starts for s in sets]), sets[0].frame,
            np.concatenate([np.full(len(s), i) for i, s in enumerate(sets)]))


def window_starts(T: int, L: int, stride: int, cover_tail: bool = False) -> np.ndarray:
    """``floor((T - L) / stride) + 1`` starts; ``cover_tail`` adds one ending at ``T``."""
    if L < 2:
        raise WindowError("window length must be at least 2")
    if stride < 1:
        raise WindowError("stride must be positive")
    if T < L:
        raise WindowError(f"sequence of {T} samples is shorter than the window ({L})")
    starts = np.arange(0, T - L + 1, stride)
    if cover_tail and starts[-1] != T - L:
        starts = np.append(starts, T - L)
    return starts


def make_windows(seq: ImuSequence, L: int, stride: int, frame: str = "global",
                 cover_tail: bool = False) -> WindowSet:
    """Cut ``seq`` into ``(6, L)`` windows labelled with the mean planar velocity.

    The label is ``(pos[end] - pos[start]) / ((L - 1) dt)`` in the global
    frame. For ``frame="body"`` the inputs stay as measured and the label is
    rotated into the body frame of the window's middle sample.
    """
    if frame not in FRAMES:
        raise ConfigError(f"unknown frame {frame!r}")
    starts = window_starts(len(seq), L, stride, cover_tail)
    src = seq.to_frame(frame)
    imu = np.concatenate([src.gyro, src.accel], axis=1).T  # (6, T)
    idx = starts[:, None] + np.arange(L)[None, :]
    x = np.ascontiguousarray(imu[:, idx].transpose(1, 0, 2))
    v = (seq.pos[starts + L - 1, :2] - seq.pos[starts, :2]) / ((L - 1) * seq.dt)
    if frame == "body":
        R_g2b = np.swapaxes(frames.quat_to_rotation(seq.quat[starts + L // 2]), -1, -2)
        v = frames.relabel_velocity(frames.VelocityLabel(v, "global"), R_g2b).v
    if not np.all(np.isfinite(v)):
        raise WindowError("non-finite label")
    return WindowSet(x, v, starts, frame)


def make_dataset_windows(seqs: list[ImuSequence], L: int, stride: int, frame: str = "global") -> WindowSet:
    return WindowSet.concat([make_windows(s, L, stride, frame) for s in seqs])


# --- synthetic generator --------------------------------------------------------------

@dataclass
class GeneratorParams:
    """Knobs of the synthetic walk. Amplitudes of gait terms are in metres."""

    sample_rate: float = 200.0
    window_len: int = 200
    speed_range: tuple[float, float] = (0.8, 1.6)
    speed_variation: float = 0.1       # relative amplitude of slow speed change
    speed_period_range: tuple[float, float] = (8.0, 20.0)
    turn_rate_max: float = 0.5         # rad/s
    segment_range: tuple[float, float] = (3.0, 8.0)
    turn_transition: float = 1.0       # s, raised-cosine blend between turn rates
    # cadence and step amplitudes grow with walking speed, as for real walkers
    gait_freq_base: float = 1.0        # Hz at zero speed
    gait_freq_per_speed: float = 0.6   # Hz per m/s
    gait_freq_jitter: float = 0.05     # Hz, per-sequence uniform jitter
    gait_forward_amp: float = 0.03     # m per m/s
    gait_lateral_amp: float = 0.02     # m per m/s
    gait_vertical_amp: float = 0.03    # m per m/s
    device_yaw_offset_max: float = math.pi  # fixed device-vs-heading yaw, drawn per sequence
    device_yaw_swing: float = 0.15     # rad, at half the gait frequency
    device_tilt_offset_max: float = 0.3  # rad, constant pitch/roll of the held device
    device_tilt_amp: float = 0.05      # rad, pitch/roll oscillation amplitude
    gyro_noise: float = 0.0
    accel_noise: float = 0.0

    def validate(self) -> None:
        def pair(name, lo_min=0.0):
            lo, hi = getattr(self, name)
            if not (lo_min <= lo <= hi) or not np.isfinite(hi):
                raise ConfigError(f"{name} must satisfy {lo_min} <= low <= high, got {(lo, hi)}")

        if not self.sample_rate > 0:
            raise ConfigError("sample_rate must be positive")
        if self.window_len < 2:
            raise ConfigError("window_len must be at least 2")
        pair("speed_range")
        if self.segment_range[0] <= 0 or self.speed_period_range[0] <= 0:
            raise ConfigError("segment and speed periods must be positive")
        pair("segment_range")
        pair("speed_period_range")
        if not 0 <= self.speed_variation < 1:
            raise ConfigError("speed_variation must lie in [0, 1)")
        if self.turn_transition <= 0 or self.turn_transition > self.segment_range[0]:
            raise ConfigError("turn_transition must be positive and not exceed the shortest segment")
        if self.gait_freq_base - self.gait_freq_jitter <= 0:
            raise ConfigError("gait frequency must stay positive")
        nonneg = ("turn_rate_max", "gait_freq_per_speed", "gait_freq_jitter", "gait_forward_amp",
                  "gait_lateral_amp", "gait_vertical_amp", "device_yaw_offset_max", "device_yaw_swing",
                  "device_tilt_offset_max", "device_tilt_amp", "gyro_noise", "accel_noise")
        for name in nonneg:
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator parameters: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            p = cls(**kwargs)
            p.validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return p


@dataclass
class WalkTruth:
    """Noise-free ground truth kept alongside a generated sequence."""

    accel_global: np.ndarray   # (T, 3) true acceleration, gravity excluded
    vel_global: np.ndarray     # (T, 3)
    omega_body: np.ndarray     # (T, 3)


def _ramp_integral(u: np.ndarray) -> np.ndarray:
    # integral of the raised-cosine step S(u) = (1 - cos(pi u)) / 2 clipped to [0, 1]
    inside = 0.5 * (u - np.sin(np.pi * u) / np.pi)
    return np.where(u <= 0, 0.0, np.where(u >= 1, u - 0.5, inside))


def _ramp(u: np.ndarray) -> np.ndarray:
    return np.where(u <= 0, 0.0, np.where(u >= 1, 1.0, 0.5 * (1 - np.cos(np.pi * u))))


def _ramp_slope(u: np.ndarray) -> np.ndarray:
    return np.where((u > 0) & (u < 1), 0.5 * np.pi * np.sin(np.pi * u), 0.0)


class _Walk:
    """Closed-form planar walk: speed, heading and gait offsets as functions of time."""

    def __init__(self, p: GeneratorParams, duration: float, rng: np.random.Generator):
        self.v0 = rng.uniform(*p.speed_range)
        self.eps = p.speed_variation
        self.w_s = 2 * np.pi / rng.uniform(*p.speed_period_range)
        self.ph_s = rng.uniform(0, 2 * np.pi)
        # turn-rate knots
        knots, rates, t = [], [rng.uniform(-p.turn_rate_max, p.turn_rate_max)], 0.0
        while True:
            t += rng.uniform(*p.segment_range)
            if t >= duration:
                break
            knots.append(t)
            rates.append(rng.uniform(-p.turn_rate_max, p.turn_rate_max))
        self.knots = np.array(knots)
        self.rates = np.array(rates)
        self.tau = p.turn_transition
        self.psi0 = rng.uniform(-np.pi, np.pi)
        cadence = p.gait_freq_base + p.gait_freq_per_speed * self.v0
        self.w_g = 2 * np.pi * (cadence + rng.uniform(-p.gait_freq_jitter, p.gait_freq_jitter))
        self.ph_g = rng.uniform(0, 2 * np.pi)
        self.a_f = p.gait_forward_amp * self.v0
        self.a_l = p.gait_lateral_amp * self.v0
        self.a_z = p.gait_vertical_amp * self.v0

    def speed(self, t):
        s = np.sin(self.w_s * t + self.ph_s)
        c = np.cos(self.w_s * t + self.ph_s)
        return self.v0 * (1 + self.eps * s), self.v0 * self.eps * self.w_s * c

    def heading(self, t):
        """``(psi, psi', psi'')``."""
        dr = np.diff(self.rates)
        u = (np.asarray(t)[..., None] - self.knots) / self.tau
        psi = self.psi0 + self.rates[0] * t + self.tau * (_ramp_integral(u) * dr).sum(-1)
        rate = self.rates[0] + (_ramp(u) * dr).sum(-1)
        rate_dot = (_ramp_slope(u) * dr).sum(-1) / self.tau
        return psi, rate, rate_dot

    def base_velocity(self, t):
        v, _ = self.speed(t)
        psi, _, _ = self.heading(t)
        return np.stack([v * np.cos(psi), v * np.sin(psi)], axis=-1)

    def gait(self, t):
        """Forward/lateral offsets and vertical height with first and second derivatives."""
        ph = self.w_g * t + self.ph_g
        w = self.w_g
        f = (self.a_f * np.sin(ph), self.a_f * w * np.cos(ph), -self.a_f * w * w * np.sin(ph))
        lat = (self.a_l * np.sin(ph / 2), self.a_l * w / 2 * np.cos(ph / 2),
               -self.a_l * w * w / 4 * np.sin(ph / 2))
        z = (self.a_z * np.cos(ph), -self.a_z * w * np.sin(ph), -self.a_z * w * w * np.cos(ph))
        return f, lat, z, ph


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)


def _integrate_base(walk: _Walk, t: np.ndarray) -> np.ndarray:
    """Base path positions at ``t`` by per-interval Gauss-Legendre quadrature."""
    a, b = t[:-1], t[1:]
    half = (b - a)[:, None] / 2
    nodes = (a + b)[:, None] / 2 + half * _GL_NODES[None, :]
    vel = walk.base_velocity(nodes)  # (T-1, n, 2)
    steps = (vel * (_GL_WEIGHTS[None, :, None] * half[..., None])).sum(axis=1)
    out = np.zeros((len(t), 2))
    out[1:] = np.cumsum(steps, axis=0)
    return out


def _euler_body_rates(yaw_d, pitch, pitch_d, roll, roll_d) -> np.ndarray:
    """Body angular velocity for ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    sr, cr = np.sin(roll), np.cos(roll)
    sp, cp = np.sin(pitch), np.cos(pitch)
    return np.stack([
        roll_d - yaw_d * sp,
        pitch_d * cr + yaw_d * sr * cp,
        -pitch_d * sr + yaw_d * cr * cp,
    ], axis=-1)


def generate_trajectory(seed: int, duration_s: float, params: GeneratorParams | None = None,
                        return_truth: bool = False):
    """Synthesize a body-frame :class:`ImuSequence` of ``duration_s`` seconds."""
    p = params or GeneratorParams()
    p.validate()
    window_s = p.window_len / p.sample_rate
    if not duration_s >= 2 * window_s:
        raise ConfigError(f"duration {duration_s}s is shorter than two windows ({2 * window_s}s)")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * p.sample_rate)) + 1
    t = np.arange(n) / p.sample_rate
    walk = _Walk(p, duration_s, rng)
    yaw_offset = rng.uniform(-p.device_yaw_offset_max, p.device_yaw_offset_max)
    swing_phase, pitch_phase, roll_phase = rng.uniform(0, 2 * np.pi, size=3)
    pitch0, roll0 = rng.uniform(-p.device_tilt_offset_max, p.device_tilt_offset_max, size=2)

    v, v_d = walk.speed(t)
    psi, psi_d, psi_dd = walk.heading(t)
    (f, f_d, f_dd), (lat, lat_d, lat_dd), (z, z_d, z_dd), ph = walk.gait(t)
    e = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    nrm = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)

    # positions: integrated base path plus closed-form gait offsets
    pos = np.zeros((n, 3))
    pos[:, :2] = _integrate_base(walk, t) + f[:, None] * e + lat[:, None] * nrm
    pos[:, 2] = z
    vel = np.zeros((n, 3))
    vel[:, :2] = ((v + f_d - lat * psi_d)[:, None] * e + (lat_d + f * psi_d)[:, None] * nrm)
    vel[:, 2] = z_d
    acc = np.zeros((n, 3))
    along = v_d + f_dd - 2 * lat_d * psi_d - lat * psi_dd - f * psi_d ** 2
    across = v * psi_d + lat_dd + 2 * f_d * psi_d + f * psi_dd - lat * psi_d ** 2
    acc[:, :2] = along[:, None] * e + across[:, None] * nrm
    acc[:, 2] = z_dd

    # device orientation: heading + fixed offset + arm swing, small tilt oscillations
    half = ph / 2
    w_half = walk.w_g / 2
    yaw = psi + yaw_offset + p.device_yaw_swing * np.sin(half + swing_phase)
    yaw_d = psi_d + p.device_yaw_swing * w_half * np.cos(half + swing_phase)
    pitch = pitch0 + p.device_tilt_amp * np.sin(ph + pitch_phase)
    pitch_d = p.device_tilt_amp * walk.w_g * np.cos(ph + pitch_phase)
    roll = roll0 + p.device_tilt_amp * np.sin(half + roll_phase)
    roll_d = p.device_tilt_amp * w_half * np.cos(half + roll_phase)
    quat = frames.quat_from_euler_zyx(yaw, pitch, roll)
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    R_b2g = frames.quat_to_rotation(quat)
    omega_body = _euler_body_rates(yaw_d, pitch, pitch_d, roll, roll_d)
    accel_body = np.einsum("tji,tj->ti", R_b2g, acc + frames.GRAVITY)

    gyro_meas, accel_meas = omega_body.copy(), accel_body.copy()
    if p.gyro_noise > 0:
        gyro_meas += rng.normal(0.0, p.gyro_noise, size=gyro_meas.shape)
    if p.accel_noise > 0:
        accel_meas += rng.normal(0.0, p.accel_noise, size=accel_meas.shape)
    seq = ImuSequence(p.sample_rate, t, gyro_meas, accel_meas, quat, pos, "body")
    seq.validate()
    if return_truth:
        return seq, WalkTruth(acc, vel, omega_body)
    return seq


def generate_dataset(seed: int, n_sequences: int, duration_s: float,
                     params: GeneratorParams | None = None) -> list[ImuSequence]:
    """``n_sequences`` independent walks with per-sequence seeds spawned from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n_sequences)
    return [generate_trajectory(int(c.generate_state(1)[0]), duration_s, params) for c in children]
