"""The dual-branch velocity regressor and its checkpoint format.

Pipeline for a window ``(N, 6, L)``: per-channel standardization, one
Laplacian split, a pointwise stem per band, then four stages in which the
high band goes through residual MPC blocks and the low band through residual
Mamba blocks (strided pointwise convolutions halve the length between
stages on both branches). Attention follows the last Mamba stage, the two
branches are concatenated and fused by a pointwise convolution, pooled over
time, and a linear head emits the velocity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import pyramid
from .diffcore import ParamStore, ShapeError, Tensor, no_grad, ops
from .diffcore.ops import ConfigError
from .mpc import MpcBlockParams, mpc_forward
from .ssm import AttentionParams, MambaBlockParams, NumericError, attention_block, mamba_block

CHECKPOINT_MAGIC = b"MIOC"
CHECKPOINT_VERSION = 1


@dataclass
class PyramidConfig:
    k: int = 5
    s: int = 2
    depth: int = 1


@dataclass
class SsmConfig:
    H: int = 16
    conv_k: int = 3


@dataclass
class ModelConfig:
    in_channels: int = 6
    window_len: int = 200
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    blocks_per_stage: int = 2
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    ssm: SsmConfig = field(default_factory=SsmConfig)
    attention_heads: int = 4
    se_ratio: int = 4
    output_dim: int = 2
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.pyramid, dict):
            self.pyramid = PyramidConfig(**self.pyramid)
        if isinstance(self.ssm, dict):
            self.ssm = SsmConfig(**self.ssm)
        self.stage_channels = list(self.stage_channels)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def validate(self) -> None:
        ch = self.stage_channels
        if not ch or any(c <= 0 for c in ch) or any(b < a for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"stage_channels must be nonempty and ascending, got {ch}")
        n_down = 2 ** (len(ch) - 1)
        n_pyr = self.pyramid.s ** self.pyramid.depth
        if self.window_len % n_down or self.window_len % n_pyr:
            raise ConfigError(f"window_len {self.window_len} must be divisible by {n_down} and {n_pyr}")
        if self.window_len // n_down < 1:
            raise ConfigError("window too short for the number of stages")
        if ch[-1] % self.attention_heads:
            raise ConfigError(f"{ch[-1]} channels not divisible by {self.attention_heads} heads")
        if any((3 * c) % self.se_ratio for c in ch):
            raise ConfigError(f"SE ratio {self.se_ratio} must divide 3x every stage width")
        if self.output_dim not in (2, 3):
            raise ConfigError("output_dim must be 2 or 3")
        if self.blocks_per_stage < 1 or self.in_channels < 1:
            raise ConfigError("blocks_per_stage and in_channels must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unsupported precision {self.precision!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model options: {sorted(unknown)}")
        return cls(**d)


class MambaIO:
    """Parameterized model. Build with :func:`build`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = ParamStore(config.dtype)
        self.norm_mean = np.zeros(config.in_channels)
        self.norm_std = np.ones(config.in_channels)
        rng = np.random.default_rng(seed)
        store = self.params
        c0, cin = config.stage_channels[0], config.in_channels
        self.stems = {
            band: (store.add(f"{band}.stem.weight", rng.uniform(-1, 1, (c0, cin)) / np.sqrt(cin)),
                   store.add(f"{band}.stem.bias", np.zeros(c0)))
            for band in ("high", "low")
        }
        self.mpc_blocks: list[list[MpcBlockParams]] = []
        self.mamba_blocks: list[list[MambaBlockParams]] = []
        self.downsamples: list[dict[str, tuple[Tensor, Tensor]]] = []
        for i, c in enumerate(config.stage_channels):
            self.mpc_blocks.append([
                MpcBlockParams.create(store, f"high.stage{i}.block{j}", c, rng, config.se_ratio)
                for j in range(config.blocks_per_stage)])
            self.mamba_blocks.append([
                MambaBlockParams.create(store, f"low.stage{i}.block{j}", c, config.ssm.H, rng,
                                        conv_k=config.ssm.conv_k)
                for j in range(config.blocks_per_stage)])
            if i + 1 < len(config.stage_channels):
                c_next = config.stage_channels[i + 1]
                self.downsamples.append({
                    band: (store.add(f"{band}.down{i}.weight", rng.uniform(-1, 1, (c_next, c)) / np.sqrt(c)),
                           store.add(f"{band}.down{i}.bias", np.zeros(c_next)))
                    for band in ("high", "low")})
        c_last = config.stage_channels[-1]
        self.attention = AttentionParams.create(store, "low.attention", c_last, config.attention_heads, rng)
        self.fuse = (store.add("fuse.weight", rng.uniform(-1, 1, (c_last, 2 * c_last)) / np.sqrt(2 * c_last)),
                     store.add("fuse.bias", np.zeros(c_last)))
        self.head = (store.add("head.weight", rng.uniform(-1, 1, (config.output_dim, c_last)) / np.sqrt(c_last)),
                     store.add("head.bias", np.zeros(config.output_dim)))

    # --- normalization ---

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.norm_mean = np.asarray(mean, dtype=float).copy()
        self.norm_std = np.maximum(np.asarray(std, dtype=float), 1e-8)

    def normalize(self, windows: np.ndarray) -> np.ndarray:
        w = np.asarray(windows, dtype=float)
        if w.ndim == 2:
            w = w[None]
        cfg = self.config
        if w.shape[1:] != (cfg.in_channels, cfg.window_len):
            raise ShapeError(f"expected windows of shape (N, {cfg.in_channels}, {cfg.window_len}), got {w.shape}")
        return ((w - self.norm_mean[:, None]) / self.norm_std[:, None]).astype(cfg.dtype)

    # --- forward ---

    def forward(self, windows: np.ndarray, return_features: bool = False):
        """``(N, 6, L)`` (or a single ``(6, L)`` window) to ``(N, output_dim)`` velocities."""
        cfg = self.config
        x = Tensor(self.normalize(windows))
        low, high = pyramid.split_tensor(x, cfg.pyramid.k, cfg.pyramid.s, cfg.pyramid.depth)
        h = ops.pointwise_conv1d(high, *self.stems["high"])
        l = ops.transpose(ops.pointwise_conv1d(low, *self.stems["low"]), (0, 2, 1))  # (N, L, C)
        for i in range(len(cfg.stage_channels)):
            for mpc, mamba in zip(self.mpc_blocks[i], self.mamba_blocks[i]):
                h = ops.add(h, mpc_forward(h, mpc, strict=False))
                l = mamba_block(l, mamba)
            _check_finite(h, f"high.stage{i}")
            _check_finite(l, f"low.stage{i}")
            if i < len(self.downsamples):
                down = self.downsamples[i]
                h = ops.pointwise_conv1d(h, *down["high"], stride=2)
                l_cf = ops.pointwise_conv1d(ops.transpose(l, (0, 2, 1)), *down["low"], stride=2)
                l = ops.transpose(l_cf, (0, 2, 1))
        l = attention_block(l, self.attention)
        fused = ops.pointwise_conv1d(ops.concat_channels([h, ops.transpose(l, (0, 2, 1))]), *self.fuse)
        _check_finite(fused, "fuse")
        features = ops.global_avg_pool_time(fused)
        out = ops.linear(features, *self.head)
        _check_finite(out, "head")
        return (out, features) if return_features else out

    def predict(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self._batched(windows, batch_size, features=False)

    def features(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Pooled pre-head features, ``(N, stage_channels[-1])``."""
        return self._batched(windows, batch_size, features=True)

    def _batched(self, windows, batch_size, features):
        windows = np.asarray(windows)
        if windows.ndim == 2:
            windows = windows[None]
        outs = []
        with no_grad():
            for start in range(0, len(windows), batch_size):
                pred, feat = self.forward(windows[start:start + batch_size], return_features=True)
                outs.append((feat if features else pred).data.astype(np.float64))
        return np.concatenate(outs, axis=0)

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Channel/length of every stage for one window, computed from the config."""
        cfg = self.config
        trace, length = [], cfg.window_len
        for i, c in enumerate(cfg.stage_channels):
            trace.append((f"stage{i}", (c, length)))
            if i + 1 < len(cfg.stage_channels):
                length //= 2
        trace.append(("fused", (cfg.stage_channels[-1], length)))
        return trace


def _check_finite(t: Tensor, layer: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activation after {layer}")


def build(config: ModelConfig, seed: int = 0) -> MambaIO:
    return MambaIO(config, seed)


def loss(pred: Tensor, label) -> Tensor:
    """Mean squared error over all components (and over the batch)."""
    label = np.asarray(label, dtype=pred.dtype)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} vs label {label.shape}")
    return ops.mse_loss(pred, label)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: MambaIO, metadata: dict | None = None) -> None:
    """Write ``MIOC | u32 version | u64 header length | JSON header | float32 LE blobs``."""
    names = model.params.names()
    entries, blobs, offset = [], [], 0
    for name in names:
        data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": model.config.to_dict(),
        "dtype": "float32",
        "byte_order": "little",
        "seed": model.seed,
        "normalization": {"mean": model.norm_mean.tolist(), "std": model.norm_std.tolist()},
        "params": entries,
        "training": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[MambaIO, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + header_len].decode("utf-8"))
    blob_start = start + header_len
    config = ModelConfig.from_dict(header["config"])
    model = build(config, header.get("seed", 0))
    state = {}
    for e in header["params"]:
        lo = blob_start + e["offset"]
        arr = np.frombuffer(raw[lo:lo + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        state[e["name"]] = arr
    model.params.load_state(state)
    norm = header["normalization"]
    model.set_normalization(np.array(norm["mean"]), np.array(norm["std"]))
    return model, header.get("training", {})
