"""Command-line entry point: ``mambaio <command> [options]``.

Exit codes: 0 success, 1 internal failure, 2 usage/config error or an
unparseable input file, 3 input data that parses but fails validation.
Every command writes a run manifest (JSON, atomically) next to its main
output. ``MAMBAIO_THREADS`` caps the BLAS/OpenMP worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, pyramid
from .data import (DataFormatError, GeneratorParams, SequenceValidationError, WindowError,
                   generate_dataset, generate_trajectory, load_dataset, load_sequence,
                   make_dataset_windows, save_dataset, save_sequence)
from .diffcore.ops import ConfigError
from .evaluation import evaluate_dataset, evaluate_sequence
from .metrics import DegenerateInputError, MetricError, pca_explained_variance, write_report
from .model import CheckpointError, ModelConfig, build, load_checkpoint, save_checkpoint
from .trainer import DivergenceError, TrainConfig, fit, write_history

log = logging.getLogger("mambaio")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

DATA_DEFAULTS = {"frame": "global", "stride": 10, "val_fraction": 0.2}


class UsageError(Exception):
    pass


# --- helpers ---------------------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _version_string() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"mambaio {__version__} ({rev.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"mambaio {__version__}"


def _read_json_arg(value: str | None, what: str) -> dict:
    """A JSON document given inline or as a path to a file."""
    if value is None:
        return {}
    text = value
    if not value.lstrip().startswith("{"):
        p = Path(value)
        if not p.is_file():
            raise UsageError(f"{what}: no such file {value}")
        text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{what}: expected a JSON object")
    return doc


def _manifest_path(args, output: Path) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if output.suffix == "" and (output.is_dir() or not output.exists()):
        return output / "manifest.json"
    return output.with_name(output.name + ".manifest.json")


def _write_manifest(args, inputs: list, outputs: list, config: dict | None = None,
                    sources: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "argv": args._argv,
        "config_path": getattr(args, "config", None),
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _version_string(),
        "wall_time_s": time.perf_counter() - args._start,
    }
    if config is not None:
        manifest["config"] = config
        manifest["config_sources"] = sources or {}
    path = _manifest_path(args, Path(outputs[0]))
    _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    tmp.replace(path)


def _read_trajectory_csv(path: Path) -> np.ndarray:
    if not path.is_file():
        raise UsageError(f"no such trajectory file {path}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or "x" not in header or "y" not in header:
            raise DataFormatError("trajectory CSV needs x and y columns", line=1)
        ix, iy = header.index("x"), header.index("y")
        pts = []
        for record in reader:
            if not record:
                continue
            try:
                pts.append((float(record[ix]), float(record[iy])))
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}: {exc}", line=reader.line_num) from exc
    if len(pts) < 2:
        raise SequenceValidationError(f"{path}: a trajectory needs at least two points")
    return np.array(pts)


# --- commands --------------------------------------------------------------------------

def cmd_synth(args) -> None:
    params = GeneratorParams.from_dict(_read_json_arg(args.params, "--params"))
    out = Path(args.out)
    if args.n_sequences < 1:
        raise UsageError("--n-sequences must be at least 1")
    if args.n_sequences == 1:
        save_sequence(generate_trajectory(args.seed, args.duration, params), out)
    else:
        save_dataset(generate_dataset(args.seed, args.n_sequences, args.duration, params), out)
    _write_manifest(args, [], [out], {"generator": params.to_dict(), "duration": args.duration,
                                      "n_sequences": args.n_sequences}, {})


def cmd_decompose(args) -> None:
    seq = load_sequence(args.input)
    if args.frame:
        seq = seq.to_frame(args.frame)
    x = np.concatenate([seq.gyro, seq.accel], axis=1).T  # (6, T)
    T = x.shape[1]
    # odd lengths are made even by repeating the final sample; the extra row is dropped
    xe = x if T % 2 == 0 else np.concatenate([x, x[:, -1:]], axis=1)
    try:
        bands = pyramid.decompose(xe, args.k, args.s)
    except (pyramid.InvalidWindowError, pyramid.KernelTooLongError) as exc:
        raise WindowError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    low = bands.low[:, :T]
    high = x - low
    out = Path(args.out)
    header = ["t", "gx", "gy", "gz", "ax", "ay", "az"]
    _write_csv(out / "low.csv", header, np.column_stack([seq.t, low.T]))
    _write_csv(out / "high.csv", header, np.column_stack([seq.t, high.T]))
    _write_manifest(args, [args.input], [out], {"k": args.k, "s": args.s, "frame": seq.frame}, {})


def _resolve_train_config(args) -> tuple[ModelConfig, TrainConfig, dict, dict, dict]:
    """Merge built-in defaults, the config file and CLI flags (flags win)."""
    doc = _read_json_arg(args.config, "--config")
    unknown = set(doc) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sources: dict[str, str] = {}

    def layer(defaults: dict, section: str, flags: dict) -> dict:
        merged = dict(defaults)
        for k in defaults:
            sources[f"{section}.{k}"] = "default"
        for k, v in doc.get(section, {}).items():
            merged[k] = v
            sources[f"{section}.{k}"] = "file"
        for k, v in flags.items():
            if v is not None:
                merged[k] = v
                sources[f"{section}.{k}"] = "flag"
        return merged

    model_d = layer(ModelConfig().to_dict(), "model", {})
    train_d = layer(TrainConfig().to_dict(), "train", {
        "seed": args.seed, "max_epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr})
    data_d = layer(DATA_DEFAULTS, "data", {"frame": args.frame, "stride": args.stride})
    try:
        model_cfg = ModelConfig.from_dict(model_d)
        model_cfg.validate()
        train_cfg = TrainConfig.from_dict(train_d)
        train_cfg.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if data_d["frame"] not in ("global", "body"):
        raise ConfigError(f"unknown frame {data_d['frame']!r}")
    if int(data_d["stride"]) < 1 or not 0 < float(data_d["val_fraction"]) < 1:
        raise ConfigError("stride must be positive and val_fraction in (0, 1)")
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data_d}
    return model_cfg, train_cfg, data_d, resolved, sources


def cmd_train(args) -> int:
    model_cfg, train_cfg, data_cfg, resolved, sources = _resolve_train_config(args)
    seqs = load_dataset(args.data)
    if args.val_data:
        train_seqs, val_seqs = seqs, load_dataset(args.val_data)
    else:
        if len(seqs) < 2:
            raise UsageError("need at least two sequences (or --val-data) to hold out validation")
        n_val = max(1, int(round(len(seqs) * float(data_cfg["val_fraction"]))))
        train_seqs, val_seqs = seqs[:-n_val], seqs[-n_val:]
    L, frame = model_cfg.window_len, data_cfg["frame"]
    train = make_dataset_windows(train_seqs, L, int(data_cfg["stride"]), frame)
    val = make_dataset_windows(val_seqs, L, L, frame)
    model = build(model_cfg, train_cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out.with_name(out.name + ".history.csv")
    status = EXIT_OK
    try:
        result = fit(model, train, val, train_cfg, checkpoint_path=None)
    except DivergenceError as exc:
        log.error("%s; keeping the last good parameters", exc)
        result, status = exc.result, EXIT_INTERNAL
    meta = {"epoch": result.best_epoch, "best_val": result.best_val, "lr": result.final_lr,
            "seed": train_cfg.seed, "frame": frame, "stop_reason": result.stop_reason,
            "train_config": train_cfg.to_dict()}
    save_checkpoint(out, model, meta)
    write_history(result.history, history_path)
    _write_manifest(args, [args.data] + ([args.val_data] if args.val_data else []),
                    [out, history_path], resolved, sources)
    return status


def cmd_eval(args) -> None:
    model, meta = load_checkpoint(args.ckpt)
    frame = args.frame or meta.get("frame", "global")
    seqs = load_dataset(args.data)
    report = evaluate_dataset(model, seqs, frame, args.rte_window_s)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    outputs = [out]
    if args.traj_out:
        tdir = Path(args.traj_out)
        for i, seq in enumerate(seqs):
            r = evaluate_sequence(model, seq, frame, args.rte_window_s)
            for tag in ("est", "gt"):
                traj = r[tag]
                t = np.arange(1, len(traj) + 1) * traj.dt
                path = tdir / f"seq_{i:03d}_{tag}.csv"
                _write_csv(path, ["t", "x", "y"], np.column_stack([t, traj.positions]))
        outputs.append(tdir)
    _write_manifest(args, [args.ckpt, args.data], outputs, {"frame": frame, "rte_window_s": args.rte_window_s})


def cmd_transform(args) -> None:
    seq = load_sequence(args.input)
    save_sequence(seq.to_frame(args.frame), args.out)
    _write_manifest(args, [args.input], [Path(args.out)], {"frame": args.frame})


def cmd_analyze_pca(args) -> None:
    model, meta = load_checkpoint(args.ckpt)
    frame = args.frame or meta.get("frame", "global")
    L = model.config.window_len
    seqs = load_dataset(args.data)
    windows = make_dataset_windows(seqs, L, args.stride or L, frame)
    features = model.features(windows.x)
    ev = pca_explained_variance(features, args.k)
    out = Path(args.out)
    _write_csv(out, ["component", "ratio", "cumulative"],
               [(i + 1, r, c) for i, (r, c) in enumerate(zip(ev.ratios, ev.cumulative))])
    _write_manifest(args, [args.ckpt, args.data], [out],
                    {"k": args.k, "frame": frame, "n_windows": len(windows)})


def _nice_ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    span = max(hi - lo, 1e-9)
    raw = span / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


def render_svg(est: np.ndarray, gt: np.ndarray, size: int = 600, margin: int = 60) -> str:
    """Two planar trajectories on shared, equal-aspect axes with ticks."""
    pts = np.vstack([est, gt])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-6)
    centre = (lo + hi) / 2
    lo, hi = centre - span / 2 * 1.05, centre + span / 2 * 1.05
    inner = size - 2 * margin

    def sx(x):
        return margin + (x - lo[0]) / (hi[0] - lo[0]) * inner

    def sy(y):
        return size - margin - (y - lo[1]) / (hi[1] - lo[1]) * inner

    def polyline(p, colour):
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
        return f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="11">',
             f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" fill="none" stroke="#444"/>']
    for v in _nice_ticks(lo[0], hi[0]):
        x = sx(v)
        parts.append(f'<line x1="{x:.2f}" y1="{size - margin}" x2="{x:.2f}" y2="{size - margin + 5}" stroke="#444"/>')
        parts.append(f'<text x="{x:.2f}" y="{size - margin + 18}" text-anchor="middle">{v:g}</text>')
    for v in _nice_ticks(lo[1], hi[1]):
        y = sy(v)
        parts.append(f'<line x1="{margin - 5}" y1="{y:.2f}" x2="{margin}" y2="{y:.2f}" stroke="#444"/>')
        parts.append(f'<text x="{margin - 8}" y="{y + 4:.2f}" text-anchor="end">{v:g}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 15}" text-anchor="middle">x (m)</text>')
    parts.append(f'<text x="15" y="{size / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {size / 2})">y (m)</text>')
    parts.append(polyline(gt, "#222222"))
    parts.append(polyline(est, "#d62728"))
    parts.append(f'<text x="{margin + 10}" y="{margin + 18}" fill="#222222">ground truth</text>')
    parts.append(f'<text x="{margin + 10}" y="{margin + 34}" fill="#d62728">estimate</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> None:
    est = _read_trajectory_csv(Path(args.traj[0]))
    gt = _read_trajectory_csv(Path(args.traj[1]))
    out = Path(args.out)
    _atomic_write_text(out, render_svg(est, gt))
    _write_manifest(args, list(args.traj), [out])


# --- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mambaio", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mambaio {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic walking sequences")
    p.add_argument("--duration", type=float, default=60.0, help="seconds per sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--params", help="generator parameters: JSON file or inline JSON object")
    p.add_argument("--n-sequences", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decompose", parents=[common], help="split IMU channels into low/high bands")
    p.add_argument("--in", dest="input", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="output directory for low.csv/high.csv")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--s", type=int, default=2)
    p.add_argument("--frame", choices=["global", "body"])
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="dataset directory (one subdirectory per sequence)")
    p.add_argument("--val-data", help="separate validation dataset")
    p.add_argument("--config", help="JSON config with optional model/train/data sections")
    p.add_argument("--frame", choices=["global", "body"])
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="ATE/RTE of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--frame", choices=["global", "body"], help="override the checkpoint's frame")
    p.add_argument("--rte-window-s", type=float, default=60.0)
    p.add_argument("--traj-out", help="directory for per-sequence est/gt trajectory CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transform", parents=[common], help="rewrite a sequence in another frame")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--frame", choices=["global", "body"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("analyze-pca", parents=[common], help="explained variance of pooled features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--frame", choices=["global", "body"])
    p.add_argument("--stride", type=int, help="window stride (default: window length)")
    p.set_defaults(func=cmd_analyze_pca)

    p = sub.add_parser("plot", parents=[common], help="SVG overlay of two trajectories")
    p.add_argument("--traj", nargs=2, metavar=("EST", "GT"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _thread_limit():
    value = os.environ.get("MAMBAIO_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise UsageError(f"MAMBAIO_THREADS must be a positive integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args._start = time.perf_counter()
    args._argv = list(sys.argv[1:] if argv is None else argv)
    try:
        limiter = _thread_limit()
        try:
            status = args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
        return int(status or EXIT_OK)
    except (UsageError, ConfigError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"mambaio {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SequenceValidationError, WindowError, MetricError, DegenerateInputError) as exc:
        print(f"mambaio {args.command}: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"mambaio {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
