"""``gausskey`` command-line interface.

Subcommands::

    synth    generate a synthetic state sequence (and optionally heatmap frames)
    fit      fit Gaussian landmarks to PGM part maps
    render   render heatmap frames from a state CSV
    interp   interpolate between the first and last state of a CSV
    train    train the residual LSTM on state CSVs
    predict  roll a checkpoint forward from seed states
    eval     per-frame PSNR / SSIM / state MSE between two sequences

Exit status is 0 on success, 1 for data or runtime errors and 2 for usage
errors. Every command writes ``<output>.manifest.json`` (or ``manifest.json``
inside an output directory) recording its flags, inputs and outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import dynamics, fileio, metrics
from .errors import DivergenceError, GausskeyError
from .heatmap import ROUNDTRIP_TEMPERATURE, render_heatmap
from .interpolate import interpolate_sequence
from .state import DEFAULT_EPS, ActivationMap, StateSequence, fit_state, softmax_normalize
from .synthetic import COVARIANCE_MODES, KINDS, TrajectorySpec, generate_states

THREADS_ENV = "GAUSSKEY_THREADS"
DEFAULT_RENDER_SIZE = 64


class UsageError(Exception):
    """Flag combination rejected after parsing; reported with exit code 2."""


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_manifest(args, inputs, outputs, started: float, manifest_path: Path) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": _version(),
        "wall_clock_s": round(time.perf_counter() - started, 6),
    }
    fileio.write_text(manifest_path, json.dumps(manifest, indent=2, default=str) + "\n")


def _manifest_for(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _render_frames(seq: StateSequence, size: int, root: Path) -> None:
    for t in range(len(seq)):
        fileio.write_part_maps(root / fileio.FRAME_DIR.format(t), render_heatmap(seq[t], size, size).parts)


def _render_stack(seq: StateSequence, size: int) -> np.ndarray:
    return np.stack([render_heatmap(seq[t], size, size).parts for t in range(len(seq))])


# --------------------------------------------------------------------------
# commands; each returns (inputs, outputs, manifest path)
# --------------------------------------------------------------------------


def cmd_synth(args):
    spec = TrajectorySpec(
        kind=args.kind,
        num_landmarks=args.k,
        num_frames=args.t,
        seed=args.seed,
        noise_sigma=args.noise,
        covariance_mode=args.cov_mode,
        speed=args.speed,
    )
    seq = generate_states(spec)
    fileio.write_state_csv(args.out, seq)
    outputs = [args.out]
    if args.frames is not None:
        _render_frames(seq, args.size, args.frames)
        outputs.append(args.frames)
    return [], outputs, _manifest_for(args.out)


def cmd_fit(args):
    dirs = fileio.frame_dirs(args.input)
    if not dirs:
        raise GausskeyError(f"{args.input}: no frame directories or part maps found")
    frames = []
    shape = None
    for d in dirs:
        maps = fileio.read_part_maps(d)
        if shape is None:
            shape = maps.shape
        elif maps.shape != shape:
            raise GausskeyError(f"frame {d.name} has maps of shape {maps.shape}, expected {shape}")
        prob = softmax_normalize(ActivationMap(maps), args.temperature)
        frames.append(fit_state(prob, args.eps).landmarks)
    fileio.write_state_csv(args.out, StateSequence(np.stack(frames)))
    return [args.input], [args.out], _manifest_for(args.out)


def cmd_render(args):
    seq = fileio.read_state_csv(args.input)
    _render_frames(seq, args.size, args.out)
    return [args.input], [args.out], _manifest_for(args.out)


def cmd_interp(args):
    seq = fileio.read_state_csv(args.input)
    if len(seq) < 2:
        raise GausskeyError(f"{args.input}: need two endpoint frames, found {len(seq)}")
    out = interpolate_sequence(seq[0], seq[len(seq) - 1], args.steps)
    fileio.write_state_csv(args.out, out)
    return [args.input], [args.out], _manifest_for(args.out)


def cmd_train(args):
    dataset = [fileio.read_state_csv(p) for p in args.inputs]
    K = dataset[0].num_landmarks
    rcfg = dynamics.RolloutConfig(args.n_inputs, args.m_future)
    for p, seq in zip(args.inputs, dataset):
        if len(seq) < rcfg.window:
            raise GausskeyError(f"{p}: {len(seq)} frames, the protocol needs {rcfg.window}")
    tcfg = dynamics.TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        max_steps=args.steps,
        seed=args.seed,
    )
    model = dynamics.init_model(K, hidden=args.hidden, layers=args.layers, seed=args.seed)
    trained, losses = dynamics.train(model, dataset, rcfg, tcfg)
    dynamics.save_checkpoint(trained, args.out)
    loss_path = args.out.with_name(args.out.name + ".loss.csv")
    lines = ["step,loss"] + [f"{i},{fileio._fmt(v)}" for i, v in enumerate(losses)]
    fileio.write_text(loss_path, "\n".join(lines) + "\n")
    return args.inputs, [args.out, loss_path], _manifest_for(args.out)


def cmd_predict(args):
    model = dynamics.load_checkpoint(args.checkpoint)
    seq = fileio.read_state_csv(args.input)
    n = len(seq) if args.seed_frames is None else args.seed_frames
    if n > len(seq):
        raise GausskeyError(f"{args.input}: asked for {n} seed frames, file has {len(seq)}")
    if seq.num_landmarks != model.num_landmarks:
        raise GausskeyError(f"checkpoint has K={model.num_landmarks}, seed CSV has K={seq.num_landmarks}")
    out = dynamics.rollout(model, seq.frames[:n], args.horizon)
    fileio.write_state_csv(args.out, out)
    outputs = [args.out]
    if args.frames is not None:
        _render_frames(out, args.size, args.frames)
        outputs.append(args.frames)
    return [args.checkpoint, args.input], outputs, _manifest_for(args.out)


def _load_for_eval(path: Path, size: int):
    """(images (T, K, H, W), states or None) for a CSV or a frame directory."""
    if path.is_dir():
        dirs = fileio.frame_dirs(path)
        if not dirs:
            raise GausskeyError(f"{path}: no frames found")
        return np.stack([fileio.read_part_maps(d) for d in dirs]), None
    seq = fileio.read_state_csv(path)
    return _render_stack(seq, size), seq.frames


def cmd_eval(args):
    pred_img, pred_state = _load_for_eval(args.prediction, args.size)
    ref_img, ref_state = _load_for_eval(args.reference, args.size)
    if pred_img.shape != ref_img.shape:
        raise GausskeyError(f"prediction frames {pred_img.shape} and reference frames {ref_img.shape} differ")
    psnr = [min(metrics.multichannel_psnr(a, b), metrics.PSNR_CAP_DB) for a, b in zip(pred_img, ref_img)]
    ssim = [metrics.ssim(a, b) for a, b in zip(pred_img, ref_img)]
    mse = None
    if pred_state is not None and ref_state is not None:
        mse = np.mean((pred_state - ref_state) ** 2, axis=(1, 2))
    fileio.write_text(args.out, fileio.format_metric_csv(psnr, ssim, mse))
    return [args.prediction, args.reference], [args.out], _manifest_for(args.out)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gausskey", description="Gaussian landmark pose states: fit, render, interpolate, predict.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic state sequence")
    p.add_argument("--kind", choices=KINDS, default="linear")
    p.add_argument("--k", type=_positive_int, default=4, help="number of landmarks")
    p.add_argument("--t", type=_positive_int, default=40, help="number of frames (>= 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=_nonneg_float, default=0.0, help="std of Gaussian noise added to means")
    p.add_argument("--cov-mode", choices=COVARIANCE_MODES, default="fixed")
    p.add_argument("--speed", type=_nonneg_float, default=0.005)
    p.add_argument("--frames", type=Path, help="also render heatmap frames into this directory")
    p.add_argument("--size", type=_positive_int, default=DEFAULT_RENDER_SIZE)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit Gaussians to PGM part maps")
    p.add_argument("input", type=Path, help="directory of frame_* subdirectories, or one map directory")
    p.add_argument("--eps", type=_nonneg_float, default=DEFAULT_EPS)
    p.add_argument("--temperature", type=_positive_float, default=ROUNDTRIP_TEMPERATURE)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render heatmap frames from a state CSV")
    p.add_argument("input", type=Path)
    p.add_argument("--size", type=_positive_int, default=DEFAULT_RENDER_SIZE)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("interp", help="interpolate between the first and last frames of a CSV")
    p.add_argument("input", type=Path)
    p.add_argument("--steps", type=_positive_int, default=30)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("train", help="train the residual LSTM")
    p.add_argument("inputs", type=Path, nargs="+", help="one state CSV per sequence")
    p.add_argument("--n-inputs", type=_positive_int, default=10)
    p.add_argument("--m-future", type=_nonneg_int, default=10)
    p.add_argument("--steps", type=_nonneg_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=_positive_int, default=dynamics.DEFAULT_HIDDEN)
    p.add_argument("--layers", type=_positive_int, default=dynamics.DEFAULT_LAYERS)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--weight-decay", type=_nonneg_float, default=5e-6)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="roll a trained model forward")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("input", type=Path, help="state CSV holding the seed frames")
    p.add_argument("--seed-frames", type=_positive_int, help="use only the first N frames as seeds")
    p.add_argument("--horizon", type=_nonneg_int, required=True)
    p.add_argument("--frames", type=Path, help="also render the output into this directory")
    p.add_argument("--size", type=_positive_int, default=DEFAULT_RENDER_SIZE)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-frame PSNR, SSIM and state MSE")
    p.add_argument("prediction", type=Path, help="state CSV or frame directory")
    p.add_argument("reference", type=Path, help="state CSV or frame directory")
    p.add_argument("--size", type=_positive_int, default=DEFAULT_RENDER_SIZE, help="render size for CSV inputs")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _check_usage(args) -> None:
    if args.command == "synth" and args.t < 2:
        raise UsageError("--t must be at least 2")
    if args.command == "interp" and args.steps < 2:
        raise UsageError("--steps must be at least 2")
    if args.command == "train" and args.n_inputs < 2:
        raise UsageError("--n-inputs must be at least 2: the first residual needs two states")
    if args.command == "predict" and args.seed_frames is not None and args.seed_frames < 2:
        raise UsageError("--seed-frames must be at least 2")


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check_usage(args)
        limiter = _thread_limit()
    except UsageError as exc:
        parser.error(str(exc))
    started = time.perf_counter()
    try:
        inputs, outputs, manifest = args.func(args)
        _write_manifest(args, inputs, outputs, started, manifest)
    except DivergenceError as exc:
        print(f"gausskey {args.command}: {exc} (last loss {exc.loss:.6g})", file=sys.stderr)
        return 1
    except (GausskeyError, ValueError, OSError) as exc:
        print(f"gausskey {args.command}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


if __name__ == "__main__":
    sys.exit(main())
