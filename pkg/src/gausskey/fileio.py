"""Text file formats shared by the command-line tools.

State sequences are CSV with one row per (frame, landmark)::

    t,k,mu_x,mu_y,l11,l21,l22

Grids (heatmaps, activation maps) are ASCII PGM (P2) with maxval 65535, one
file ``part_<k>.pgm`` per landmark, plus ``maps.json`` holding
``{"K", "H", "W", "scale"}``. Each part is stored linearly mapped from
``[0, scale[k]]`` onto ``[0, 65535]``, where ``scale[k]`` is that part's
largest cell.
"""

from __future__ import annotations

import json
import math
import re
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .state import STATE_WIDTH, StateSequence

STATE_HEADER = ("t", "k", "mu_x", "mu_y", "l11", "l21", "l22")
PGM_MAXVAL = 65535
SIDECAR = "maps.json"
FRAME_DIR = "frame_{:05d}"
_PART_RE = re.compile(r"part_(\d+)\.pgm$")


def _fmt(x: float) -> str:
    # "#" keeps trailing zeros, so every value prints 17 significant digits
    return format(float(x), "#.17g")


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# state sequences
# --------------------------------------------------------------------------


def format_state_csv(seq: StateSequence) -> str:
    lines = [",".join(STATE_HEADER)]
    for t, frame in enumerate(seq.frames):
        for k, row in enumerate(frame):
            lines.append(f"{t},{k}," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_state_csv(path, seq: StateSequence) -> None:
    write_text(path, format_state_csv(seq))


def read_state_csv(path) -> StateSequence:
    """Parse a state CSV; rows must cover every (t, k) in sorted order."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read state CSV ({exc})") from exc
    if not lines or tuple(c.strip() for c in lines[0].split(",")) != STATE_HEADER:
        raise FormatError(f"{path}: header must be {','.join(STATE_HEADER)}")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if not rows:
        raise FormatError(f"{path}: no data rows")
    keys = []
    values = np.empty((len(rows), STATE_WIDTH))
    for i, ln in enumerate(rows):
        cells = ln.split(",")
        if len(cells) != len(STATE_HEADER):
            raise FormatError(f"{path}:{i + 2}: expected {len(STATE_HEADER)} fields, got {len(cells)}")
        try:
            keys.append((int(cells[0]), int(cells[1])))
            values[i] = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{i + 2}: {exc}") from exc
    T = keys[-1][0] + 1
    K = len(rows) // T if T else 0
    expected = [(t, k) for t in range(T) for k in range(K)]
    if K == 0 or keys != expected:
        raise FormatError(f"{path}: rows must enumerate t=0..T-1 and k=0..K-1 in (t, k) order")
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite state values")
    return StateSequence(values.reshape(T, K, STATE_WIDTH))


# --------------------------------------------------------------------------
# PGM grids
# --------------------------------------------------------------------------


def quantize(grid: np.ndarray) -> tuple[np.ndarray, float]:
    """Map a nonnegative grid onto integers in [0, 65535]; returns (levels, scale)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ShapeError(f"expected a 2D grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)) or np.any(grid < 0):
        raise FormatError("PGM grids must be finite and nonnegative")
    scale = float(grid.max(initial=0.0))
    if scale == 0.0:
        return np.zeros(grid.shape, dtype=np.int64), 0.0
    return np.rint(grid / scale * PGM_MAXVAL).astype(np.int64), scale


def write_pgm(path, levels: np.ndarray) -> None:
    levels = np.asarray(levels)
    H, W = levels.shape
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in levels)
    write_text(path, f"P2\n{W} {H}\n{PGM_MAXVAL}\n{body}\n")


def read_pgm(path) -> np.ndarray:
    """Integer levels of an ASCII PGM; ``#`` comments are skipped."""
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: cannot read PGM ({exc})") from exc
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if len(tokens) < 4 or tokens[0] != "P2":
        raise FormatError(f"{path}: not an ASCII (P2) PGM")
    try:
        W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if W < 1 or H < 1 or data.size != W * H:
        raise FormatError(f"{path}: header says {W}x{H} but holds {data.size} samples")
    if maxval != PGM_MAXVAL or np.any(data < 0) or np.any(data > maxval):
        raise FormatError(f"{path}: samples must lie in [0, {PGM_MAXVAL}] with maxval {PGM_MAXVAL}")
    return data.reshape(H, W)


def write_part_maps(directory, maps) -> None:
    """Write a (K, H, W) stack as ``part_<k>.pgm`` files plus the sidecar."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ShapeError(f"expected (K, H, W) maps, got {maps.shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scales = []
    for k, grid in enumerate(maps):
        levels, scale = quantize(grid)
        write_pgm(directory / f"part_{k}.pgm", levels)
        scales.append(scale)
    K, H, W = maps.shape
    meta = {"K": K, "H": H, "W": W, "scale": scales}
    write_text(directory / SIDECAR, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_part_maps(directory) -> np.ndarray:
    """Inverse of ``write_part_maps`` up to 16-bit quantization."""
    directory = Path(directory)
    side = directory / SIDECAR
    if not side.is_file():
        raise FormatError(f"{directory}: missing {SIDECAR}")
    try:
        meta = json.loads(side.read_text())
        K, H, W = int(meta["K"]), int(meta["H"]), int(meta["W"])
        scale = [float(s) for s in meta["scale"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
    if len(scale) != K or any(not (math.isfinite(s) and s >= 0) for s in scale):
        raise FormatError(f"{side}: need {K} finite nonnegative scales")
    out = np.empty((K, H, W))
    for k in range(K):
        levels = read_pgm(directory / f"part_{k}.pgm")
        if levels.shape != (H, W):
            raise ShapeError(f"{directory}/part_{k}.pgm is {levels.shape}, sidecar says {(H, W)}")
        out[k] = levels * (scale[k] / PGM_MAXVAL)
    return out


def frame_dirs(root) -> list[Path]:
    """Sorted ``frame_*`` subdirectories, or ``[root]`` if it is itself a map directory."""
    root = Path(root)
    if (root / SIDECAR).is_file():
        return [root]
    return sorted(p for p in root.glob("frame_*") if p.is_dir())


# --------------------------------------------------------------------------
# metric report
# --------------------------------------------------------------------------


def format_metric_csv(psnr_db, ssim, state_mse=None) -> str:
    """Per-frame rows followed by a ``mean`` row; ``inf`` PSNR must be capped by the caller."""
    cols = ["frame", "psnr_db", "ssim"] + (["state_mse"] if state_mse is not None else [])
    n = len(psnr_db) if psnr_db is not None else len(state_mse)
    columns = [psnr_db, ssim] + ([state_mse] if state_mse is not None else [])
    lines = [",".join(cols)]
    for i in range(n):
        lines.append(",".join([str(i)] + [_cell(c, i) for c in columns]))
    lines.append(",".join(["mean"] + [_mean_cell(c) for c in columns]))
    return "\n".join(lines) + "\n"


def _cell(column, i):
    return "" if column is None else _fmt(column[i])


def _mean_cell(column):
    return "" if column is None else _fmt(np.mean(column))
