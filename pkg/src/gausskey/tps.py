"""Thin-plate-spline warps of 2D points and grids.

A warp maps ``p`` to ``A [p; 1] + sum_i w_i U(|p - c_i|)`` with kernel
``U(r) = r^2 log r^2`` (and ``U(0) = 0``). Fitting solves the usual
bordered system

    [K + lam I   P] [W]   [dst]
    [P^T         0] [a] = [ 0 ]

where ``P = [1, x, y]`` holds the source control points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import rng as _rng
from .errors import NonFiniteError, ShapeError, SingularSystemError
from .state import grid_coords

DEFAULT_LAMBDA = 1e-6
RESIDUAL_TOL = 1e-8


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """``U`` as a function of squared distance; zero at the origin."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _sqdist(p, q):
    d = p[:, None, :] - q[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


@dataclass(frozen=True)
class TpsWarp:
    control_src: np.ndarray  # (n, 2)
    control_dst: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n, 2)
    affine: np.ndarray  # (2, 3): columns act on x, y, 1
    lam: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "control_src": self.control_src.tolist(),
                "control_dst": self.control_dst.tolist(),
                "weights": self.weights.tolist(),
                "affine": self.affine.tolist(),
                "lambda": self.lam,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TpsWarp":
        d = json.loads(text)
        return cls(
            np.array(d["control_src"], dtype=np.float64),
            np.array(d["control_dst"], dtype=np.float64),
            np.array(d["weights"], dtype=np.float64),
            np.array(d["affine"], dtype=np.float64),
            float(d["lambda"]),
        )


def _as_points(points, name):
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"{name} must be (n, 2), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NonFiniteError(f"{name} has non-finite coordinates")
    return p


def tps_fit(src, dst, lam: float = DEFAULT_LAMBDA) -> TpsWarp:
    src = _as_points(src, "src")
    dst = _as_points(dst, "dst")
    n = src.shape[0]
    if dst.shape[0] != n:
        raise ShapeError(f"src has {n} points but dst has {dst.shape[0]}")
    if n < 3:
        raise SingularSystemError("a thin-plate spline needs at least 3 control points")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    P = np.hstack([np.ones((n, 1)), src])
    if np.linalg.matrix_rank(P) < 3:
        raise SingularSystemError("control points are collinear")
    if lam == 0 and len(np.unique(src, axis=0)) < n:
        raise SingularSystemError("duplicated control points need lambda > 0")

    K = tps_kernel(_sqdist(src, src)) + lam * np.eye(n)
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = K
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as err:
        raise SingularSystemError(str(err)) from err
    resid = np.abs(A @ sol - rhs).max()
    if not resid < RESIDUAL_TOL * max(1.0, np.abs(rhs).max()):
        raise SingularSystemError(f"TPS system residual {resid:.3g} too large")
    w = sol[:n]
    a = sol[n:]  # rows: constant, x, y
    affine = np.column_stack([a[1], a[2], a[0]])
    return TpsWarp(src.copy(), dst.copy(), w, affine, float(lam))


def tps_apply(warp: TpsWarp, points) -> np.ndarray:
    p = _as_points(points, "points")
    U = tps_kernel(_sqdist(p, warp.control_src))
    return p @ warp.affine[:, :2].T + warp.affine[:, 2] + U @ warp.weights


def identity_warp(src) -> TpsWarp:
    src = _as_points(src, "src")
    n = src.shape[0]
    return TpsWarp(src.copy(), src.copy(), np.zeros((n, 2)), np.hstack([np.eye(2), np.zeros((2, 1))]), 0.0)


def control_grid(g: int) -> np.ndarray:
    """g x g control points spanning [-1, 1]^2, row-major over (y, x)."""
    if g < 2:
        raise ValueError("control grid needs g >= 2")
    t = np.linspace(-1.0, 1.0, g)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def random_tps(g: int, sigma: float, seed: int, lam: float = DEFAULT_LAMBDA) -> TpsWarp:
    """Random smooth warp from jittered control-grid points.

    Displacements are i.i.d. normal with std ``sigma``, shortened to length
    at most ``4 * sigma``, and destinations are clamped into [-1, 1]^2.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    src = control_grid(g)
    if sigma == 0:
        return identity_warp(src)
    gen = _rng.stream(seed, "tps.random")
    d = gen.normal(0.0, sigma, size=src.shape)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    cap = 4.0 * sigma
    d = np.where(norm > cap, d * (cap / np.maximum(norm, 1e-300)), d)
    dst = np.clip(src + d, -1.0, 1.0)
    return tps_fit(src, dst, lam)


def tps_inverse(warp: TpsWarp, lam: float | None = None) -> TpsWarp:
    """Approximate inverse: the spline fitted to the swapped correspondences."""
    return tps_fit(warp.control_dst, warp.control_src, warp.lam if lam is None else lam)


def warp_grid(grid, warp: TpsWarp, cval: float = 0.0) -> np.ndarray:
    """Resample grids (..., H, W) through ``warp`` by inverse mapping.

    Output pixel ``p`` takes the bilinear sample of the input at
    ``tps_apply(warp, p)``; to move content forward along ``f`` pass the
    inverse of ``f`` (see ``tps_inverse``).
    """
    g = np.asarray(grid, dtype=np.float64)
    H, W = g.shape[-2:]
    xs, ys = grid_coords(W, H)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    src = tps_apply(warp, np.column_stack([xx.ravel(), yy.ravel()]))
    # normalized coordinate -> fractional pixel index
    col = (src[:, 0] * W + W - 1.0) / 2.0
    row = (src[:, 1] * H + H - 1.0) / 2.0
    flat = g.reshape(-1, H, W)
    out = np.stack(
        [ndimage.map_coordinates(f, [row, col], order=1, mode="constant", cval=cval).reshape(H, W) for f in flat]
    )
    return out.reshape(g.shape)
