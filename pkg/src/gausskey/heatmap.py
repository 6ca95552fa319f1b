"""Rendering landmarks to part maps and pooling appearance features.

A landmark ``(mu, Sigma)`` renders to the inverse-quadratic map

    s(l) = 1 / (1 + (l - mu)^T Sigma^-1 (l - mu))

which peaks at 1 on the mean and falls to 1/2 at Mahalanobis distance 1.
It is a conditioning signal, not a density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotNormalizedError, RenderError, ShapeError
from .state import (
    DEFAULT_EPS,
    ActivationMap,
    PoseState,
    fit_state,
    factor_to_cov_batch,
    grid_coords,
    softmax_normalize,
)

DET_FLOOR = 1e-14
# Softmax temperature used to turn a rendered map back into a distribution.
# Linear renormalization keeps the heavy 1/q tails, which drag the centroid
# toward the frame center by up to ~0.25 units; at 0.05 the tails weigh
# e^-20 per cell and the centroid error stays near 1e-3.
ROUNDTRIP_TEMPERATURE = 0.05


@dataclass(frozen=True)
class Heatmap:
    parts: np.ndarray

    def __post_init__(self):
        p = np.array(self.parts, dtype=np.float64)
        if p.ndim != 3:
            raise ShapeError(f"heatmap must be (K, H, W), got {p.shape}")
        if not (np.all(p > 0) and np.all(p <= 1)):
            raise ShapeError("heatmap values must lie in (0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "parts", p)

    @property
    def height(self) -> int:
        return self.parts.shape[1]

    @property
    def width(self) -> int:
        return self.parts.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    channels: np.ndarray

    def __post_init__(self):
        c = np.array(self.channels, dtype=np.float64)
        if c.ndim != 3:
            raise ShapeError(f"feature map must be (C, H, W), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ShapeError("feature map has non-finite values")
        c.setflags(write=False)
        object.__setattr__(self, "channels", c)


@dataclass(frozen=True)
class AppearanceCode:
    vectors: np.ndarray  # (K, C)


def _inverse_covariances(state: PoseState, eps: float | None):
    cov = state.covariances()
    if eps is not None:
        cov = cov + eps * np.eye(2)
    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    bad = np.flatnonzero(~(det >= DET_FLOOR))
    if bad.size:
        k = int(bad[0])
        raise RenderError(f"landmark {k} has a singular covariance (det={det[k]!r})", landmark=k)
    # adjugate / determinant
    return c / det, -b / det, a / det


def heatmap_values(mu, sigma, points) -> np.ndarray:
    """Evaluate ``s`` for one landmark at an array of points (..., 2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    a, b, c = sigma[0, 0], sigma[0, 1], sigma[1, 1]
    det = a * c - b * b
    if not det >= DET_FLOOR:
        raise RenderError(f"singular covariance (det={det!r})", landmark=0)
    dx = pts[..., 0] - mu[0]
    dy = pts[..., 1] - mu[1]
    q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return 1.0 / (1.0 + q)


def render_heatmap(state: PoseState, width: int, height: int, eps: float | None = None) -> Heatmap:
    """Render every landmark of ``state`` onto an H x W grid.

    Covariances come from ``L L^T`` so tagged-invalid states render too.
    ``eps`` adds ``eps * I`` before inversion, for states whose factors
    have collapsed; without it a singular landmark raises ``RenderError``.
    """
    i00, i01, i11 = _inverse_covariances(state, eps)
    xs, ys = grid_coords(width, height)
    dx = xs[None, None, :] - state.means[:, 0, None, None]
    dy = ys[None, :, None] - state.means[:, 1, None, None]
    q = i00[:, None, None] * dx * dx + 2.0 * i01[:, None, None] * dx * dy + i11[:, None, None] * dy * dy
    return Heatmap(1.0 / (1.0 + q))


def pool_appearance(prob: ActivationMap, features: FeatureMap) -> AppearanceCode:
    """Per-landmark appearance: feature channels weighted by each part map."""
    if not prob.normalized:
        raise NotNormalizedError("appearance pooling needs softmax-normalized part maps")
    p = prob.parts
    f = features.channels
    if p.shape[1:] != f.shape[1:]:
        raise ShapeError(f"part maps {p.shape[1:]} and features {f.shape[1:]} differ in size")
    return AppearanceCode(np.einsum("khw,chw->kc", p, f))


def fit_render_roundtrip(
    state: PoseState,
    width: int,
    height: int,
    temperature: float = ROUNDTRIP_TEMPERATURE,
    eps: float = DEFAULT_EPS,
) -> PoseState:
    """Render, turn each part back into a distribution, and refit.

    Only the means are meant to survive the trip; the refit covariances
    describe the sharpened distribution, not the source landmark.
    """
    heat = render_heatmap(state, width, height)
    prob = softmax_normalize(ActivationMap(heat.parts), temperature)
    return fit_state(prob, eps)
