"""Landmark representation: activation maps, 2D Gaussians and packed states.

Coordinates are normalized to the square [-1, 1]^2 with x to the right and
y downward. Pixel (i, j) of an H x W grid sits at its center::

    x_j = (2j + 1 - W) / W,    y_i = (2i + 1 - H) / H

which equals ``-1 + (2j + 1) / W`` but is exactly antisymmetric in floating
point, so mirrored and rotated grids land on identical coordinates.

A pose state packs K landmarks as rows ``[mu_x, mu_y, l11, l21, l22]``
where ``L = [[l11, 0], [l21, l22]]`` is the Cholesky factor of the
landmark covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateCovarianceError,
    InvalidFactorError,
    NonFiniteError,
    NotNormalizedError,
    NotPositiveDefiniteError,
    ShapeError,
)

DEFAULT_EPS = 1e-4
DEFAULT_TEMPERATURE = 1.0
NORMALIZED_TOL = 1e-9
SYMMETRY_TOL = 1e-12
STATE_WIDTH = 5


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _first_nonfinite(a):
    bad = np.argwhere(~np.isfinite(a))
    return tuple(int(i) for i in bad[0]) if len(bad) else None


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationMap:
    """K part score grids of shape (K, H, W).

    Raw maps hold arbitrary finite scores; a map flagged ``normalized``
    must be nonnegative with every part summing to one.
    """

    parts: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        parts = _frozen(self.parts)
        if parts.ndim != 3 or min(parts.shape) < 1:
            raise ShapeError(f"activation map must be (K, H, W), got {parts.shape}")
        object.__setattr__(self, "parts", parts)
        if self.normalized:
            if np.any(parts < 0):
                raise NotNormalizedError("normalized map has negative cells")
            sums = parts.reshape(parts.shape[0], -1).sum(axis=1)
            off = np.abs(sums - 1.0)
            if np.any(off > NORMALIZED_TOL):
                k = int(np.argmax(off))
                raise NotNormalizedError(f"part {k} sums to {sums[k]!r}, not 1")

    @property
    def num_parts(self) -> int:
        return self.parts.shape[0]

    @property
    def height(self) -> int:
        return self.parts.shape[1]

    @property
    def width(self) -> int:
        return self.parts.shape[2]


@dataclass(frozen=True)
class Gaussian2:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _frozen(self.mu)
        sigma = _frozen(self.sigma)
        if mu.shape != (2,) or sigma.shape != (2, 2):
            raise ShapeError(f"expected mu (2,) and sigma (2, 2), got {mu.shape}, {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise NonFiniteError("Gaussian parameters must be finite")
        if abs(sigma[0, 1] - sigma[1, 0]) > SYMMETRY_TOL:
            raise ShapeError("sigma is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        # raises NotPositiveDefiniteError for non-PD sigma
        cholesky_2x2(sigma)


@dataclass(frozen=True)
class CholFactor:
    l11: float
    l21: float
    l22: float

    def __post_init__(self):
        vals = (self.l11, self.l21, self.l22)
        if not all(np.isfinite(v) for v in vals):
            raise NonFiniteError("Cholesky factor must be finite")
        if not (self.l11 > 0 and self.l22 > 0):
            raise InvalidFactorError(f"diagonal must be positive, got l11={self.l11}, l22={self.l22}")

    def as_array(self) -> np.ndarray:
        return np.array([self.l11, self.l21, self.l22])


@dataclass(frozen=True)
class PoseState:
    """K landmarks as a (K, 5) array of ``[mu_x, mu_y, l11, l21, l22]``.

    ``valid_factor=False`` marks states (e.g. extrapolations) whose factor
    diagonals are not all positive; their covariance is still taken as
    ``L L^T`` via ``factor_to_cov(..., allow_invalid=True)``.
    """

    landmarks: np.ndarray
    valid_factor: bool = True

    def __post_init__(self):
        lm = _frozen(self.landmarks)
        if lm.ndim != 2 or lm.shape[1] != STATE_WIDTH or lm.shape[0] < 1:
            raise ShapeError(f"pose state must be (K, 5) with K >= 1, got {lm.shape}")
        idx = _first_nonfinite(lm)
        if idx is not None:
            raise NonFiniteError(f"non-finite state entry at {idx}", index=idx)
        object.__setattr__(self, "landmarks", lm)
        if self.valid_factor and not diagonals_positive(lm):
            raise InvalidFactorError("state has a non-positive Cholesky diagonal")

    @classmethod
    def from_packed(cls, vector, valid_factor: bool | None = None) -> "PoseState":
        v = np.asarray(vector, dtype=np.float64)
        if v.ndim != 1 or v.size == 0 or v.size % STATE_WIDTH:
            raise ShapeError(f"packed state length must be a positive multiple of 5, got {v.shape}")
        lm = v.reshape(-1, STATE_WIDTH)
        if valid_factor is None:
            valid_factor = diagonals_positive(lm)
        return cls(lm, valid_factor=valid_factor)

    @property
    def num_landmarks(self) -> int:
        return self.landmarks.shape[0]

    @property
    def packed(self) -> np.ndarray:
        return self.landmarks.reshape(-1)

    @property
    def means(self) -> np.ndarray:
        return self.landmarks[:, :2]

    @property
    def factors(self) -> np.ndarray:
        return self.landmarks[:, 2:]

    def covariances(self) -> np.ndarray:
        """(K, 2, 2) covariances ``L L^T``; PSD even for invalid factors."""
        return factor_to_cov_batch(self.factors)


@dataclass(frozen=True)
class StateSequence:
    """Time-ordered pose states stored as a (T, K, 5) array."""

    frames: np.ndarray
    dt: int = 1

    def __post_init__(self):
        fr = _frozen(self.frames)
        if fr.ndim != 3 or fr.shape[2] != STATE_WIDTH or fr.shape[0] < 1 or fr.shape[1] < 1:
            raise ShapeError(f"state sequence must be (T, K, 5), got {fr.shape}")
        idx = _first_nonfinite(fr)
        if idx is not None:
            raise NonFiniteError(f"non-finite state entry at {idx}", index=idx)
        object.__setattr__(self, "frames", fr)

    @classmethod
    def from_states(cls, states: Iterable[PoseState], dt: int = 1) -> "StateSequence":
        states = list(states)
        if not states:
            raise ShapeError("empty state list")
        ks = {s.num_landmarks for s in states}
        if len(ks) != 1:
            raise ShapeError(f"frames disagree on K: {sorted(ks)}")
        return cls(np.stack([s.landmarks for s in states]), dt=dt)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, t: int) -> PoseState:
        lm = self.frames[t]
        return PoseState(lm, valid_factor=diagonals_positive(lm))

    @property
    def num_landmarks(self) -> int:
        return self.frames.shape[1]

    def packed(self) -> np.ndarray:
        """(T, 5K) matrix of packed states."""
        return self.frames.reshape(len(self), -1)


def diagonals_positive(landmarks) -> bool:
    lm = np.asarray(landmarks)
    return bool(np.all(lm[..., 2] > 0) and np.all(lm[..., 4] > 0))


# --------------------------------------------------------------------------
# Grid coordinates and softmax
# --------------------------------------------------------------------------


def grid_coords(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates ``(xs, ys)`` of shapes (W,) and (H,)."""
    if width < 1 or height < 1:
        raise ShapeError("grid needs at least one pixel per side")
    xs = (2.0 * np.arange(width) + 1.0 - width) / width
    ys = (2.0 * np.arange(height) + 1.0 - height) / height
    return xs, ys


def softmax_normalize(raw: ActivationMap, temperature: float = DEFAULT_TEMPERATURE) -> ActivationMap:
    """Per-part spatial softmax ``exp(v / tau) / sum exp(v / tau)``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = raw.parts
    idx = _first_nonfinite(v)
    if idx is not None:
        raise NonFiniteError(f"non-finite activation at (part, row, col) = {idx}", index=idx)
    z = v / temperature
    z = z - z.max(axis=(1, 2), keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=(1, 2), keepdims=True)
    return ActivationMap(p, normalized=True)


# --------------------------------------------------------------------------
# Cholesky factor <-> covariance
# --------------------------------------------------------------------------


def cholesky_batch(sigma) -> np.ndarray:
    """Closed-form 2x2 Cholesky over an array of shape (..., 2, 2).

    Returns (..., 3) as ``[l11, l21, l22]``. Only the lower triangle is read.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.shape[-2:] != (2, 2):
        raise ShapeError(f"expected (..., 2, 2), got {s.shape}")
    a = s[..., 0, 0]
    b = s[..., 1, 0]
    c = s[..., 1, 1]
    bad = ~(a > 0)
    if np.any(bad):
        i = np.argwhere(bad)[0]
        val = float(a[tuple(i)])
        raise NotPositiveDefiniteError(f"first pivot {val!r} is not positive", pivot=1, value=val)
    l11 = np.sqrt(a)
    l21 = b / l11
    p2 = c - l21 * l21
    bad = ~(p2 > 0)
    if np.any(bad):
        i = np.argwhere(bad)[0]
        val = float(p2[tuple(i)])
        raise NotPositiveDefiniteError(f"second pivot {val!r} is not positive", pivot=2, value=val)
    return np.stack([l11, l21, np.sqrt(p2)], axis=-1)


def cholesky_2x2(sigma) -> CholFactor:
    s = np.asarray(sigma, dtype=np.float64)
    if s.shape != (2, 2):
        raise ShapeError(f"expected a 2x2 matrix, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteError("sigma must be finite")
    (a, b), (b2, c) = s.tolist()
    if abs(b - b2) > SYMMETRY_TOL * max(1.0, abs(a), abs(b), abs(b2), abs(c)):
        raise ShapeError("sigma is not symmetric")
    # scalar path: same arithmetic as cholesky_batch, without array overhead
    if not a > 0:
        raise NotPositiveDefiniteError(f"first pivot {a!r} is not positive", pivot=1, value=a)
    l11 = math.sqrt(a)
    l21 = b2 / l11
    p2 = c - l21 * l21
    if not p2 > 0:
        raise NotPositiveDefiniteError(f"second pivot {p2!r} is not positive", pivot=2, value=p2)
    return CholFactor(l11, l21, math.sqrt(p2))


def factor_to_cov_batch(factors) -> np.ndarray:
    """``L L^T`` for (..., 3) factor triples; no sign checks."""
    f = np.asarray(factors, dtype=np.float64)
    l11, l21, l22 = f[..., 0], f[..., 1], f[..., 2]
    off = l11 * l21
    out = np.empty(f.shape[:-1] + (2, 2))
    out[..., 0, 0] = l11 * l11
    out[..., 0, 1] = off
    out[..., 1, 0] = off
    out[..., 1, 1] = l21 * l21 + l22 * l22
    return out


def factor_to_cov(factor, allow_invalid: bool = False) -> np.ndarray:
    """Covariance ``L L^T`` of a factor ``(l11, l21, l22)``.

    With ``allow_invalid`` the diagonal sign constraints are waived; the
    product is positive semidefinite for any finite triple.
    """
    if isinstance(factor, CholFactor):
        f = factor.as_array()
    else:
        f = np.asarray(factor, dtype=np.float64).reshape(-1)
    if f.shape != (3,):
        raise ShapeError(f"factor must have 3 entries, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("factor entries must be finite", index=_first_nonfinite(f))
    if not allow_invalid and not (f[0] > 0 and f[2] > 0):
        raise InvalidFactorError(f"diagonal must be positive, got l11={f[0]}, l22={f[2]}")
    return factor_to_cov_batch(f)


# --------------------------------------------------------------------------
# Moment fitting
# --------------------------------------------------------------------------


def moments(prob: ActivationMap) -> tuple[np.ndarray, np.ndarray]:
    """Unregularized mean (K, 2) and covariance (K, 2, 2) of every part."""
    if not prob.normalized:
        raise NotNormalizedError("moment fitting needs a normalized activation map")
    p = prob.parts
    xs, ys = grid_coords(prob.width, prob.height)
    px = p.sum(axis=1)  # (K, W) marginal over rows
    py = p.sum(axis=2)  # (K, H)
    mx = px @ xs
    my = py @ ys
    dx = xs[None, :] - mx[:, None]
    dy = ys[None, :] - my[:, None]
    sxx = np.einsum("kw,kw->k", px, dx * dx)
    syy = np.einsum("kh,kh->k", py, dy * dy)
    sxy = np.einsum("khw,kh,kw->k", p, dy, dx)
    mu = np.stack([mx, my], axis=1)
    sigma = np.empty((p.shape[0], 2, 2))
    sigma[:, 0, 0] = sxx
    sigma[:, 0, 1] = sxy
    sigma[:, 1, 0] = sxy
    sigma[:, 1, 1] = syy
    return mu, sigma


def fit_gaussians(prob: ActivationMap, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Fit every part at once; returns ``(mu, sigma + eps*I)``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    mu, sigma = moments(prob)
    sigma = sigma + eps * np.eye(2)
    try:
        cholesky_batch(sigma)
    except NotPositiveDefiniteError as err:
        bad = np.flatnonzero(~_pd_mask(sigma))
        raise DegenerateCovarianceError(
            f"part {int(bad[0])} has a degenerate covariance (pivot {err.pivot} = {err.value!r}); "
            "use eps > 0"
        ) from err
    return mu, sigma


def _pd_mask(sigma):
    a = sigma[..., 0, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        p2 = sigma[..., 1, 1] - sigma[..., 1, 0] ** 2 / a
    return (a > 0) & (p2 > 0)


def fit_gaussian(prob: ActivationMap, part: int, eps: float = DEFAULT_EPS) -> Gaussian2:
    """Mean and covariance of one normalized part map, plus ``eps * I``."""
    if not 0 <= part < prob.num_parts:
        raise IndexError(f"part {part} out of range for K={prob.num_parts}")
    sub = ActivationMap(prob.parts[part : part + 1], normalized=prob.normalized)
    mu, sigma = fit_gaussians(sub, eps)
    return Gaussian2(mu[0], sigma[0])


def fit_state(prob: ActivationMap, eps: float = DEFAULT_EPS) -> PoseState:
    mu, sigma = fit_gaussians(prob, eps)
    return PoseState(np.concatenate([mu, cholesky_batch(sigma)], axis=1))


# --------------------------------------------------------------------------
# Packing
# --------------------------------------------------------------------------


def pack_state(gaussians: Sequence[Gaussian2]) -> PoseState:
    gaussians = list(gaussians)
    if not gaussians:
        raise ShapeError("cannot pack an empty landmark list")
    for i, g in enumerate(gaussians):
        if not isinstance(g, Gaussian2):
            raise ShapeError(f"landmark {i} is not a Gaussian2")
    mu = np.stack([g.mu for g in gaussians])
    sigma = np.stack([g.sigma for g in gaussians])
    return PoseState(np.concatenate([mu, cholesky_batch(sigma)], axis=1))


def unpack_state(state: PoseState) -> list[Gaussian2]:
    if not state.valid_factor:
        raise InvalidFactorError("cannot unpack a state with invalid Cholesky factors")
    cov = state.covariances()
    return [Gaussian2(state.means[k], cov[k]) for k in range(state.num_landmarks)]
