"""Synthetic landmark trajectories standing in for an image encoder.

Three motion families:

* ``linear``    constant velocity, ``mu_t = mu_0 + t v``
* ``lissajous`` independent sinusoids per axis with per-landmark phases
* ``pendulum``  each landmark is the bob of its own pendulum with
  ``theta'' = -sin(theta)``, integrated by RK4 at ``dt = 0.05`` per frame

and three covariance behaviours: ``fixed``, ``breathing`` (eigenvalues
scaled by ``1 + 0.5 sin``) and ``rotating`` (principal axis precessing at
a constant rate). Eigenvalues always stay inside [1e-4, 0.05] and means
inside [-0.9, 0.9]^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .heatmap import Heatmap, render_heatmap
from .state import PoseState, StateSequence, cholesky_batch

KINDS = ("linear", "lissajous", "pendulum")
COVARIANCE_MODES = ("fixed", "breathing", "rotating")
MEAN_LIMIT = 0.9
EIG_MIN = 1e-4
EIG_MAX = 0.05
PENDULUM_DT = 0.05
GRAVITY_OVER_LENGTH = 1.0


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "linear"
    num_landmarks: int = 4
    num_frames: int = 40
    seed: int = 0
    noise_sigma: float = 0.0
    covariance_mode: str = "fixed"
    # linear: max per-frame displacement; lissajous: max angular rate (rad/frame)
    speed: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; choose from {KINDS}")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ValueError(f"unknown covariance mode {self.covariance_mode!r}; choose from {COVARIANCE_MODES}")
        if self.num_landmarks < 1:
            raise ValueError("num_landmarks must be >= 1")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if self.noise_sigma < 0 or self.speed < 0:
            raise ValueError("noise_sigma and speed must be nonnegative")
        if self.kind == "linear" and self.speed * (self.num_frames - 1) >= MEAN_LIMIT:
            raise ValueError(
                f"linear motion at speed {self.speed} over {self.num_frames} frames cannot stay inside "
                f"[-{MEAN_LIMIT}, {MEAN_LIMIT}]"
            )


def _pendulum_rhs(y):
    return np.array([y[1], -GRAVITY_OVER_LENGTH * np.sin(y[0])])


def rk4_step(y, dt):
    k1 = _pendulum_rhs(y)
    k2 = _pendulum_rhs(y + 0.5 * dt * k1)
    k3 = _pendulum_rhs(y + 0.5 * dt * k2)
    k4 = _pendulum_rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def pendulum_path(theta0: float, steps: int, dt: float = PENDULUM_DT, omega0: float = 0.0) -> np.ndarray:
    """(steps + 1, 2) array of ``(theta, omega)`` starting from the initial condition."""
    out = np.empty((steps + 1, 2))
    y = np.array([theta0, omega0], dtype=np.float64)
    out[0] = y
    for i in range(steps):
        y = rk4_step(y, dt)
        out[i + 1] = y
    return out


def pendulum_energy(path) -> np.ndarray:
    path = np.asarray(path)
    return 0.5 * path[..., 1] ** 2 + GRAVITY_OVER_LENGTH * (1.0 - np.cos(path[..., 0]))


def _means(spec: TrajectorySpec, gen: np.random.Generator) -> np.ndarray:
    K, T = spec.num_landmarks, spec.num_frames
    t = np.arange(T, dtype=np.float64)
    if spec.kind == "linear":
        ang = gen.uniform(0, 2 * np.pi, K)
        mag = gen.uniform(0, spec.speed, K)
        v = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
        # start box independent of v, so position carries no velocity cue
        reach = MEAN_LIMIT - spec.speed * (T - 1)
        mu0 = gen.uniform(-reach, reach, (K, 2))
        return mu0[None] + t[:, None, None] * v[None]
    if spec.kind == "lissajous":
        amp = gen.uniform(0.1, 0.3, (K, 2))
        center = gen.uniform(-MEAN_LIMIT + amp, MEAN_LIMIT - amp)
        rate = gen.uniform(0.25, 1.0, (K, 2)) * spec.speed
        phase = gen.uniform(0, 2 * np.pi, (K, 2))
        return center[None] + amp[None] * np.sin(rate[None] * t[:, None, None] + phase[None])
    # pendulum
    length = gen.uniform(0.2, 0.4, K)
    theta0 = gen.uniform(-1.0, 1.0, K)
    px = gen.uniform(-MEAN_LIMIT + length, MEAN_LIMIT - length)
    py = gen.uniform(-MEAN_LIMIT, MEAN_LIMIT - length)
    mu = np.empty((T, K, 2))
    for k in range(K):
        th = pendulum_path(theta0[k], T - 1)[:, 0]
        mu[:, k, 0] = px[k] + length[k] * np.sin(th)
        mu[:, k, 1] = py[k] + length[k] * np.cos(th)
    return mu


def _covariances(spec: TrajectorySpec, gen: np.random.Generator) -> np.ndarray:
    K, T = spec.num_landmarks, spec.num_frames
    t = np.arange(T, dtype=np.float64)[:, None]
    # base eigenvalues leave room for the breathing scale in [0.5, 1.5]
    eig = gen.uniform(2e-3, 0.02, (K, 2))
    angle0 = gen.uniform(0, np.pi, K)
    scale = np.ones((T, K))
    angle = np.broadcast_to(angle0, (T, K)).copy()
    if spec.covariance_mode == "breathing":
        rate = gen.uniform(0.05, 0.2, K)
        phase = gen.uniform(0, 2 * np.pi, K)
        scale = 1.0 + 0.5 * np.sin(rate * t + phase)
    elif spec.covariance_mode == "rotating":
        rate = gen.uniform(-0.05, 0.05, K)
        angle = angle0 + rate * t
    ev = np.clip(eig[None] * scale[..., None], EIG_MIN, EIG_MAX)
    c, s = np.cos(angle), np.sin(angle)
    sigma = np.empty((T, K, 2, 2))
    sigma[..., 0, 0] = c * c * ev[..., 0] + s * s * ev[..., 1]
    sigma[..., 1, 1] = s * s * ev[..., 0] + c * c * ev[..., 1]
    sigma[..., 0, 1] = sigma[..., 1, 0] = c * s * (ev[..., 0] - ev[..., 1])
    return sigma


def generate_states(spec: TrajectorySpec) -> StateSequence:
    gen = _rng.stream(spec.seed, f"synthetic.{spec.kind}")
    mu = _means(spec, gen)
    factors = cholesky_batch(_covariances(spec, gen))
    if spec.noise_sigma > 0:
        noise = _rng.stream(spec.seed, "synthetic.noise")
        mu = mu + noise.normal(0.0, spec.noise_sigma, mu.shape)
    mu = np.clip(mu, -MEAN_LIMIT, MEAN_LIMIT)
    return StateSequence(np.concatenate([mu, factors], axis=2))


def generate(spec: TrajectorySpec, render_size: int | None = None) -> tuple[StateSequence, list[Heatmap] | None]:
    """States for ``spec`` and, if ``render_size`` is given, square heatmap frames."""
    seq = generate_states(spec)
    frames = None
    if render_size is not None:
        frames = [render_heatmap(seq[t], render_size, render_size) for t in range(len(seq))]
    return seq, frames


def generate_dataset(kind: str, count: int, num_landmarks: int, num_frames: int, seed: int, **kw) -> list[StateSequence]:
    """``count`` independent sequences; sequence i uses seed ``seed * 1_000_003 + i``."""
    return [
        generate_states(TrajectorySpec(kind, num_landmarks, num_frames, seed * 1_000_003 + i, **kw))
        for i in range(count)
    ]
