"""Linear blending of pose states in (mean, Cholesky factor) space.

Convex blends of valid factors keep positive diagonals, so interpolation
never leaves the valid set. Extrapolation (alpha outside [0, 1]) may
produce non-positive diagonals; those states come back tagged
``valid_factor=False`` and still map to PSD covariances through ``L L^T``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .state import PoseState, StateSequence, diagonals_positive


def lerp_state(a: PoseState, b: PoseState, alpha: float) -> PoseState:
    if a.num_landmarks != b.num_landmarks:
        raise ShapeError(f"endpoint K mismatch: {a.num_landmarks} vs {b.num_landmarks}")
    # exact at alpha in {0, 1}
    if alpha == 0:
        out = a.landmarks
    elif alpha == 1:
        out = b.landmarks
    else:
        out = (1.0 - alpha) * a.landmarks + alpha * b.landmarks
    return PoseState(out, valid_factor=diagonals_positive(out))


def interpolate_sequence(a: PoseState, b: PoseState, steps: int) -> StateSequence:
    """``steps`` frames at alpha = i / (steps - 1); endpoints are a and b."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    frames = [lerp_state(a, b, i / (steps - 1)) for i in range(steps)]
    return StateSequence.from_states(frames)
