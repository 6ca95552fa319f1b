"""Gaussian landmark pose states.

Landmarks are 2D Gaussians fitted to soft part maps, stored as a mean and
Cholesky factor per landmark, rendered back to heatmaps, blended linearly
in factor space and extrapolated in time by a residual LSTM.
"""

from .dynamics import LstmModel, RolloutConfig, TrainConfig, init_model, rollout, train
from .errors import GausskeyError
from .heatmap import Heatmap, fit_render_roundtrip, render_heatmap
from .interpolate import interpolate_sequence, lerp_state
from .state import (
    ActivationMap,
    CholFactor,
    Gaussian2,
    PoseState,
    StateSequence,
    cholesky_2x2,
    factor_to_cov,
    fit_gaussian,
    pack_state,
    softmax_normalize,
    unpack_state,
)
from .synthetic import TrajectorySpec, generate
from .tps import TpsWarp, random_tps, tps_apply, tps_fit

__all__ = [
    "ActivationMap",
    "CholFactor",
    "Gaussian2",
    "GausskeyError",
    "Heatmap",
    "LstmModel",
    "PoseState",
    "RolloutConfig",
    "StateSequence",
    "TpsWarp",
    "TrainConfig",
    "TrajectorySpec",
    "cholesky_2x2",
    "factor_to_cov",
    "fit_gaussian",
    "fit_render_roundtrip",
    "generate",
    "init_model",
    "interpolate_sequence",
    "lerp_state",
    "pack_state",
    "random_tps",
    "render_heatmap",
    "rollout",
    "softmax_normalize",
    "tps_apply",
    "tps_fit",
    "train",
    "unpack_state",
]
