"""Image and keypoint evaluation: PSNR, SSIM, PCK and landmark regression."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import RankDeficientError, ShapeError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
RIDGE = 1e-8
MAX_CONDITION = 1e10
PCK_THRESHOLD_PX = 6.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images on [0, 1].

    Identical images give ``inf``; use ``psnr_capped`` for tabular output.
    """
    a, b = _pair(a, b)
    # exactly rounded sum, so the result does not depend on summation order
    mse = math.fsum(((a - b) ** 2).ravel()) / a.size
    if mse == 0:
        return math.inf
    # 10 log10(1 / mse) in RMSE form: the square root halves the relative
    # rounding error, so a uniform 0.1 offset reports 20 dB exactly
    return -20.0 * math.log10(math.sqrt(mse))


def psnr_capped(a, b) -> float:
    return min(psnr(a, b), PSNR_CAP_DB)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    r = len(w) // 2
    out = ndimage.correlate1d(img, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out


def ssim_map(a, b) -> np.ndarray:
    """SSIM at every window position fully inside both images."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError("ssim_map expects a single-channel image")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a * mu_a
    sbb = _filter_valid(b * b, w) - mu_b * mu_b
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean single-scale SSIM; (C, H, W) inputs are averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(x, y) for x, y in zip(a, b)]))
    return float(ssim_map(a, b).mean())


def multichannel_psnr(a, b) -> float:
    """Per-channel PSNR averaged over the leading axis of (C, H, W) images."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return psnr(a, b)
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


@dataclass(frozen=True)
class RegressionMap:
    """Linear map from flattened landmark coordinates to keypoints, no intercept.

    ``weights`` has shape (2K, 2J) and acts as ``keypoints = landmarks @ weights``.
    """

    weights: np.ndarray

    def predict(self, landmark_mu) -> np.ndarray:
        x = np.asarray(landmark_mu, dtype=np.float64)
        return x @ self.weights

    def to_json(self) -> str:
        return json.dumps({"weights": self.weights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "RegressionMap":
        return cls(np.array(json.loads(text)["weights"], dtype=np.float64))


def fit_keypoint_regressor(landmark_mu, keypoints, ridge: float = RIDGE) -> RegressionMap:
    """Least squares through the origin via ridge-stabilized normal equations.

    Both inputs are (N, 2K) and (N, 2J) coordinate matrices already
    centered on the crop origin.
    """
    X = np.asarray(landmark_mu, dtype=np.float64)
    Y = np.asarray(keypoints, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"incompatible design {X.shape} and targets {Y.shape}")
    if X.shape[0] < X.shape[1]:
        raise RankDeficientError(f"need at least {X.shape[1]} samples, got {X.shape[0]}")
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise RankDeficientError(f"design has rank {rank} < {X.shape[1]} columns")
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    cond = np.linalg.cond(gram)
    if not cond < MAX_CONDITION:
        raise RankDeficientError(f"design is rank deficient (condition number {cond:.3g})")
    return RegressionMap(np.linalg.solve(gram, X.T @ Y))


def pck_accuracy(predicted, target, threshold: float = PCK_THRESHOLD_PX) -> float:
    """Fraction of keypoints whose Euclidean error is at most ``threshold``.

    The boundary counts as correct. Accepts (J, 2) or (N, J, 2).
    """
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != 2:
        raise ShapeError(f"keypoint arrays differ: {p.shape} vs {t.shape}")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    err = np.linalg.norm(p - t, axis=-1)
    return float(np.mean(err <= threshold))


def pck_curve(predicted, target, thresholds) -> list[tuple[float, float]]:
    return [(float(th), pck_accuracy(predicted, target, th)) for th in thresholds]
