import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gausskey.errors import RankDeficientError, ShapeError
from gausskey.metrics import (
    RegressionMap,
    fit_keypoint_regressor,
    gaussian_window,
    multichannel_psnr,
    pck_accuracy,
    pck_curve,
    psnr,
    psnr_capped,
    ssim,
)

C1 = 0.01**2
C2 = 0.03**2


def _ssim_brute(a, b):
    """Direct window-by-window SSIM with the 11x11 Gaussian weights."""
    w1 = gaussian_window()
    w = np.outer(w1, w1)
    H, W = a.shape
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            pa = a[i : i + 11, j : j + 11]
            pb = b[i : i + 11, j : j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cab = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + C1) * (2 * cab + C2) / ((ma * ma + mb * mb + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def _skimage(a, b):
    return structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, win_size=11
    )


class TestPsnr:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(8, 8))
        assert psnr(a, a) == math.inf
        assert psnr_capped(a, a) == 99.0

    def test_uniform_offset_is_20db(self):
        a = np.random.default_rng(1).uniform(0, 0.9, (32, 32))
        assert psnr(a, a + 0.1) == 20.0
        assert psnr(np.zeros((5, 7)), np.full((5, 7), 0.1)) == 20.0

    def test_brute_force_and_symmetry(self):
        gen = np.random.default_rng(2)
        for _ in range(20):
            a, b = gen.uniform(size=(2, 13, 17))
            mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
            assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-10
            assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_multichannel_mean(self):
        gen = np.random.default_rng(3)
        a, b = gen.uniform(size=(2, 3, 8, 8))
        assert multichannel_psnr(a, b) == pytest.approx(np.mean([psnr(x, y) for x, y in zip(a, b)]), abs=1e-12)


class TestSsim:
    def test_identical(self):
        a = np.random.default_rng(4).uniform(size=(20, 24))
        assert ssim(a, a) == 1.0

    def test_matches_brute_force_and_skimage(self):
        gen = np.random.default_rng(5)
        for _ in range(3):
            a = gen.uniform(size=(16, 19))
            b = np.clip(a + gen.normal(0, 0.1, a.shape), 0, 1)
            ref = _ssim_brute(a, b)
            assert abs(ssim(a, b) - ref) < 1e-10
            assert abs(ssim(a, b) - _skimage(a, b)) < 1e-10

    def test_binary_complement(self):
        gen = np.random.default_rng(6)
        a = (gen.uniform(size=(24, 24)) > 0.5).astype(float)
        value = ssim(a, 1 - a)
        assert value < 0.5
        assert abs(value - _ssim_brute(a, 1 - a)) < 1e-10
        assert abs(value - _skimage(a, 1 - a)) < 1e-10

    def test_constant_images(self):
        ma, mb = 0.3, 0.55
        expected = (2 * ma * mb + C1) / (ma * ma + mb * mb + C1)
        assert ssim(np.full((12, 12), ma), np.full((12, 12), mb)) == pytest.approx(expected, rel=1e-12)

    def test_translation_invariance(self):
        gen = np.random.default_rng(7)
        big_a = gen.uniform(size=(30, 30))
        big_b = np.clip(big_a + gen.normal(0, 0.2, big_a.shape), 0, 1)
        s0 = ssim(big_a[2:26, 3:27], big_b[2:26, 3:27])
        # shifting both crops by a whole pixel changes only which windows are counted;
        # the shared windows give identical values
        from gausskey.metrics import ssim_map

        m0 = ssim_map(big_a[2:26, 3:27], big_b[2:26, 3:27])
        m1 = ssim_map(big_a[3:27, 3:27], big_b[3:27, 3:27])
        np.testing.assert_allclose(m0[1:], m1[:-1], atol=1e-12)
        assert -1 <= s0 <= 1

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((10, 20)), np.zeros((10, 20)))

    def test_multichannel(self):
        gen = np.random.default_rng(8)
        a, b = gen.uniform(size=(2, 2, 12, 12))
        assert ssim(a, b) == pytest.approx((ssim(a[0], b[0]) + ssim(a[1], b[1])) / 2, abs=1e-15)


class TestRegressor:
    def test_selection_matrix(self):
        gen = np.random.default_rng(9)
        X = gen.normal(size=(200, 8))
        Y = X[:, [2, 3, 6, 7]]
        W = fit_keypoint_regressor(X, Y).weights
        S = np.zeros((8, 4))
        S[[2, 3, 6, 7], [0, 1, 2, 3]] = 1
        assert np.abs(W - S).max() < 1e-8

    def test_scaling(self):
        X = np.random.default_rng(10).normal(size=(50, 6))
        np.testing.assert_allclose(fit_keypoint_regressor(X, 2 * X).weights, 2 * np.eye(6), atol=1e-8)

    def test_matches_pseudo_inverse(self):
        gen = np.random.default_rng(11)
        X = gen.normal(size=(100, 10))
        Y = gen.normal(size=(100, 4))
        W = fit_keypoint_regressor(X, Y).weights
        np.testing.assert_allclose(W, np.linalg.pinv(X) @ Y, atol=1e-8)
        # normal-equation residual is orthogonal to the inputs
        assert np.abs(X.T @ (Y - X @ W)).max() < 1e-6

    def test_no_intercept(self):
        m = fit_keypoint_regressor(np.random.default_rng(12).normal(size=(20, 4)), np.ones((20, 2)))
        np.testing.assert_array_equal(m.predict(np.zeros(4)), np.zeros(2))

    def test_rank_deficient(self):
        gen = np.random.default_rng(13)
        with pytest.raises(RankDeficientError):
            fit_keypoint_regressor(gen.normal(size=(3, 6)), gen.normal(size=(3, 2)))
        x = gen.normal(size=(50, 1))
        with pytest.raises(RankDeficientError):
            fit_keypoint_regressor(np.hstack([x, x]), gen.normal(size=(50, 2)))

    def test_json(self):
        m = RegressionMap(np.random.default_rng(14).normal(size=(4, 2)))
        np.testing.assert_array_equal(RegressionMap.from_json(m.to_json()).weights, m.weights)


class TestPck:
    def test_perfect(self):
        t = np.random.default_rng(15).uniform(0, 100, (10, 2))
        assert pck_accuracy(t, t, 6.0) == 1.0

    def test_boundary_inclusive(self):
        t = np.zeros((4, 2))
        p = np.array([[6.0, 0], [0, 6.0], [-6.0, 0], [0, -6.0]])
        assert pck_accuracy(p, t, 6.0) == 1.0
        assert pck_accuracy(p, t, 5.999) == 0.0

    def test_monotone(self):
        gen = np.random.default_rng(16)
        p, t = gen.uniform(0, 20, (2, 50, 2))
        curve = pck_curve(p, t, np.linspace(0.5, 30, 60))
        acc = [a for _, a in curve]
        assert all(x <= y for x, y in zip(acc, acc[1:]))

    def test_errors(self):
        with pytest.raises(ShapeError):
            pck_accuracy(np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            pck_accuracy(np.zeros((3, 2)), np.zeros((3, 2)), 0.0)
