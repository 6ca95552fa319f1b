"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
numbers before asserting, so ``pytest -v`` output doubles as the report.
"""

import time

import numpy as np
import pytest

from gausskey import dynamics
from gausskey.cli import main as cli_main
from gausskey.errors import NotPositiveDefiniteError
from gausskey.fileio import read_state_csv
from gausskey.heatmap import fit_render_roundtrip, heatmap_values
from gausskey.interpolate import lerp_state
from gausskey.metrics import fit_keypoint_regressor, pck_accuracy, psnr, ssim
from gausskey.state import PoseState, cholesky_2x2, cholesky_batch, factor_to_cov, factor_to_cov_batch
from gausskey.synthetic import generate_dataset
from gausskey.tps import tps_apply, tps_fit

# learnability protocol: 10 input frames, 10 supervised future frames
LEARN_TRAIN_SEQS = 200
LEARN_K = 4
LEARN_T = 40
LEARN_SPEED = 0.005
LEARN_HIDDEN = 128
LEARN_STEPS = 6000
LEARN_BATCH = 16
LEARN_TEST_SEQS = 50
LEARN_SEED_FRAMES = 10
LEARN_HORIZON = 100
LEARN_BUDGET_S = 600.0


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return emit


def _random_pd(gen, n):
    A = gen.normal(size=(n, 2, 2))
    return np.einsum("nji,njk->nik", A, A) + 1e-6 * np.eye(2)


def _random_sigma(gen, n, lo, hi):
    ev = gen.uniform(lo, hi, (n, 2))
    th = gen.uniform(0, np.pi, n)
    c, s = np.cos(th), np.sin(th)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return np.einsum("nij,nj,nkj->nik", R, ev, R)


def test_criterion_01_cholesky(report):
    gen = np.random.default_rng(101)
    sigma = _random_pd(gen, 10_000)
    start = time.perf_counter()
    factors = np.array([cholesky_2x2(s).as_array() for s in sigma])
    elapsed = time.perf_counter() - start
    worst = float(np.abs(factor_to_cov_batch(factors) - sigma).max())
    worst = max(worst, max(float(np.abs(factor_to_cov(f) - s).max()) for f, s in zip(factors[:100], sigma[:100])))
    batch = float(np.abs(factor_to_cov_batch(cholesky_batch(sigma)) - sigma).max())
    rejected = 0
    for s in ([[1.0, 2.0], [2.0, 1.0]], [[-1.0, 0.0], [0.0, 1.0]], [[0.0, 0.0], [0.0, 1.0]], [[1.0, 1.0], [1.0, 1.0]]):
        try:
            cholesky_2x2(s)
        except NotPositiveDefiniteError:
            rejected += 1
    ok = worst < 1e-10 and batch < 1e-10 and rejected == 4 and elapsed < 1.0
    report(1, "Cholesky", ok, f"max |LL^T - S| {worst:.2e} (batch {batch:.2e}), {rejected}/4 indefinite rejected, {elapsed:.3f} s")


def test_criterion_02_psd_under_anything(report):
    gen = np.random.default_rng(102)
    vectors = gen.normal(0, 3, (10_000, 5))
    lowest = min(float(np.linalg.eigvalsh(factor_to_cov(v[2:], allow_invalid=True)).min()) for v in vectors)
    report(2, "PSD for unconstrained factors", lowest >= -1e-12, f"min eigenvalue {lowest:.3e}")


def test_criterion_03_heatmap_point_checks(report):
    gen = np.random.default_rng(103)
    mu = gen.uniform(-0.8, 0.8, (100, 2))
    sigma = _random_sigma(gen, 100, 1e-3, 0.05)
    worst_peak = worst_half = 0.0
    for m, s in zip(mu, sigma):
        # a point at Mahalanobis distance 1 along a random direction
        u = gen.normal(size=2)
        L = np.linalg.cholesky(s)
        p = m + L @ (u / np.linalg.norm(u))
        worst_peak = max(worst_peak, abs(float(heatmap_values(m, s, m)) - 1.0))
        worst_half = max(worst_half, abs(float(heatmap_values(m, s, p)) - 0.5))
    ok = worst_peak <= 1e-12 and worst_half <= 1e-12
    report(3, "heatmap point checks", ok, f"|s(mu)-1| {worst_peak:.2e}, |s(d=1)-0.5| {worst_half:.2e}")


def test_criterion_04_interpolation_validity(report):
    gen = np.random.default_rng(104)
    alphas = np.linspace(0.0, 1.0, 11)
    invalid = inexact = 0
    for _ in range(10_000):
        K = int(gen.integers(1, 6))
        ends = []
        for _ in range(2):
            mu = gen.uniform(-1, 1, (K, 2))
            ends.append(PoseState(np.hstack([mu, cholesky_batch(_random_sigma(gen, K, 1e-4, 0.05))])))
        a, b = ends
        for alpha in alphas:
            try:
                out = lerp_state(a, b, float(alpha))
                PoseState(out.landmarks)
            except Exception:
                invalid += 1
                continue
            if alpha == 0.0 and out.landmarks.tobytes() != a.landmarks.tobytes():
                inexact += 1
            if alpha == 1.0 and out.landmarks.tobytes() != b.landmarks.tobytes():
                inexact += 1
    ok = invalid == 0 and inexact == 0
    report(4, "interpolation validity", ok, f"{invalid} invalid of 110000 blends, {inexact} inexact endpoints")


def test_criterion_05_fit_render_roundtrip(report):
    gen = np.random.default_rng(105)
    K = 30
    worst = 0.0
    counted = 0
    for _ in range(100):
        mu = gen.uniform(-0.9, 0.9, (K, 2))
        sigma = _random_sigma(gen, K, 1e-3, 0.02)
        out = fit_render_roundtrip(PoseState(np.hstack([mu, cholesky_batch(sigma)])), 128, 128)
        # interior: the 3-sigma box of the landmark lies inside the image
        reach = 3.0 * np.sqrt(np.stack([sigma[:, 0, 0], sigma[:, 1, 1]], axis=1))
        interior = np.all(np.abs(mu) + reach <= 1.0, axis=1)
        err = np.linalg.norm(out.means - mu, axis=1)[interior]
        counted += int(interior.sum())
        worst = max(worst, float(err.max(initial=0.0)))
    report(5, "fit/render round trip", worst < 0.01 and counted > 0, f"max interior mu error {worst:.2e} over {counted} landmarks")


def test_criterion_06_gradient_check(report):
    m = dynamics.init_model(1, hidden=4, seed=1, zero_head=False)
    cfg = dynamics.RolloutConfig(2, 2)
    gen = np.random.default_rng(106)
    base = gen.uniform(-0.5, 0.5, (3, 1, 1, 5))
    base[..., 2] = base[..., 4] = 0.1
    base[..., 3] = 0.0
    vel = gen.normal(0, 0.01, (3, 1, 1, 5))
    batch = (base + np.arange(cfg.window)[None, :, None, None] * vel).reshape(3, cfg.window, 5)
    _, grads = dynamics.backward(m, batch, cfg)
    analytic = dynamics.flatten_grads(m, grads)
    # central differences in extended precision, Richardson-extrapolated over
    # steps h and h/2 so truncation error is O(h^4); some components are
    # ~1e-10 against a loss of ~0.6, which plain O(h^2) differences cannot resolve
    LD = np.longdouble
    theta = m.theta.astype(LD)

    def central(h):
        out = np.empty(theta.size, dtype=LD)
        for i in range(theta.size):
            t = theta.copy()
            t[i] = theta[i] + h
            up = dynamics.forward_loss(m, batch, cfg, LD, t)
            t[i] = theta[i] - h
            out[i] = (up - dynamics.forward_loss(m, batch, cfg, LD, t)) / (2 * h)
        return out

    h = LD("1e-4")
    numeric = (4 * central(h / 2) - central(h)) / 3
    rel = float((np.abs(analytic - numeric) / np.maximum(np.abs(analytic), np.abs(numeric))).max())
    report(6, "BPTT gradient check", rel < 1e-4, f"max relative error {rel:.2e} over {theta.size} parameters")


@pytest.mark.slow
def test_criterion_07_learnability(report):
    start = time.perf_counter()
    train_set = generate_dataset("linear", LEARN_TRAIN_SEQS, LEARN_K, LEARN_T, seed=1, speed=LEARN_SPEED)
    test_set = generate_dataset(
        "linear", LEARN_TEST_SEQS, LEARN_K, LEARN_SEED_FRAMES + LEARN_HORIZON, seed=2, speed=LEARN_SPEED
    )
    model = dynamics.init_model(LEARN_K, hidden=LEARN_HIDDEN, seed=0)
    model, _ = dynamics.train(
        model,
        train_set,
        dynamics.RolloutConfig(10, 10),
        dynamics.TrainConfig(learning_rate=1e-4, weight_decay=5e-6, max_steps=LEARN_STEPS, batch_size=LEARN_BATCH, seed=0),
    )
    mu_err, model_mse, copy_mse = [], [], []
    for seq in test_set:
        truth = seq.frames[LEARN_SEED_FRAMES:]
        pred = dynamics.rollout(model, seq.frames[:LEARN_SEED_FRAMES], LEARN_HORIZON).frames[LEARN_SEED_FRAMES:]
        mu_err.append(np.linalg.norm(pred[:, :, :2] - truth[:, :, :2], axis=-1).mean())
        model_mse.append(np.mean((pred - truth) ** 2))
        copy_mse.append(np.mean((seq.frames[LEARN_SEED_FRAMES - 1][None] - truth) ** 2))
    elapsed = time.perf_counter() - start
    err = float(np.mean(mu_err))
    ratio = float(np.mean(copy_mse) / np.mean(model_mse))
    ok = err < 0.05 and ratio >= 5.0 and elapsed < LEARN_BUDGET_S
    report(7, "learnability", ok, f"mean mu error {err:.4f}, copy/model MSE ratio {ratio:.2f}, {elapsed:.0f} s")


def test_criterion_08_protocol_fidelity(report, tmp_path):
    csvs = []
    for seed in range(2):
        path = tmp_path / f"s{seed}.csv"
        assert cli_main(["synth", "--k", "3", "--t", "100", "--seed", str(seed), "--out", str(path)]) == 0
        csvs.append(str(path))
    ckpt = str(tmp_path / "m.bin")
    assert cli_main(["train", *csvs, "--n-inputs", "2", "--m-future", "2", "--steps", "2", "--hidden", "8", "--out", ckpt]) == 0
    counts = {}
    for seeds, horizon in ((2, 28), (10, 30), (2, 98)):
        out = tmp_path / f"p{seeds}_{horizon}.csv"
        code = cli_main(["predict", ckpt, csvs[0], "--seed-frames", str(seeds), "--horizon", str(horizon), "--out", str(out)])
        counts[(seeds, horizon)] = len(read_state_csv(out)) if code == 0 else None
    ok = counts == {(2, 28): 30, (10, 30): 40, (2, 98): 100}
    detail = ", ".join(f"{s}+{h}={n}" for (s, h), n in counts.items())
    report(8, "protocol fidelity", ok, detail)


def test_criterion_09_metrics(report):
    gen = np.random.default_rng(109)
    a = gen.uniform(size=(64, 64))
    self_ssim = ssim(a, a)
    base = gen.uniform(0, 0.9, (64, 64))
    offset_psnr = psnr(base, base + 0.1)
    # exact linear map from 2K landmark coordinates to 2 * 5 keypoint pixels
    X = gen.uniform(-1, 1, (2000, 20))
    W = gen.normal(0, 20, (20, 10))
    Y = X @ W
    reg = fit_keypoint_regressor(X, Y)
    pred = reg.predict(X).reshape(-1, 2)
    pck = pck_accuracy(pred, Y.reshape(-1, 2), 6.0)
    ok = self_ssim == 1.0 and offset_psnr == 20.0 and pck == 1.0
    report(9, "metrics sanity", ok, f"SSIM(a,a)={self_ssim!r}, PSNR(0.1 offset)={offset_psnr!r} dB, PCK@6px={pck}")


def test_criterion_10_tps(report):
    gen = np.random.default_rng(110)
    interp = affine_w = 0.0
    for _ in range(100):
        n = int(gen.integers(5, 30))
        src = gen.uniform(-1, 1, (n, 2))
        dst = src + gen.normal(0, 0.1, (n, 2))
        warp = tps_fit(src, dst, lam=0.0)
        interp = max(interp, float(np.abs(tps_apply(warp, src) - dst).max()))
        A = gen.normal(size=(2, 2))
        t = gen.normal(size=2)
        aff = tps_fit(src, src @ A.T + t, lam=0.0)
        affine_w = max(affine_w, float(np.abs(aff.weights).max()))
    ok = interp <= 1e-8 and affine_w <= 1e-8
    report(10, "TPS", ok, f"max control-point error {interp:.2e}, max affine-case weight {affine_w:.2e}")
