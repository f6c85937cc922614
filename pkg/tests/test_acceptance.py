"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Criteria 7 and 8 train three desk-scale models and run latent inpainting on
held-out images; together they take several minutes. Deselect them with
``-m "not slow"``.
"""

import math
import time

import numpy as np
import pytest

from qgan import metrics
from qgan.dataio import SyntheticSpec, load_checkpoint, save_checkpoint, synth_dataset
from qgan.gan import TrainConfig, gan_value, generator_forward, sample_latent, train
from qgan.gradcheck import default_suite
from qgan.inpaint import (
    InpaintConfig,
    conjugate_gradient,
    inpaint,
    make_center_mask,
    make_diag_mask,
    mean_fill,
    missing_fraction,
    poisson_fuse,
    poisson_system,
)
from qgan.qalgebra import PureQuaternion, RotationParams, rotation_matrices, sandwich
from qgan.qlayers import QBNState, QConvKernel, planes, qbn_forward_infer, qbn_forward_train, qconv_forward, qdeconv_forward

TRAIN_SEEDS = (0, 1, 2)
TRAIN_DATA = SyntheticSpec(kind="colored-shapes", side=32, count=64, seed=100)
HELD_OUT = SyntheticSpec(kind="colored-shapes", side=32, count=16, seed=999)


def random_kernel(rng, o, c, d, stride=1, padding=0):
    s = rng.uniform(0.3, 1.5, size=(o, c, d, d)) * rng.choice([-1, 1], size=(o, c, d, d))
    th = rng.uniform(-math.pi, math.pi, size=(o, c, d, d))
    return QConvKernel(s, th, stride, padding)


def sandwich_conv_1ch(x, k):
    """Single-channel quaternion convolution as an explicit sum of sandwich products."""
    _, _, h, w = x.shape
    d = k.size
    xq = planes(x)[0, 0]
    out = np.zeros((3, h - d + 1, w - d + 1))
    for i in range(h - d + 1):
        for j in range(w - d + 1):
            for u in range(d):
                for v in range(d):
                    q = PureQuaternion(*xq[:, i + u, j + v])
                    out[:, i, j] += sandwich(k.tap(0, 0, u, v), q).to_vector()
    return out.reshape(1, 3, h - d + 1, w - d + 1)


def test_c01_rotation_algebra(record):
    t0 = time.perf_counter()
    theta = np.random.default_rng(0).uniform(-math.pi, math.pi, size=1000)
    R = rotation_matrices(np.ones(1000), theta)
    orth = np.max(np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)))
    det = np.max(np.abs(np.linalg.det(R) - 1))
    c = np.random.default_rng(1).uniform(-1, 1, size=1000)
    gray = np.max(np.abs(np.einsum("nij,nj->ni", R, np.repeat(c[:, None], 3, 1)) - c[:, None]))
    dt = time.perf_counter() - t0
    ok = orth < 1e-12 and det < 1e-12 and gray < 1e-14 and dt < 1.0
    assert record(1, "rotation algebra", ok, f"orth {orth:.1e} det {det:.1e} gray {gray:.1e} in {dt:.2f}s")


def test_c02_sandwich_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        k = random_kernel(rng, 1, 1, 3)
        x = rng.normal(size=(1, 3, 5, 5))
        worst = max(worst, float(np.max(np.abs(qconv_forward(x, k) - sandwich_conv_1ch(x, k)))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-12 and dt < 5.0
    assert record(2, "sandwich-product oracle", ok, f"max abs err {worst:.1e} over 100 cases in {dt:.2f}s")


def test_c03_adjointness(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        stride, padding, d = int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.integers(3, 5))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = random_kernel(rng, cout, cin, d, stride, padding)
        size = d + stride * int(rng.integers(1, 5))
        size += (size + 2 * padding - d) % stride
        x = rng.normal(size=(int(rng.integers(1, 3)), 3 * cin, size, size))
        y = qconv_forward(x, k)
        g = rng.normal(size=y.shape)
        lhs, rhs = float(np.sum(y * g)), float(np.sum(x * qdeconv_forward(g, k)))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-10 and dt < 10.0
    assert record(3, "conv/deconv adjointness", ok, f"worst residual {worst:.1e} over 50 configs in {dt:.2f}s")


def test_c04_gradient_checks(record):
    t0 = time.perf_counter()
    reports = default_suite(step=1e-5, tol=1e-4, e2e_tol=1e-3)
    dt = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    ok = not failed and dt < 120
    detail = f"{len(reports)} checks, worst rel err {worst:.1e} in {dt:.1f}s"
    if failed:
        detail += f"; failed: {', '.join(failed)}"
    assert record(4, "gradient checks", ok, detail)


def test_c05_qbn_statistics(record):
    rng = np.random.default_rng(5)
    st = QBNState.create(4)
    x = rng.normal(size=(8, 12, 5, 5)) * 3.0 + rng.normal(size=(1, 12, 1, 1)) * 4
    y, cache = qbn_forward_train(x, st)
    p = planes(y)
    mean = p.mean(axis=(0, 3, 4))
    mean_norm = float(np.max(np.linalg.norm(mean, axis=1)))
    var = np.mean(np.sum((p - mean[None, :, :, None, None]) ** 2, axis=2), axis=(0, 2, 3))
    var_err = float(np.max(np.abs(var - cache.var / (cache.var + st.epsilon))))

    m = 8 * 5 * 5
    st.running_mean = cache.mean.copy()
    st.running_var = cache.var * (m - 1) / m
    st.count = m
    infer_err = float(np.max(np.abs(qbn_forward_infer(x, st) - y)))
    ok = mean_norm < 1e-6 and var_err < 1e-4 and infer_err < 1e-6
    assert record(5, "QBN statistics", ok, f"mean norm {mean_norm:.1e} var err {var_err:.1e} infer err {infer_err:.1e}")


def test_c06_loss_anchors(record):
    loss_d, loss_g = gan_value(np.full(8, 0.5), np.full(8, 0.5))
    ok = loss_d == 2 * math.log(2) and loss_g == math.log(2)
    assert record(6, "GAN loss anchors", ok, f"loss_D {loss_d!r} loss_G {loss_g!r}")


@pytest.fixture(scope="module")
def trained_runs(tmp_path_factory):
    data = synth_dataset(TRAIN_DATA)
    out = tmp_path_factory.mktemp("acceptance")
    runs = {}
    t0 = time.perf_counter()
    for seed in TRAIN_SEEDS:
        try:
            model, rows = train(data, TrainConfig(iterations=2000, seed=seed))
        except Exception as exc:  # reported as a failed run
            runs[seed] = (None, None, repr(exc))
            continue
        save_checkpoint(model, out / f"seed{seed}.bin")
        runs[seed] = (out / f"seed{seed}.bin", np.array(rows), None)
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_c07_training_stability(record, trained_runs):
    runs, dt = trained_runs
    parts, ok = [], dt < 15 * 60
    for seed, (_, rows, err) in runs.items():
        if err is not None:
            parts.append(f"seed {seed}: {err}")
            ok = False
            continue
        finite = bool(np.all(np.isfinite(rows)))
        trail = float(rows[-500:, 1].mean())
        ok = ok and finite and trail > 0.05
        parts.append(f"seed {seed} trailing loss_D {trail:.3f}")
    assert record(7, "training stability", ok, "; ".join(parts) + f" in {dt / 60:.1f} min")


@pytest.mark.slow
def test_c08_inpainting_beats_mean_fill(record, trained_runs):
    runs, _ = trained_runs
    path = runs[TRAIN_SEEDS[0]][0]
    if path is None:
        record(8, "inpainting vs mean fill", False, "no checkpoint from criterion 7")
        pytest.fail("no checkpoint")
    model = load_checkpoint(path)
    truth = synth_dataset(HELD_OUT)
    t0 = time.perf_counter()
    parts, ok = [], True
    for kind, mask, lo, hi, margin in (
        ("center", make_center_mask(32, 32), 0.15, 0.17, 3.0),
        ("diag", make_diag_mask(32, 32), 0.35, 0.37, 1.5),
    ):
        frac = missing_fraction(mask)
        y = truth * mask[None, None]
        res = inpaint(y, mask, model, InpaintConfig(), truth=truth)
        ours = float(np.mean([r["psnr"] for r in res.rows]))
        base = float(np.mean([metrics.report(mean_fill(y[i], mask), truth[i]).psnr for i in range(len(truth))]))
        gain = ours - base
        ok = ok and lo <= frac <= hi and gain >= margin
        parts.append(f"{kind} frac {frac:.3f} psnr {ours:.2f} vs {base:.2f} ({gain:+.2f} dB, need {margin:+.1f})")
    dt = time.perf_counter() - t0
    ok = ok and dt < 10 * 60
    assert record(8, "inpainting vs mean fill", ok, "; ".join(parts) + f" in {dt / 60:.1f} min")


def test_c09_poisson_fusion(record):
    rng = np.random.default_rng(9)
    mask = np.ones((16, 16))
    mask[4:12, 4:12] = 0
    guide, boundary = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
    A, b, _ = poisson_system(mask, guide, boundary)
    x, _, _ = conjugate_gradient(A, b)
    dense = np.linalg.solve(A.toarray(), b)
    dense_err = float(np.max(np.abs(x - dense)))

    y = np.full((3, 16, 16), 0.3) * mask
    const_ok = np.array_equal(poisson_fuse(y, mask, np.full((3, 16, 16), -0.8)), np.full((3, 16, 16), 0.3))
    full = rng.uniform(-1, 1, size=(3, 16, 16))
    identity_ok = np.array_equal(poisson_fuse(full, np.ones((16, 16)), rng.normal(size=(3, 16, 16))), full)
    ok = dense_err < 1e-8 and const_ok and identity_ok
    assert record(9, "Poisson fusion", ok, f"CG vs dense {dense_err:.1e}; constant {const_ok}; no-hole {identity_ok}")


def test_c10_metric_sanity(record):
    rng = np.random.default_rng(10)
    x = rng.uniform(0, 255, size=(3, 32, 32))
    self_ssim = metrics.ssim(x, x)
    zero_max = metrics.psnr(np.zeros((3, 16, 16)), np.full((3, 16, 16), 255.0))
    noise = rng.normal(size=x.shape)
    curve = [metrics.psnr(x, x + a * noise) for a in (0.5, 1, 2, 4, 8, 16, 32)]
    monotone = all(a > b for a, b in zip(curve, curve[1:]))
    ok = abs(self_ssim - 1.0) < 1e-12 and zero_max == 0.0 and monotone
    assert record(10, "metric sanity", ok, f"ssim(x,x) {self_ssim:.12f} psnr(0,max) {zero_max} monotone {monotone}")


def test_c11_determinism_and_persistence(record, tmp_path):
    cfg = TrainConfig(image_size=16, latent_dim=4, g_channels=(4, 4), d_channels=(4, 4), batch_size=4,
                      iterations=60, seed=11)
    data = synth_dataset(SyntheticSpec(side=16, count=8, seed=3))
    model, _ = train(data, cfg, loss_csv=tmp_path / "a.csv")
    train(data, cfg, loss_csv=tmp_path / "b.csv")
    same_csv = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    save_checkpoint(model, tmp_path / "m.bin")
    loaded = load_checkpoint(tmp_path / "m.bin")
    z = sample_latent(np.random.default_rng(0), 8, cfg.latent_dim)
    model.G.eval()
    loaded.G.eval()
    same_forward = np.array_equal(generator_forward(z, model.G), generator_forward(z, loaded.G))
    ok = same_csv and same_forward
    assert record(11, "determinism and persistence", ok, f"identical CSVs {same_csv}; bitwise forward {same_forward}")
