"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line through the ``acceptance`` fixture; the
lines are printed in the terminal summary after the run.
"""

import time

import numpy as np

from conftest import central_diff, rel_err
from voxface.audio import Waveform, hz_to_mel, mel_centers, melspectrogram, normalize_per_bin
from voxface.fitting import FitConfig, extract_landmarks, fit_coefficients
from voxface.harness import binomial_quantile, evaluate, fit_oracle, is_eval_name
from voxface.losses import (
    LogitsBatch,
    conditional_probs,
    conditional_probs_vjp,
    cosine_kernel,
    cosine_kernel_grad,
    gan_fake_loss,
    gan_real_loss,
    kd_divergence,
    kd_loss,
    pgt_loss,
    reg_loss,
    supervised_loss,
    triplet_loss,
    unsupervised_loss,
)
from voxface.metrics import (
    absolute_ratio_error,
    icp_point_to_plane,
    icp_point_to_plane_detail,
    mean_are,
    nme,
    part_rmse,
    relative_gain,
)
from voxface.morphable import (
    Mesh,
    PoseParams,
    apply_pose,
    reconstruct,
    rotation_about_axis,
    rotation_angle,
    synthetic_basis,
)
from voxface.nnkit import (
    MlpModel,
    TrainConfig,
    backward,
    forward,
    linear_expert,
    make_synthetic_dataset,
    train_distilled,
    train_supervised,
)


def check(acceptance, name, ok, detail=""):
    acceptance(name, ok, detail)
    assert ok, f"{name}: {detail}"


def test_ac1_binomial_threshold(acceptance):
    t0 = time.perf_counter()
    b = binomial_quantile(1540, 0.5, 0.999)
    dt = time.perf_counter() - t0
    check(acceptance, "AC1 binomial threshold", b == 831 and dt < 1.0, f"b={b} time={dt:.3f}s")


def test_ac2_ratio_mean_and_gain(acceptance):
    m = mean_are({"ER": 0.0152, "FR": 0.0186, "MR": 0.0169, "CR": 0.0457})
    g = relative_gain(0.0241, 0.0302)
    ok = round(m, 4) == 0.0241 and abs(g - (-20.2)) <= 0.05
    check(acceptance, "AC2 ratio mean and gain", ok, f"mean={m:.5f} gain={g:.3f}%")


def test_ac3_icp_recovery(acceptance, basis):
    assert basis.vertex_count >= 500
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_rot = worst_t = worst_rmse = 0.0
    monotone = True
    for trial in range(100):
        target = reconstruct(basis, rng.standard_normal(basis.coeff_count))
        planted = PoseParams(
            rotation_about_axis(rng.standard_normal(3), np.deg2rad(rng.uniform(0, 20))),
            rng.uniform(-5, 5, 3),
        )
        res = icp_point_to_plane_detail(apply_pose(target, planted), target)
        truth = planted.inverse()
        worst_rot = max(worst_rot, rotation_angle(res.pose.rotation @ truth.rotation.T))
        worst_t = max(worst_t, float(np.abs(res.pose.translation - truth.translation).max()))
        worst_rmse = max(worst_rmse, res.rmse)
        monotone &= all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))
    dt = time.perf_counter() - t0
    ok = worst_rot <= 1e-4 and worst_t <= 1e-5 and worst_rmse < 1e-6 and monotone and dt < 30
    check(acceptance, "AC3 ICP recovery", ok,
          f"rot={worst_rot:.2e} trans={worst_t:.2e} rmse={worst_rmse:.2e} monotone={monotone} time={dt:.1f}s")


def test_ac4_fitting_round_trip(acceptance):
    basis = synthetic_basis(30, seed=1)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        alpha = rng.standard_normal(30)
        lms = extract_landmarks(reconstruct(basis, alpha), basis)
        est = fit_coefficients(lms, basis, FitConfig(ridge_lambda=0.0)).values
        worst = max(worst, float(np.abs(est - alpha).max()))
    check(acceptance, "AC4 fitting round-trip", worst <= 1e-8, f"max error={worst:.2e}")


def _grad_cases(rng):
    """Yield ``(label, analytic, numeric)`` for one random point of every differentiable map."""
    a, s, p, n, e = (rng.standard_normal(5) for _ in range(5))
    ze, zs = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    yield "reg", reg_loss(a, s).grads["alpha"], central_diff(lambda x: reg_loss(x, s).value, a)
    yield "pgt", pgt_loss(e, a).grads["alpha"], central_diff(lambda x: pgt_loss(e, x).value, a)
    if abs(np.linalg.norm(a - p) - np.linalg.norm(a - n) + 1) > 1e-3:
        tri = triplet_loss(a, p, n)
        yield "triplet", tri.grads["alpha"], central_diff(lambda x: triplet_loss(x, p, n).value, a)
        sup = supervised_loss(a, s, p, n)
        yield "supervised", sup.grads["alpha"], central_diff(lambda x: supervised_loss(x, s, p, n).value, a)
        kd = kd_loss(e, a, ze, zs)
        fake = gan_fake_loss(LogitsBatch(rng.standard_normal(3), rng.standard_normal((3, 4)), [0, 3, 1]))
        real = gan_real_loss(LogitsBatch(rng.standard_normal(3), rng.standard_normal((3, 4)), [2, 2, 0]))

        def unsup(x):
            return unsupervised_loss(
                {"fake": fake, "real": real, "kd": kd_loss(e, x, ze, zs), "tri": triplet_loss(x, p, n)}
            ).value

        grad = unsupervised_loss({"fake": fake, "real": real, "kd": kd, "tri": tri}).grads["alpha"]
        yield "unsupervised", grad, central_diff(unsup, a)
    d, c, lab = rng.standard_normal(4), rng.standard_normal((4, 3)), rng.integers(0, 3, 4)
    for fn in (gan_real_loss, gan_fake_loss):
        out = fn(LogitsBatch(d, c, lab))
        yield fn.__name__, out.grads["disc_logits"], central_diff(lambda x: fn(LogitsBatch(x, c, lab)).value, d)
        yield fn.__name__, out.grads["class_logits"], central_diff(lambda x: fn(LogitsBatch(d, x, lab)).value, c)
    gi, _ = cosine_kernel_grad(ze[0], ze[1])
    yield "kernel", gi, central_diff(lambda x: cosine_kernel(x, ze[1]), ze[0])
    w = rng.standard_normal((5, 5))
    yield "probs", conditional_probs_vjp(zs, w), central_diff(lambda x: float(np.sum(w * conditional_probs(x))), zs)
    yield "kl", kd_divergence(ze, zs).grads["student"], central_diff(lambda x: kd_divergence(ze, x).value, zs)
    kd = kd_loss(e, a, ze, zs)
    yield "kd_loss", kd.grads["student"], central_diff(lambda x: kd_loss(e, a, ze, x).value, zs)


def test_ac5_gradient_suite(acceptance):
    rng = np.random.default_rng(99)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for _ in range(100):
        for label, analytic, numeric in _grad_cases(rng):
            worst[label] = max(worst.get(label, 0.0), rel_err(analytic, numeric))
            counts[label] = counts.get(label, 0) + 1
    # MLP: 100 random parameters, each perturbed separately
    m = MlpModel.init((6, 8, 5, 4), seed=3)
    x, up = rng.standard_normal((9, 6)), rng.standard_normal((9, 4))
    grads = backward(m, x, up)
    names = sorted(m.params)
    picks = [(names[i], int(rng.integers(m.params[names[i]].size))) for i in rng.integers(len(names), size=100)]
    an, nu = [], []
    for name, idx in picks:
        def f(v, name=name, idx=idx):
            params = {k: a.copy() for k, a in m.params.items()}
            params[name].reshape(-1)[idx] = v[0]
            return float(np.sum(up * forward(MlpModel(m.sizes, params, m.activation), x)))

        nu.append(central_diff(f, [m.params[name].reshape(-1)[idx]])[0])
        an.append(grads[name].reshape(-1)[idx])
    worst["mlp"] = rel_err(an, nu)
    counts["mlp"] = len(picks)
    ok = max(worst.values()) < 1e-4 and min(counts.values()) >= 95
    detail = " ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    check(acceptance, "AC5 gradient suite", ok, detail)


def test_ac6_kd_sanity(acceptance):
    rng = np.random.default_rng(5)
    e = rng.standard_normal((8, 6))
    self_div = abs(kd_divergence(e, e).value)
    col_err = float(np.abs(conditional_probs(rng.standard_normal((7, 5))).sum(axis=0) - 1).max())
    expert = MlpModel.init((64, 16, 10), seed=7, activation="identity")
    emb = rng.standard_normal((300, 64))
    t0 = time.perf_counter()
    cfg = TrainConfig(learning_rate=3e-3, steps=2000, hidden=(16,), activation="identity", seed=1)
    student = train_distilled(linear_expert(expert), emb[:200], cfg).model
    dt = time.perf_counter() - t0
    rms = float(np.sqrt(np.mean((forward(student, emb[200:]) - forward(expert, emb[200:])) ** 2)))
    ok = self_div <= 1e-12 and col_err <= 1e-12 and rms < 1e-2 and dt < 60
    check(acceptance, "AC6 KD sanity", ok,
          f"self-div={self_div:.1e} col-sum err={col_err:.1e} held-out rms={rms:.2e} time={dt:.1f}s")


def _supervised_run(basis):
    d = make_synthetic_dataset(n_identities=60, per_identity=6, coeff_count=basis.coeff_count, seed=7)
    is_eval = np.array([is_eval_name(d.names[i]) for i in d.ids])
    train, test = d.subset(~is_eval), d.subset(is_eval)
    cfg = TrainConfig(learning_rate=3e-3, steps=2000, hidden=(), activation="identity")
    model = train_supervised(train, cfg).model
    refs = {d.names[i]: test.coeffs[np.flatnonzero(test.ids == i)[0]] for i in np.unique(test.ids)}
    names = [d.names[i] for i in test.ids]
    trained = evaluate(list(zip(names, forward(model, test.embeddings))), refs, basis).aggregate
    mean = fit_oracle(train.coeffs).predict()
    oracle = evaluate([(n, mean) for n in names], refs, basis).aggregate
    return trained.are_mean, oracle.are_mean, model


def test_ac7_supervised_toy_run(acceptance):
    basis = synthetic_basis(10, seed=0)
    t0 = time.perf_counter()
    trained, oracle, model = _supervised_run(basis)
    dt = time.perf_counter() - t0
    again_trained, again_oracle, again = _supervised_run(basis)
    same = (again_trained == trained and again_oracle == oracle
            and all(model.params[k].tobytes() == again.params[k].tobytes() for k in model.params))
    ok = trained < oracle and same and dt < 120
    check(acceptance, "AC7 supervised toy run", ok,
          f"model ARE={trained:.4f} oracle ARE={oracle:.4f} deterministic={same} time={dt:.1f}s")


def test_ac8_mel_pipeline(acceptance):
    sr = 16000
    t = np.arange(sr) / sr
    worst_bin = 0
    for f in (200.0, 440.0, 1000.0, 3000.0, 6500.0):
        m = melspectrogram(Waveform(np.sin(2 * np.pi * f * t), sr))
        expected = int(np.argmin(np.abs(hz_to_mel(mel_centers(sr)) - hz_to_mel(f))))
        worst_bin = max(worst_bin, int(np.abs(np.argmax(m.values, axis=1) - expected).max()))
    x = np.random.default_rng(0).standard_normal(12345)
    norm = normalize_per_bin(melspectrogram(Waveform(x, sr)))
    mean_err = float(np.abs(norm.values.mean(axis=0)).max())
    var_err = float(np.abs(norm.values.var(axis=0) - 1).max())
    counts_ok = all(
        melspectrogram(Waveform(np.ones(n), sr)).n_frames == (n - 400) // 160 + 1
        for n in (400, 559, 560, 1000, 12345)
    )
    ok = worst_bin <= 1 and mean_err <= 1e-10 and var_err <= 1e-10 and counts_ok
    check(acceptance, "AC8 mel pipeline", ok,
          f"bin offset={worst_bin} mean err={mean_err:.1e} var err={var_err:.1e} frame counts={counts_ok}")


def test_ac9_metric_identities(acceptance, basis, regions):
    rng = np.random.default_rng(3)
    worst_zero = worst_inv = 0.0
    for _ in range(10):
        a = reconstruct(basis, rng.standard_normal(basis.coeff_count))
        b = reconstruct(basis, rng.standard_normal(basis.coeff_count))
        lm = a.vertices[basis.landmark_indices]
        zeros = [
            absolute_ratio_error(a, a, basis=basis)["mean"],
            nme(lm, lm, a),
            icp_point_to_plane(a, a)[1],
            *part_rmse(a, a, regions).values(),
        ]
        worst_zero = max(worst_zero, max(zeros))
        base = absolute_ratio_error(a, b, basis=basis)
        for _ in range(5):
            r = rotation_about_axis(rng.standard_normal(3), rng.uniform(0, np.pi))
            s, t = rng.uniform(0.2, 5.0), rng.uniform(-10, 10, 3)
            move = lambda m: Mesh(s * m.vertices @ r.T + t, m.faces)  # noqa: E731
            moved = absolute_ratio_error(move(a), move(b), basis=basis)
            worst_inv = max(worst_inv, max(abs(moved[k] - base[k]) for k in base))
    ok = worst_zero < 1e-9 and worst_inv <= 1e-9
    check(acceptance, "AC9 metric identities", ok, f"max self-metric={worst_zero:.1e} max ARE drift={worst_inv:.1e}")
