import numpy as np
import pytest

from conftest import central_diff, rel_err
from voxface.errors import DataError, NumericalError
from voxface.fitting import solve_ridge
from voxface.losses import kd_divergence, pgt_loss
from voxface.nnkit import (
    AdamState,
    MlpModel,
    SyntheticDataset,
    TrainConfig,
    adam_step,
    backward,
    forward,
    forward_cache,
    linear_expert,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    train_distilled,
    train_supervised,
    write_trace,
)

LINEAR = dict(hidden=(), activation="identity")


def zero_model(sizes, activation="relu"):
    params = {}
    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{k}"], params[f"b{k}"] = np.zeros((i, o)), np.zeros(o)
    return MlpModel(sizes, params, activation)


class TestForward:
    def test_zero_model(self):
        out = forward(zero_model((5, 7, 3)), np.random.default_rng(0).standard_normal((4, 5)))
        np.testing.assert_array_equal(out, np.zeros((4, 3)))

    def test_single_layer_oracle(self):
        m = MlpModel.init((4, 3), seed=1)
        x = np.random.default_rng(2).standard_normal((6, 4))
        w, b = m.params["W0"], m.params["b0"]
        expected = np.array([[sum(xi[i] * w[i, j] for i in range(4)) + b[j] for j in range(3)] for xi in x])
        np.testing.assert_allclose(forward(m, x), expected, atol=1e-14)

    def test_negative_preactivation(self):
        m = MlpModel.init((3, 4, 2), seed=0)
        m.params["W0"] = np.zeros((3, 4))
        m.params["b0"] = -np.ones(4)
        cache = forward_cache(m, np.ones((2, 3)))
        np.testing.assert_array_equal(cache.hidden, 0.0)
        np.testing.assert_array_equal(cache.output, np.tile(m.params["b1"], (2, 1)))

    def test_width_mismatch(self):
        with pytest.raises(DataError):
            forward(MlpModel.init((4, 2)), np.zeros((1, 5)))

    def test_init_bounds(self):
        m = MlpModel.init((64, 128, 10), seed=3)
        assert np.abs(m.params["W0"]).max() <= 1 / 8
        assert np.abs(m.params["W1"]).max() <= 1 / np.sqrt(128)
        np.testing.assert_array_equal(MlpModel.init((64, 128, 10), seed=3).params["W0"], m.params["W0"])

    def test_invalid_shapes(self):
        with pytest.raises(DataError):
            MlpModel((3, 2), {"W0": np.zeros((2, 3)), "b0": np.zeros(2)})
        with pytest.raises(DataError):
            MlpModel((3, 2), {"W0": np.full((3, 2), np.inf), "b0": np.zeros(2)})


class TestBackward:
    def test_zero_upstream(self):
        m = MlpModel.init((4, 5, 3), seed=0)
        grads = backward(m, np.ones((2, 4)), np.zeros((2, 3)))
        assert all(np.all(g == 0) for g in grads.values())

    def test_single_layer_formula(self):
        rng = np.random.default_rng(0)
        m = MlpModel.init((4, 3), seed=0)
        x, g = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
        grads = backward(m, x, g)
        np.testing.assert_allclose(grads["W0"], x.T @ g, atol=1e-14)
        np.testing.assert_allclose(grads["b0"], g.sum(axis=0), atol=1e-14)

    @pytest.mark.parametrize("activation", ["relu", "identity"])
    def test_finite_differences(self, activation):
        rng = np.random.default_rng(1)
        m = MlpModel.init((6, 8, 5, 4), seed=2, activation=activation)
        x = rng.standard_normal((7, 6))
        up = rng.standard_normal((7, 4))
        hg = rng.standard_normal((7, 5))
        grads = backward(m, x, up, hidden_grad=hg)

        def objective(params):
            c = forward_cache(MlpModel(m.sizes, params, activation), x)
            return float(np.sum(up * c.output) + np.sum(hg * c.hidden))

        names = sorted(m.params)
        sizes = [m.params[k].size for k in names]
        flat_idx = rng.choice(sum(sizes), size=100, replace=False)
        offsets = np.cumsum([0] + sizes)
        analytic, numeric = [], []
        for fi in flat_idx:
            li = int(np.searchsorted(offsets, fi, side="right") - 1)
            name, local = names[li], fi - offsets[li]

            def f(v, name=name, local=local):
                p = {k: a.copy() for k, a in m.params.items()}
                p[name].reshape(-1)[local] = v[0]
                return objective(p)

            numeric.append(central_diff(f, [m.params[name].reshape(-1)[local]])[0])
            analytic.append(grads[name].reshape(-1)[local])
        assert rel_err(analytic, numeric) < 1e-4
        for a, n in zip(analytic, numeric):
            assert abs(a - n) <= 1e-4 * max(abs(n), 1e-3)

    def test_shape_mismatch(self):
        m = MlpModel.init((4, 5, 3))
        with pytest.raises(DataError):
            backward(m, np.ones((2, 4)), np.zeros((2, 4)))
        with pytest.raises(DataError):
            backward(m, np.ones((2, 4)), np.zeros((2, 3)), hidden_grad=np.zeros((2, 3)))


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.arange(3.0)}
        new, state = adam_step(p, {"w": np.zeros(3)}, AdamState(), TrainConfig())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_first_step_is_lr_sign(self):
        cfg = TrainConfig(learning_rate=0.01)
        new, _ = adam_step({"w": np.zeros(2)}, {"w": np.array([5.0, -0.2])}, AdamState(), cfg)
        np.testing.assert_allclose(new["w"], [-0.01, 0.01], rtol=1e-6)

    def test_constant_gradient_limit(self):
        cfg = TrainConfig(learning_rate=1e-3)
        p, state = {"w": np.zeros(3)}, AdamState()
        g = {"w": np.array([2.0, -0.5, 1e-3])}
        for _ in range(500):
            prev = p["w"].copy()
            p, state = adam_step(p, g, state, cfg)
        step = p["w"] - prev
        np.testing.assert_allclose(step, -cfg.learning_rate * np.sign(g["w"]), rtol=1e-4)
        assert state.step == 500

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        gs = [rng.standard_normal(4) for _ in range(20)]

        def run():
            p, s = {"w": np.ones(4)}, AdamState()
            for g in gs:
                p, s = adam_step(p, {"w": g}, s, TrainConfig())
            return p["w"]

        assert run().tobytes() == run().tobytes()

    def test_non_finite(self):
        with pytest.raises(NumericalError, match="W3"):
            adam_step({"W3": np.zeros(2)}, {"W3": np.array([1.0, np.nan])}, AdamState(), TrainConfig())

    def test_config_validation(self):
        with pytest.raises(DataError):
            TrainConfig(learning_rate=0)
        with pytest.raises(DataError):
            TrainConfig(beta1=1.0)


class TestDataset:
    def test_linear_generator(self):
        d = make_synthetic_dataset(n_identities=5, per_identity=3, coeff_count=4, seed=2)
        assert d.embeddings.shape == (15, 64) and d.coeffs.shape == (15, 4)
        np.testing.assert_allclose(d.coeffs, d.embeddings @ d.map_weights + d.map_bias, atol=1e-12)
        assert len(d.names) == 5
        d.validate()

    def test_invariants(self):
        with pytest.raises(DataError):
            SyntheticDataset(np.zeros((3, 2)), np.zeros((3, 1)), [0, 0, 0]).validate()
        with pytest.raises(DataError):
            SyntheticDataset(np.zeros((3, 2)), np.zeros((3, 1)), [0, 0, 1]).validate()
        with pytest.raises(DataError):
            SyntheticDataset(np.zeros((3, 2)), np.zeros((2, 1)), [0, 0, 1])

    def test_single_sample_identity_rejected_by_training(self):
        d = SyntheticDataset(np.eye(3), np.zeros((3, 1)), [0, 0, 1])
        with pytest.raises(DataError, match="single sample"):
            train_supervised(d, TrainConfig(steps=1))


@pytest.fixture(scope="module")
def data():
    return make_synthetic_dataset(n_identities=40, per_identity=6, seed=1)


@pytest.fixture(scope="module")
def sup_run(data):
    train = data.subset(data.ids < 30)
    return train_supervised(train, TrainConfig(learning_rate=3e-3, steps=2000, **LINEAR))


@pytest.fixture(scope="module")
def expert():
    return MlpModel.init((64, 16, 10), seed=7, activation="identity")


@pytest.fixture(scope="module")
def embeddings():
    return np.random.default_rng(3).standard_normal((300, 64))


@pytest.fixture(scope="module")
def kd_run(expert, embeddings):
    cfg = TrainConfig(learning_rate=3e-3, steps=2000, hidden=(16,), activation="identity", seed=1)
    return train_distilled(linear_expert(expert), embeddings[:200], cfg)


class TestSupervised:
    def test_held_out(self, data, sup_run):
        test = data.subset(data.ids >= 30)
        assert pgt_loss(test.coeffs, forward(sup_run.model, test.embeddings)).value < 1e-2

    def test_descent(self, sup_run):
        losses = sup_run.losses
        k = len(losses) // 10
        assert losses[-k:].mean() < losses[:k].mean()
        assert {"reg", "tri", "total"} <= set(sup_run.trace[0])

    def test_deterministic(self, data):
        cfg = TrainConfig(learning_rate=1e-3, steps=30, batch_size=16, hidden=(8,))
        a, b = train_supervised(data, cfg), train_supervised(data, cfg)
        assert a.losses.tobytes() == b.losses.tobytes()
        assert all(a.model.params[k].tobytes() == b.model.params[k].tobytes() for k in a.model.params)

    def test_matches_least_squares(self, data):
        res = train_supervised(
            data, TrainConfig(learning_rate=3e-3, steps=2000, tri_weight=0.0, **LINEAR)
        )
        design = np.column_stack([data.embeddings, np.ones(len(data))])
        oracle = solve_ridge(design, data.coeffs, 0.0)
        learned = np.vstack([res.model.params["W0"], res.model.params["b0"]])
        assert np.sqrt(np.mean((learned - oracle) ** 2)) < 1e-2
        assert "tri" not in res.trace[0]

    def test_relu_default_runs(self, data):
        res = train_supervised(data, TrainConfig(steps=5, batch_size=8))
        assert res.model.sizes == (64, 128, 128, 10)
        assert np.all(np.isfinite(res.losses))


class TestDistilled:
    def test_matches_expert(self, kd_run, expert, embeddings):
        held = embeddings[200:]
        rms = np.sqrt(np.mean((forward(kd_run.model, held) - forward(expert, held)) ** 2))
        assert rms < 1e-2

    def test_div_decreases(self, kd_run):
        div = np.array([row["div"] for row in kd_run.trace])
        assert div[-100:].mean() < div[0]

    def test_student_equal_to_expert(self, expert, embeddings):
        res = train_distilled(
            linear_expert(expert),
            embeddings,
            TrainConfig(steps=1, batch_size=32, hidden=(16,), activation="identity"),
            model=expert.copy(),
        )
        assert res.trace[0]["total"] < 1e-12

    def test_div_gradient_flows_into_hidden(self, expert, embeddings):
        cfg = TrainConfig(steps=1, batch_size=8, tri_weight=0.0)
        student = MlpModel.init((64, 16, 10), seed=99, activation="identity")
        res = train_distilled(linear_expert(expert), embeddings[:8], cfg, model=student)
        _, ze = linear_expert(expert)(embeddings[:8])
        zs = forward_cache(student, embeddings[:8]).hidden
        assert res.trace[0]["div"] == pytest.approx(kd_divergence(ze, zs).value, rel=1e-12)

    def test_with_triplet(self, expert):
        d = make_synthetic_dataset(n_identities=6, per_identity=3, seed=4)
        res = train_distilled(
            linear_expert(expert), d.embeddings,
            TrainConfig(steps=3, batch_size=6, hidden=(16,)), ids=d.ids,
        )
        assert "tri" in res.trace[0]

    def test_hidden_mismatch(self, expert, embeddings):
        with pytest.raises(DataError, match="hidden"):
            train_distilled(linear_expert(expert), embeddings, TrainConfig(steps=1, hidden=(12,)))


class TestFiles:
    def test_checkpoint_round_trip(self, tmp_path):
        m = MlpModel.init((6, 4, 3), seed=5, activation="identity")
        save_checkpoint(tmp_path / "m.txt", m)
        back = load_checkpoint(tmp_path / "m.txt")
        assert back.sizes == m.sizes and back.activation == "identity" and back.seed == 5
        for k in m.params:
            np.testing.assert_array_equal(back.params[k], m.params[k])
        assert (tmp_path / "m.txt").read_text().startswith("mlp-checkpoint identity 5 6 4 3\n")

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "x.txt").write_text("mlp-checkpoint relu 0 2 2\n1 2\n")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "x.txt")
        (tmp_path / "y.txt").write_text("hello\n")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "y.txt")

    def test_trace(self, tmp_path):
        write_trace(tmp_path / "t.tsv", [{"step": 0, "reg": 1.5, "total": 2.0}, {"step": 1, "reg": 1.0, "total": 1.0}])
        lines = (tmp_path / "t.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["step", "reg", "total"]
        assert lines[2].split("\t") == ["1", "1.0", "1.0"]
