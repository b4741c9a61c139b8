"""Tests for the additive model: construction, prediction, training, metrics."""

import numpy as np
import numpy.testing as npt
import pytest

from spatialcausal import gp as G
from spatialcausal import model as M
from spatialcausal.errors import (ConfigError, ContractError, DataError,
                                  DimensionError, FormatError, NumericError)


def line_dataset(n=40, m=1, seed=0, y_fn=None, x_dim=2):
    """Small 1-d dataset with length-3 center-zero patches."""
    rng = np.random.default_rng(seed)
    coords = np.linspace(0.0, 1.0, n)[:, None]
    t = rng.normal(size=(n, m))
    patches = np.zeros((n, m, 3))
    for j in range(m):
        patches[1:, j, 0] = t[:-1, j]
        patches[:-1, j, 2] = t[1:, j]
    x = rng.normal(size=(n, x_dim))
    if y_fn is None:
        y = rng.normal(size=n)
    else:
        y = y_fn(t, patches, x)
    return M.SpatialDataset(coords, t, patches, x, y, d_s=3)


def linear_cfg(patch_shape=(3,), x_dim=2, m=1, **kw):
    return M.ModelConfig(m=m, patch_shape=patch_shape, x_dim=x_dim,
                         interference="linear", confounder="linear", **kw)


class TestDataset:
    def test_validation_catches_shape_mismatch(self):
        with pytest.raises(DimensionError):
            M.SpatialDataset(np.zeros((5, 1)), np.zeros((4, 1)), np.zeros((5, 1, 3)),
                             np.zeros((5, 2)), np.zeros(5), d_s=3)

    def test_nonzero_patch_center_rejected(self):
        patches = np.ones((4, 1, 3))
        with pytest.raises(DataError):
            M.SpatialDataset(np.zeros((4, 1)), np.zeros((4, 1)), patches,
                             np.zeros((4, 2)), np.zeros(4), d_s=3)

    def test_even_d_s_rejected(self):
        with pytest.raises(ContractError):
            M.SpatialDataset(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros((4, 1, 4)),
                             np.zeros((4, 2)), np.zeros(4), d_s=4)


class TestBuildAndPredict:
    def test_zeroed_model_predicts_zero(self):
        data = line_dataset()
        model = M.build_model(linear_cfg())
        npt.assert_array_equal(model.predict_dataset(data), 0.0)

    def test_single_linear_term(self):
        data = line_dataset()
        model = M.build_model(linear_cfg())
        model.alphas.data[0, 0] = 2.0
        data.treatments[5, 0] = 3.0
        out = M.predict(model, data, 5)
        assert out.yhat == pytest.approx(6.0)
        assert out.direct == pytest.approx(6.0)
        assert out.interference == out.confounder == out.spatial == 0.0

    def test_override_t_shifts_by_alpha_t(self):
        data = line_dataset(seed=3)
        model = M.build_model(linear_cfg())
        rng = np.random.default_rng(1)
        model.alphas.data[0, 0] = 1.7
        model.interference_nets[0].params[0].data = rng.normal(size=(3, 1))
        model.confounder_net.params[0].data = rng.normal(size=(2, 1))
        base = M.predict(model, data, 7)
        cf = M.predict(model, data, 7, overrides={"t": {0: 0.0}})
        npt.assert_allclose(base.yhat - cf.yhat, 1.7 * data.treatments[7, 0])
        npt.assert_allclose(base.interference, cf.interference)

    def test_override_patch_touches_only_interference(self):
        data = line_dataset(seed=4)
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="mlp", confounder="linear",
                                            mlp_width=8, mlp_depth=2, seed=5))
        base = M.predict(model, data, 9)
        cf = M.predict(model, data, 9, overrides={"patch": {0: 0.0}})
        assert base.direct == cf.direct
        assert base.confounder == cf.confounder
        assert base.interference != cf.interference

    def test_components_sum_to_prediction(self):
        data = line_dataset(seed=6)
        kernel = G.KernelSpec("rbf", 1.0, 0.5, 1e-8)
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="mlp", confounder="mlp",
                                            mlp_width=6, mlp_depth=2, gp=True,
                                            kernel=kernel, q=10, seed=2),
                              coords=data.coords)
        rng = np.random.default_rng(0)
        model.gp_term.weights.data = rng.normal(size=model.gp_term.weights.data.shape)
        out = M.predict(model, data, 3)
        npt.assert_allclose(out.yhat,
                            out.direct + out.interference + out.confounder + out.spatial,
                            rtol=0, atol=1e-15)

    def test_two_treatments_build_two_nets(self):
        model = M.build_model(linear_cfg(m=2))
        assert len(model.interference_nets) == 2
        assert model.interference_nets[0].params[0] is not model.interference_nets[1].params[0]

    def test_interference_none_recovers_no_spillover_model(self):
        data = line_dataset()
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="none", confounder="linear"))
        assert model.interference_nets == []
        npt.assert_array_equal(model.interference_total(data.patches), 0.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                        interference="transformer"))

    def test_cnn_on_1d_patches_rejected(self):
        with pytest.raises(ConfigError):
            M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                        interference="cnn"))


class TestTrain:
    def test_linear_recovery_matches_ols(self):
        # Noiseless y = 2 t + 3 x1 - x2 + 1; no interference, no spatial term.
        def y_fn(t, patches, x):
            return 2.0 * t[:, 0] + 3.0 * x[:, 0] - x[:, 1] + 1.0

        data = line_dataset(n=80, seed=8, y_fn=y_fn)
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="none", confounder="linear"))
        trace = M.train(model, data, M.TrainConfig(epochs=3000, lr=0.05, momentum=0.0,
                                                   optimizer="sgd", seed=0))
        design = np.column_stack([data.treatments[:, 0], data.confounders,
                                  np.ones(data.n_units)])
        beta, *_ = np.linalg.lstsq(design, data.outcomes, rcond=None)
        alpha = model.alphas.data[0, 0]
        assert abs(alpha - 2.0) < 0.05
        assert abs(alpha - beta[0]) < 1e-3
        gamma = model.confounder_net.params[0].data.reshape(-1)
        npt.assert_allclose(gamma, beta[1:3], atol=1e-3)
        # epoch-mean loss nonincreasing on this convex problem
        losses = [row[1] for row in trace]
        assert all(a >= b - 1e-12 for a, b in zip(losses[:-1], losses[1:]))

    def test_zero_epochs_rejected(self):
        data = line_dataset()
        model = M.build_model(linear_cfg())
        with pytest.raises(ContractError):
            M.train(model, data, M.TrainConfig(epochs=0))

    def test_all_missing_outcomes_rejected(self):
        data = line_dataset()
        data.outcomes[:] = np.nan
        model = M.build_model(linear_cfg())
        with pytest.raises(DataError):
            M.train(model, data, M.TrainConfig(epochs=1))

    def test_missing_outcomes_skipped(self):
        def y_fn(t, patches, x):
            return t[:, 0] * 0.5

        data = line_dataset(n=30, seed=2, y_fn=y_fn)
        data.outcomes[::3] = np.nan
        model = M.build_model(linear_cfg())
        M.train(model, data, M.TrainConfig(epochs=50, lr=0.05, momentum=0.0,
                                           optimizer="sgd"))
        assert np.isfinite(model.alphas.data).all()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_raises_with_epoch(self):
        data = line_dataset(seed=5)
        data.outcomes *= 1e6
        model = M.build_model(linear_cfg())
        with pytest.raises(NumericError) as err:
            M.train(model, data, M.TrainConfig(epochs=200, lr=1e4, optimizer="sgd",
                                               momentum=0.99))
        assert "epoch" in str(err.value)

    def test_auto_optimizer_selection(self):
        data = line_dataset()
        plain = M.build_model(linear_cfg())
        assert isinstance(M._make_optimizer(plain, M.TrainConfig(epochs=1)), type(
            __import__("spatialcausal.engine", fromlist=["SGD"]).SGD([plain.alphas], 0.1)))
        kernel = G.KernelSpec("rbf", 1.0, 0.5, 1e-8)
        gp_model = M.build_model(linear_cfg(gp=True, kernel=kernel, q=5),
                                 coords=data.coords)
        from spatialcausal.engine import Adam
        assert isinstance(M._make_optimizer(gp_model, M.TrainConfig(epochs=1)), Adam)

    def test_deterministic_loss_trace(self):
        def run():
            data = line_dataset(n=24, seed=9)
            model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                                interference="mlp", confounder="linear",
                                                mlp_width=6, mlp_depth=2, seed=4))
            return M.train(model, data, M.TrainConfig(epochs=30, lr=0.01, batch_size=8,
                                                      optimizer="sgd", momentum=0.9,
                                                      seed=11))

        assert run() == run()

    def test_early_stopping_restores_best(self):
        def y_fn(t, patches, x):
            return 0.8 * t[:, 0] + 0.1 * x[:, 0]

        train_data = line_dataset(n=40, seed=1, y_fn=y_fn)
        val_data = line_dataset(n=20, seed=12, y_fn=y_fn)
        model = M.build_model(linear_cfg())
        trace = M.train(model, train_data,
                        M.TrainConfig(epochs=500, lr=0.05, momentum=0.0, optimizer="sgd",
                                      patience=10),
                        val_dataset=val_data)
        assert len(trace) <= 500
        assert np.isfinite(trace[-1][2])


class TestEvaluate:
    def test_perfect_predictions(self):
        def y_fn(t, patches, x):
            return 1.5 * t[:, 0]

        data = line_dataset(n=30, seed=7, y_fn=y_fn)
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="none", confounder="linear"))
        model.alphas.data[0, 0] = 1.5
        out = M.evaluate(model, data)
        for stratum in ("all", "low", "mid", "high"):
            assert out[stratum]["r2"] == pytest.approx(1.0)
            assert out[stratum]["mae"] == pytest.approx(0.0)

    def test_constant_prediction_r2_zero(self):
        data = line_dataset(n=30, seed=3)
        data.outcomes = data.outcomes - data.outcomes.mean()
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="none", confounder="linear"))
        out = M.evaluate(model, data)  # all-zero model predicts the mean (0)
        assert out["all"]["r2"] == pytest.approx(0.0, abs=1e-12)

    def test_hand_built_mae(self):
        coords = np.arange(4.0)[:, None]
        t = np.array([[0.0], [1.0], [2.0], [3.0]])
        patches = np.zeros((4, 1, 3))
        x = np.array([[0.0], [0.0], [0.0], [1.0]])
        y = np.array([1.0, 2.0, 3.0, 4.0])
        data = M.SpatialDataset(coords, t, patches, x, y, d_s=3)
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=1,
                                            interference="none", confounder="linear"))
        # yhat = t + x + 1 = [1, 2, 3, 5] against y = [1, 2, 3, 4]
        model.alphas.data[0, 0] = 1.0
        model.confounder_net.params[0].data = np.array([[1.0]])
        model.confounder_net.params[1].data = np.array([1.0])
        out = M.evaluate(model, data)
        assert out["all"]["mae"] == pytest.approx(0.25)


class TestCheckpoint:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        data = line_dataset(seed=13)
        kernel = G.KernelSpec("rbf", 1.0, 0.4, 1e-8)
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="mlp", confounder="linear",
                                            mlp_width=5, mlp_depth=2, gp=True,
                                            kernel=kernel, q=6, seed=3),
                              coords=data.coords)
        rng = np.random.default_rng(2)
        model.alphas.data[0, 0] = -0.3
        model.gp_term.weights.data = rng.normal(size=model.gp_term.weights.data.shape)
        path = str(tmp_path / "model.ckpt")
        M.save_model(model, path)
        clone = M.load_model(path)
        npt.assert_array_equal(model.predict_dataset(data), clone.predict_dataset(data))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            M.load_model(str(path))

    def test_truncated_stream_rejected(self, tmp_path):
        model = M.build_model(M.ModelConfig(m=1, patch_shape=(3,), x_dim=2,
                                            interference="linear", confounder="linear"))
        path = str(tmp_path / "model.ckpt")
        M.save_model(model, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-8])
        with pytest.raises(FormatError):
            M.load_model(path)
