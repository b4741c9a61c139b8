"""Tests for kernels, low-rank features, and GP samplers."""

import numpy as np
import numpy.testing as npt
import pytest

from spatialcausal import engine as E
from spatialcausal import gp as G
from spatialcausal.errors import ContractError, DimensionError, NumericError

RBF = G.KernelSpec("rbf", sigma=1.0, lengthscale=0.5, noise=1e-10)
EXP = G.KernelSpec("exponential", sigma=1.0, lengthscale=0.005, noise=0.0)


class TestKernels:
    def test_zero_distance_is_sigma_squared(self):
        for k in (RBF, EXP, G.KernelSpec("rbf", sigma=2.0)):
            s = np.array([0.3, -0.7])
            npt.assert_allclose(G.kernel_eval(k, s, s), k.sigma ** 2)

    def test_rbf_closed_form(self):
        val = G.kernel_eval(RBF, np.zeros(2), np.array([0.5, 0.0]))
        npt.assert_allclose(val, np.exp(-0.5), rtol=1e-12)
        npt.assert_allclose(val, 0.606531, atol=1e-6)

    def test_exponential_closed_form(self):
        val = G.kernel_eval(EXP, np.array([0.0]), np.array([0.005]))
        npt.assert_allclose(val, np.exp(-1.0), rtol=1e-12)
        npt.assert_allclose(val, 0.367879, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            G.kernel_eval(RBF, np.zeros(2), np.zeros(3))

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ContractError):
            G.KernelSpec("rbf", sigma=0.0).validate()
        with pytest.raises(ContractError):
            G.KernelSpec("matern").validate()

    def test_gram_symmetric_psd(self):
        rng = np.random.default_rng(4)
        for family in ("rbf", "exponential"):
            kernel = G.KernelSpec(family, sigma=1.3, lengthscale=0.4)
            coords = rng.uniform(size=(40, 2))
            gram = G.gram_matrix(kernel, coords)
            npt.assert_array_equal(gram, gram.T)
            eigs = np.linalg.eigvalsh(gram)
            assert eigs.min() > -1e-10


class TestInducing:
    def test_subsample_full_set(self):
        coords = np.random.default_rng(0).uniform(size=(12, 2))
        ind = G.select_inducing(coords, q=12, strategy="subsample", seed=1)
        npt.assert_array_equal(np.unique(ind.points, axis=0), np.unique(coords, axis=0))

    def test_1d_grid_even_spacing(self):
        coords = np.linspace(0.0, 1.0, 50)
        ind = G.select_inducing(coords, q=3, strategy="grid")
        npt.assert_allclose(ind.points.reshape(-1), [0.0, 0.5, 1.0])

    def test_2d_grid_rounds_to_square(self):
        coords = np.random.default_rng(1).uniform(size=(30, 2))
        ind = G.select_inducing(coords, q=5, strategy="grid")
        assert ind.q == 9  # ceil(sqrt(5)) squared

    def test_duplicates_deduplicated(self):
        coords = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
        ind = G.select_inducing(coords, q=3, strategy="subsample", seed=0)
        assert ind.q == 3
        assert np.unique(ind.points, axis=0).shape[0] == 3

    def test_q_below_one_rejected(self):
        with pytest.raises(ContractError):
            G.select_inducing(np.zeros((4, 2)), q=0)

    def test_distinctness_invariant(self):
        with pytest.raises(ContractError):
            G.InducingSet(np.array([[1.0, 2.0], [1.0, 2.0]]))


class TestNystrom:
    def test_full_rank_exactness(self):
        rng = np.random.default_rng(7)
        coords = rng.uniform(size=(8, 2))
        kernel = G.KernelSpec("rbf", sigma=1.0, lengthscale=0.6, noise=1e-10)
        nmap = G.build_nystrom(G.InducingSet(coords), kernel)
        khat = nmap.low_rank_gram(coords)
        target = G.gram_matrix(kernel, coords) + kernel.noise * np.eye(8)
        assert np.max(np.abs(khat - target)) < 1e-8

    def test_rank_one_at_single_inducing_point(self):
        coords = np.random.default_rng(3).uniform(size=(6, 2))
        nmap = G.build_nystrom(G.InducingSet(np.array([[0.5, 0.5]])),
                               G.KernelSpec("rbf", lengthscale=0.4, noise=1e-12))
        khat = nmap.low_rank_gram(coords)
        assert np.linalg.matrix_rank(khat, tol=1e-10) == 1

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(11)
        coords = rng.uniform(size=(5, 2))
        inducing = G.InducingSet(coords[:3])
        kernel = G.KernelSpec("rbf", sigma=1.2, lengthscale=0.5, noise=1e-8)
        nmap = G.build_nystrom(inducing, kernel)
        z = nmap.features(coords)
        kq = G.gram_matrix(kernel, inducing.points) + kernel.noise * np.eye(3)
        knq = G.gram_matrix(kernel, coords, inducing.points)
        oracle = knq @ np.linalg.inv(kq) @ knq.T
        assert np.max(np.abs(z @ z.T - oracle)) < 1e-10

    def test_trace_gap_monotone_in_nested_inducing_sets(self):
        rng = np.random.default_rng(5)
        coords = rng.uniform(size=(40, 2))
        kernel = G.KernelSpec("rbf", sigma=1.0, lengthscale=0.5, noise=1e-9)
        full_trace = np.trace(G.gram_matrix(kernel, coords))
        pool = rng.uniform(size=(16, 2))
        gaps = []
        for q in (2, 4, 8, 16):
            nmap = G.build_nystrom(G.InducingSet(pool[:q]), kernel)
            gaps.append(full_trace - np.trace(nmap.low_rank_gram(coords)))
        assert all(a >= b - 1e-9 for a, b in zip(gaps[:-1], gaps[1:]))

    def test_jitter_escalation_reported(self):
        # Perfectly singular with zero jitter at every escalation step.
        mat = np.ones((3, 3))
        with pytest.raises(NumericError) as err:
            G.chol_with_jitter(mat, 0.0)
        assert "jitter" in str(err.value)


class TestGpTerm:
    def test_zero_weights_vanish(self):
        nmap = G.build_nystrom(G.InducingSet(np.linspace(0, 1, 5)), RBF)
        term = G.GpTerm(nmap)
        coords = np.random.default_rng(0).uniform(size=(7, 1))
        npt.assert_array_equal(term.values_op(coords).data, 0.0)

    def test_unit_weight_at_inducing_point_gives_chol_diagonal(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(size=(4, 2))
        kernel = G.KernelSpec("rbf", sigma=1.0, lengthscale=0.7, noise=0.0)
        nmap = G.build_nystrom(G.InducingSet(pts), kernel)
        dense_l = np.linalg.cholesky(G.gram_matrix(kernel, pts))
        for j in range(4):
            term = G.GpTerm(nmap)
            term.weights.data[j, 0] = 1.0
            val = G.gp_value(term, pts[j]).item()
            npt.assert_allclose(val, dense_l[j, j], atol=1e-12)

    def test_gradient_wrt_weights_is_features(self):
        nmap = G.build_nystrom(G.InducingSet(np.linspace(0, 1, 6)), RBF)
        term = G.GpTerm(nmap)
        coords = np.random.default_rng(2).uniform(size=(5, 1))
        with E.Tape() as tape:
            loss = E.tsum(term.values_op(coords))
        tape.backward(loss)
        npt.assert_allclose(term.weights.grad.reshape(-1), nmap.features(coords).sum(axis=0))

    def test_linearity_in_weights(self):
        nmap = G.build_nystrom(G.InducingSet(np.linspace(0, 1, 5)), RBF)
        coords = np.random.default_rng(3).uniform(size=(6, 1))
        rng = np.random.default_rng(4)
        w1, w2 = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
        a, b = 1.7, -0.4

        def value(w):
            term = G.GpTerm(nmap)
            term.weights.data = w.copy()
            return term.values_op(coords).data

        npt.assert_allclose(value(a * w1 + b * w2), a * value(w1) + b * value(w2),
                            rtol=0, atol=1e-12)

    def test_trainable_lengthscale_gradient(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(size=(5, 2))
        kernel = G.KernelSpec("rbf", sigma=1.1, lengthscale=0.6, noise=1e-6)
        coords = rng.uniform(size=(8, 2))
        target = rng.normal(size=(8, 1))
        for family in ("rbf", "exponential"):
            k = G.KernelSpec(family, kernel.sigma, kernel.lengthscale, kernel.noise)
            term = G.GpTerm(G.build_nystrom(G.InducingSet(pts), k), train_lengthscale=True)
            term.weights.data = rng.normal(size=(5, 1))

            def fn():
                return E.mse(term.values_op(coords), E.Tensor(target))

            report = E.finite_diff_check(fn, [term.weights, term.lengthscale])
            assert report.passed, (family, report)


class TestSampling:
    def test_mean_and_covariance_oracle(self):
        rng = np.random.default_rng(21)
        coords = rng.uniform(size=(10, 2))
        kernel = G.KernelSpec("rbf", sigma=1.0, lengthscale=0.5, noise=1e-8)
        draws = G.sample_gp(coords, kernel, seed=77, n_draws=5000)
        assert draws.shape == (5000, 10)
        se = kernel.sigma / np.sqrt(5000)
        assert np.all(np.abs(draws.mean(axis=0)) < 3.0 * se)
        target = G.gram_matrix(kernel, coords) + kernel.noise * np.eye(10)
        emp = (draws.T @ draws) / 5000
        rel = np.abs(emp - target) / np.abs(target)
        assert np.max(rel) < 0.10

    def test_zero_jitter_duplicate_coords_fail(self):
        coords = np.array([[0.1, 0.1], [0.1, 0.1], [0.5, 0.5]])
        with pytest.raises(NumericError):
            G.sample_gp(coords, G.KernelSpec("rbf", noise=0.0), seed=0)

    def test_dense_size_limit(self):
        with pytest.raises(ContractError):
            G.sample_gp(np.zeros((10001, 2)), RBF, seed=0)

    def test_determinism(self):
        coords = np.random.default_rng(1).uniform(size=(20, 2))
        a = G.sample_gp(coords, RBF, seed=5)
        b = G.sample_gp(coords, RBF, seed=5)
        npt.assert_array_equal(a, b)
        assert not np.array_equal(a, G.sample_gp(coords, RBF, seed=6))

    def test_grid_sampler_covariance_oracle(self):
        kernel = G.KernelSpec("exponential", sigma=1.0, lengthscale=4.0)
        n_draws = 6000
        draws = G.sample_gp_grid(8, 8, kernel, resolution=1.0, seed=3, n_draws=n_draws)
        flat = draws.reshape(n_draws, -1)
        # covariance against the dense Gram over the same pixel centers
        ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        coords = np.column_stack([ii.reshape(-1), jj.reshape(-1)]).astype(float)
        target = G.gram_matrix(kernel, coords)
        emp = (flat.T @ flat) / n_draws
        err = np.abs(emp - target)
        # relative agreement where the signal is strong, absolute bound overall
        strong = target >= 0.3
        assert np.max(err[strong] / target[strong]) < 0.12
        assert np.max(err) < 4.5 / np.sqrt(n_draws)
        assert np.all(np.abs(flat.mean(axis=0)) < 3.5 / np.sqrt(n_draws))

    def test_grid_sampler_determinism(self):
        kernel = G.KernelSpec("rbf", sigma=1.0, lengthscale=3.0)
        a = G.sample_gp_grid(16, 12, kernel, 1.0, seed=9)
        b = G.sample_gp_grid(16, 12, kernel, 1.0, seed=9)
        npt.assert_array_equal(a, b)
        assert a.shape == (16, 12)
