"""Squared-exponential kernel construction and marginal likelihood ratios."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from factorint import ShapeMismatch, gp_marginal_loglik_ratio, se_kernel
from factorint.kernels import marginal_ratio_rows


class TestSeKernel:
    def test_identical_columns_give_unit_covariance(self):
        lam = np.array([[0.4, 0.4, 1.0], [-1.2, -1.2, 0.3]])
        k = se_kernel(lam, 0.2)
        assert k.K[0, 1] == 1.0

    def test_hand_value(self):
        # one factor, columns 0 and 1, ls = 0.2: exp(-1 / (2 * 0.04))
        k = se_kernel(np.array([[0.0, 1.0]]), 0.2)
        np.testing.assert_allclose(k.K[0, 1], np.exp(-12.5), rtol=1e-12)
        np.testing.assert_allclose(k.K[0, 1], 3.7266531720786709e-06, rtol=1e-10)

    def test_unit_diagonal(self):
        rng = np.random.default_rng(2)
        k = se_kernel(rng.normal(size=(3, 12)), 0.7)
        np.testing.assert_array_equal(np.diag(k.K), np.ones(12))

    def test_symmetric_by_construction(self):
        rng = np.random.default_rng(3)
        k = se_kernel(rng.normal(size=(2, 15)), 0.4)
        assert np.abs(k.K - k.K.T).max() == 0.0

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(4)
        k = se_kernel(rng.normal(size=(2, 10)), 0.5)
        assert (k.K > 0).all() and (k.K <= 1).all()

    @pytest.mark.parametrize("trial", range(5))
    def test_positive_semidefinite_before_jitter(self, trial):
        rng = np.random.default_rng(100 + trial)
        L = rng.integers(1, 4)
        n = rng.integers(5, 51)
        k = se_kernel(rng.normal(size=(L, n)), rng.uniform(0.1, 1.5))
        assert np.linalg.eigvalsh(k.K).min() >= -1e-8

    @pytest.mark.parametrize("trial", range(5))
    def test_length_scale_monotonicity(self, trial):
        rng = np.random.default_rng(200 + trial)
        lam = rng.normal(size=(2, 12))
        grid = [0.1, 0.2, 0.35, 0.6, 1.0, 2.0]
        previous = None
        for ls in grid:
            K = se_kernel(lam, ls).K
            if previous is not None:
                assert (K - previous >= -1e-15).all()
            previous = K

    def test_cholesky_reconstruction(self):
        rng = np.random.default_rng(5)
        k = se_kernel(rng.normal(size=(2, 30)), 0.3)
        recon = k.chol @ k.chol.T
        target = k.K + k.jitter * np.eye(30)
        assert np.linalg.norm(recon - target) < 1e-10

    def test_duplicate_columns_still_factorizable(self):
        lam = np.zeros((2, 8))  # all columns identical: K is all ones
        k = se_kernel(lam, 0.2)
        recon = k.chol @ k.chol.T
        assert np.linalg.norm(recon - k.regularized()) < 1e-8

    def test_jitter_escalation_ladder(self):
        from factorint import CholeskyFailure
        from factorint.kernels import _chol_with_jitter

        # smallest eigenvalue -2e-6: the starting jitter fails, escalation succeeds
        mild = np.array([[1.0, 1.0 + 2e-6], [1.0 + 2e-6, 1.0]])
        _, jitter = _chol_with_jitter(mild)
        assert 2e-6 < jitter <= 1e-4
        # smallest eigenvalue -1e-3: beyond the maximum jitter
        severe = np.array([[1.0, 1.001], [1.001, 1.0]])
        with pytest.raises(CholeskyFailure):
            _chol_with_jitter(severe)


class TestMarginalLoglikRatio:
    def test_zero_residual_favors_null(self):
        rng = np.random.default_rng(6)
        k = se_kernel(rng.normal(size=(2, 7)), 0.4)
        value = gp_marginal_loglik_ratio(np.zeros(7), k, 0.8)
        expected = -0.5 * np.linalg.slogdet(k.regularized() / 0.8 + np.eye(7))[1]
        assert value < 0
        np.testing.assert_allclose(value, expected, atol=1e-10)

    def test_identity_kernel_closed_form(self):
        # far-apart columns underflow the kernel to the identity
        lam = np.array([[0.0, 60.0, -60.0, 120.0, -120.0]])
        k = se_kernel(lam, 0.2)
        rng = np.random.default_rng(7)
        r = rng.normal(size=5)
        value = gp_marginal_loglik_ratio(r, k, 1.0)
        np.testing.assert_allclose(value, -2.5 * np.log(2.0) + (r @ r) / 4.0, atol=1e-8)

    def test_scalar_case(self):
        k = se_kernel(np.zeros((1, 1)), 0.2)
        value = gp_marginal_loglik_ratio(np.array([2.0]), k, 1.0)
        np.testing.assert_allclose(value, -0.5 * np.log(2.0) + 1.0, atol=1e-8)

    @pytest.mark.parametrize("n", [2, 5, 10])
    def test_agrees_with_direct_density_evaluation(self, n):
        rng = np.random.default_rng(300 + n)
        k = se_kernel(rng.normal(size=(2, n)), 0.5)
        sigma2 = rng.uniform(0.3, 2.0)
        r = rng.normal(size=n)
        direct = (multivariate_normal.logpdf(r, mean=np.zeros(n),
                                             cov=k.regularized() + sigma2 * np.eye(n))
                  - multivariate_normal.logpdf(r, mean=np.zeros(n),
                                               cov=sigma2 * np.eye(n)))
        np.testing.assert_allclose(gp_marginal_loglik_ratio(r, k, sigma2), direct, atol=1e-8)
        batched = marginal_ratio_rows(np.vstack([r, 2 * r]), k,
                                      np.array([sigma2, sigma2]))
        np.testing.assert_allclose(batched[0], direct, atol=1e-8)

    def test_shape_mismatch_rejected(self):
        k = se_kernel(np.zeros((1, 3)), 0.2)
        with pytest.raises(ShapeMismatch):
            gp_marginal_loglik_ratio(np.zeros(4), k, 1.0)
