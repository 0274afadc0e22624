"""Nonlinear-family sampler: effect-row conditionals, the shared effect,
the score Metropolis step, and chain contracts."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from factorint import (
    DataMatrix,
    GpChain,
    gp_spec,
    run_gp_chain,
    se_kernel,
    standardize_rows,
)
from factorint.gp import (
    column_delta_log_joint,
    gp_prior_logdens,
    log_joint,
    shared_effect_posterior,
    update_shared_effect,
)
from factorint.kernels import marginal_ratio_rows
from factorint.model import build_layout
from factorint.mult import _logit, initial_state
from factorint.rng import stream


def make_chain(variant=1, m=4, n=6, seed=5, sweeps=4, **spec_kw):
    rng = np.random.default_rng(70 + variant)
    spec = gp_spec(variant, **spec_kw)
    data = standardize_rows(rng.normal(size=(m, n)))
    chain = GpChain(spec, data, seed=seed)
    for _ in range(sweeps):
        chain.sweep()
    return chain


class TestEffectRowConditional:
    def test_mean_and_covariance_match_direct_algebra(self):
        chain = make_chain()
        st, k = chain.state, chain.kernel
        R = chain.data.values - st.loadings @ st.scores
        i, s2 = 2, st.noise_var[2]
        Kreg = k.regularized()
        gain_direct = Kreg @ np.linalg.inv(Kreg + s2 * np.eye(k.n))
        mean_direct = gain_direct @ R[i]
        cov_direct = Kreg - gain_direct @ Kreg

        d, U = k.eigensystem()
        gain = d / (d + s2)
        mean_eig = U @ (gain * (U.T @ R[i]))
        cov_eig = U @ np.diag(gain * s2) @ U.T
        np.testing.assert_allclose(mean_eig, mean_direct, atol=1e-10)
        np.testing.assert_allclose(cov_eig, cov_direct, atol=1e-10)

    def test_two_sample_case_by_hand(self):
        k = se_kernel(np.array([[0.0, 0.1]]), 0.2)
        Kreg = k.regularized()
        r = np.array([1.0, -0.5])
        s2 = 0.7
        A = Kreg @ np.linalg.inv(Kreg + s2 * np.eye(2))
        d, U = k.eigensystem()
        mean = U @ ((d / (d + s2)) * (U.T @ r))
        np.testing.assert_allclose(mean, A @ r, atol=1e-10)

    def test_large_noise_shrinks_conditional_mean_to_zero(self):
        chain = make_chain()
        k = chain.kernel
        d, U = k.eigensystem()
        r = np.ones(k.n)
        for s2, bound in ((1e4, 1e-3), (1e8, 1e-7)):
            mean = U @ ((d / (d + s2)) * (U.T @ r))
            assert np.abs(mean).max() < bound

    @pytest.mark.parametrize("n", [2, 5, 10])
    def test_indicator_log_odds_match_explicit_densities(self, n):
        rng = np.random.default_rng(400 + n)
        k = se_kernel(rng.normal(size=(2, n)), 0.4)
        R = rng.normal(size=(3, n))
        s2 = rng.uniform(0.4, 1.5, size=3)
        rho = rng.uniform(0.2, 0.8, size=3)
        logodds = _logit(rho) + marginal_ratio_rows(R, k, s2)
        for i in range(3):
            direct = (np.log(rho[i]) - np.log1p(-rho[i])
                      + multivariate_normal.logpdf(R[i], mean=np.zeros(n),
                                                   cov=k.regularized() + s2[i] * np.eye(n))
                      - multivariate_normal.logpdf(R[i], mean=np.zeros(n),
                                                   cov=s2[i] * np.eye(n)))
            np.testing.assert_allclose(logodds[i], direct, atol=1e-8)


class TestSharedEffect:
    def test_no_active_rows_gives_prior(self):
        chain = make_chain(variant=2)
        st = chain.state
        st.inter_mask[:] = 0
        mean, var_diag, U = shared_effect_posterior(st, chain.data, chain.kernel)
        d, _ = chain.kernel.eigensystem()
        np.testing.assert_array_equal(mean, np.zeros(chain.kernel.n))
        np.testing.assert_allclose(var_diag, d, atol=1e-12)

    def test_single_active_row_identity_kernel(self):
        # far-apart columns: kernel is the identity; sigma2 = 1 gives mean r/2
        k = se_kernel(np.array([[0.0, 80.0], [0.0, -80.0]]), 0.2)
        rng = np.random.default_rng(17)
        data = standardize_rows(rng.normal(size=(2, 2)))
        spec = gp_spec(2)
        st = initial_state(spec, data, build_layout(spec, 2), stream(0, 0, "init"))
        st.loadings[:] = 0.0
        st.noise_var[:] = 1.0
        st.inter_mask = np.array([1, 0], dtype=np.int8)
        mean, var_diag, U = shared_effect_posterior(st, data, k)
        np.testing.assert_allclose(mean, data.values[0] / 2.0, atol=1e-8)
        np.testing.assert_allclose(var_diag, 0.5, atol=1e-8)

    def test_indicator_frequencies_match_enumeration_oracle(self):
        # freeze everything except (z, shared effect) and compare the chain's
        # z marginal with grid quadrature over the shared effect
        X = np.array([[1.1, -0.6], [0.9, -0.8]])
        data = DataMatrix(X, ("a", "b"), ("s1", "s2"))
        spec = gp_spec(2)
        layout = build_layout(spec, 2)
        k = se_kernel(np.array([[0.3, -0.5], [0.1, 0.4]]), 0.6)
        st = initial_state(spec, data, layout, stream(1, 0, "init"))
        st.loadings[:] = 0.0
        st.noise_var[:] = np.array([0.5, 0.8])
        st.inter_prob = np.array([0.45, 0.55])

        # oracle: p(z) * integral over the shared effect on a dense grid
        grid = np.linspace(-6, 6, 241)
        F1, F2 = np.meshgrid(grid, grid, indexing="ij")
        nodes = np.column_stack([F1.ravel(), F2.ravel()])
        prior = multivariate_normal.pdf(nodes, mean=np.zeros(2), cov=k.regularized())
        weights = {}
        for z0 in (0, 1):
            for z1 in (0, 1):
                like = np.ones(nodes.shape[0])
                for i, z in enumerate((z0, z1)):
                    target = nodes if z else np.zeros_like(nodes)
                    dev = X[i][None, :] - target
                    like = like * np.exp(-0.5 * np.sum(dev**2, axis=1) / st.noise_var[i]) \
                        / (2 * np.pi * st.noise_var[i])
                pz = (st.inter_prob[0] if z0 else 1 - st.inter_prob[0]) * \
                     (st.inter_prob[1] if z1 else 1 - st.inter_prob[1])
                weights[(z0, z1)] = pz * float(np.sum(prior * like))
        total = sum(weights.values())
        oracle = {cfg: w / total for cfg, w in weights.items()}

        rng = stream(2, 0, "effects")
        counts = {cfg: 0 for cfg in oracle}
        n_iter = 50_000
        for _ in range(n_iter):
            update_shared_effect(st, data, spec, layout, k, rng)
            counts[(int(st.inter_mask[0]), int(st.inter_mask[1]))] += 1
        tv = 0.5 * sum(abs(counts[cfg] / n_iter - oracle[cfg]) for cfg in oracle)
        assert tv < 0.02

    def test_active_rows_share_the_effect_exactly(self):
        chain = make_chain(variant=2, sweeps=6)
        st = chain.state
        active = st.inter_mask.astype(bool)
        if active.any():
            for i in np.flatnonzero(active):
                np.testing.assert_array_equal(st.effects[i], st.shared_effect)
        assert (st.effects[~active] == 0).all()

    def test_shared_effect_coherent_at_every_retained_state(self):
        rng = np.random.default_rng(27)
        data = standardize_rows(rng.normal(size=(5, 6)))
        draws = run_gp_chain(gp_spec(2), data, n_iters=40, burn_in=20, seed=6)
        for st in draws.states:
            active = st.inter_mask.astype(bool)
            for i in np.flatnonzero(active):
                np.testing.assert_array_equal(st.effects[i], st.shared_effect)
            assert (st.effects[~active] == 0).all()


class TestScoreMetropolis:
    def test_delta_matches_log_joint_difference(self):
        chain = make_chain()
        st, k, spec, data = chain.state, chain.kernel, chain.spec, chain.data
        rng = np.random.default_rng(18)
        st.inter_mask[:] = np.array([1, 0, 1, 0], dtype=np.int8)
        st.effects[1] = 0.0
        st.effects[3] = 0.0
        gp_cur = gp_prior_logdens(k, st, spec)
        for j in (0, 3):
            proposal = st.scores[:, j] + 0.3 * rng.normal(size=2)
            delta, k_prop, _ = column_delta_log_joint(st, data, spec, k, j, proposal, gp_cur)
            before = log_joint(st, data, spec, kernel=k)
            saved = st.scores[:, j].copy()
            st.scores[:, j] = proposal
            after = log_joint(st, data, spec, kernel=k_prop)
            st.scores[:, j] = saved
            np.testing.assert_allclose(delta, after - before, atol=1e-8)

    def test_zero_step_always_accepts_and_stays_put(self):
        rng = np.random.default_rng(19)
        data = standardize_rows(rng.normal(size=(4, 6)))
        chain = GpChain(gp_spec(1), data, seed=7, rw_step=0.0, adapt_rw=False)
        start = chain.state.scores.copy()
        accepted = chain.update_score_columns()
        assert accepted == data.n_samples
        np.testing.assert_array_equal(chain.state.scores, start)

    def test_cholesky_failure_rejects_proposal(self, monkeypatch):
        chain = make_chain()
        from factorint.errors import CholeskyFailure
        import factorint.gp as gp_module

        def broken(scores, length_scale):
            raise CholeskyFailure("synthetic failure")

        before = chain.state.scores.copy()
        monkeypatch.setattr(gp_module, "se_kernel", broken)
        accepted = chain.update_score_columns()
        assert accepted == 0
        np.testing.assert_array_equal(chain.state.scores, before)

    def test_prior_recovery_with_likelihood_disabled(self):
        # loadings and effects pinned at zero: the score columns must sample
        # their standard-normal prior through the Metropolis kernel
        rng = np.random.default_rng(20)
        data = standardize_rows(rng.normal(size=(3, 8)))
        spec = gp_spec(1,
                       fixed_load_prob={(i, l): 0.0 for i in range(3) for l in range(2)},
                       fixed_inter_prob={i: 0.0 for i in range(3)})
        draws = run_gp_chain(spec, data, n_iters=4_000, burn_in=500, seed=21)
        pooled = np.stack([st.scores for st in draws.states])  # (S, L, n)
        flat = pooled.reshape(pooled.shape[0], -1)
        # batch-means standard error over the sweep axis
        n_batches = 50
        batches = flat[: (flat.shape[0] // n_batches) * n_batches]
        batches = batches.reshape(n_batches, -1, flat.shape[1]).mean(axis=(1, 2))
        se = batches.std(ddof=1) / np.sqrt(n_batches)
        assert abs(flat.mean()) < 3 * se
        batch_var = flat.reshape(n_batches, -1, flat.shape[1])
        var_means = (batch_var**2).mean(axis=(1, 2))
        se_var = var_means.std(ddof=1) / np.sqrt(n_batches)
        assert abs((flat**2).mean() - 1.0) < 3 * se_var


class TestChainContracts:
    def test_kernel_state_coherence(self):
        chain = make_chain(sweeps=5)
        rebuilt = se_kernel(chain.state.scores, chain.spec.length_scale)
        np.testing.assert_array_equal(rebuilt.K, chain.kernel.K)
        assert rebuilt.jitter == chain.kernel.jitter

    def test_effect_mask_coupling(self):
        rng = np.random.default_rng(22)
        data = standardize_rows(rng.normal(size=(5, 7)))
        draws = run_gp_chain(gp_spec(1), data, n_iters=30, burn_in=10, seed=3)
        for st in draws.states:
            off = st.inter_mask == 0
            assert (st.effects[off] == 0).all()

    def test_seed_rows_have_exactly_zero_effects(self):
        rng = np.random.default_rng(23)
        data = standardize_rows(rng.normal(size=(6, 8)))
        spec = gp_spec(1, seed_groups={0: frozenset({0, 1}), 1: frozenset({2, 3})})
        draws = run_gp_chain(spec, data, n_iters=40, burn_in=20, seed=4)
        pooled = draws.stack("effects")
        assert np.abs(pooled[:, [0, 1, 2, 3], :]).max() == 0.0

    def test_determinism(self):
        rng = np.random.default_rng(24)
        data = standardize_rows(rng.normal(size=(4, 6)))
        a = run_gp_chain(gp_spec(1), data, n_iters=24, burn_in=12, seed=9)
        b = run_gp_chain(gp_spec(1), data, n_iters=24, burn_in=12, seed=9)
        for sa, sb in zip(a.states, b.states):
            np.testing.assert_array_equal(sa.scores, sb.scores)
            np.testing.assert_array_equal(sa.effects, sb.effects)
        np.testing.assert_array_equal(a.mh_accept_counts, b.mh_accept_counts)

    def test_retained_count_and_ledger_shape(self):
        rng = np.random.default_rng(25)
        data = standardize_rows(rng.normal(size=(4, 6)))
        draws = run_gp_chain(gp_spec(1), data, n_iters=600, burn_in=300, seed=2)
        assert len(draws) == 300
        assert draws.mh_accept_counts.shape == (6, 2)
        assert (draws.mh_accept_counts[:, 1] == 300).all()

    def test_global_probability_expands_to_every_feature(self):
        rng = np.random.default_rng(26)
        data = standardize_rows(rng.normal(size=(5, 7)))
        draws = run_gp_chain(gp_spec(3), data, n_iters=30, burn_in=10, seed=5)
        for st in draws.states:
            assert np.unique(st.inter_prob).size == 1
