"""Metropolis-within-Gibbs sampler for the nonlinear-interaction factor model.

The observation model is X = loadings @ scores + effects + noise, where each
effect row is either zero or a draw from a Gaussian process over the score
columns (squared-exponential kernel). The loading block reuses the
spike-and-slab machinery of the multiplicative sampler. Score columns move by
random-walk Metropolis because the kernel couples them to every active effect
row; the kernel is rebuilt after every accepted column. Indicator updates
integrate the effect row out analytically, so the spike never absorbs the
chain; the row (or the shared effect) is redrawn afterwards.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import CholeskyFailure, SpecConflict
from .kernels import KernelMatrix, marginal_ratio_rows, se_kernel
from .model import (
    DataMatrix,
    Family,
    McmcState,
    ModelSpec,
    PosteriorDraws,
    PriorLayout,
    build_layout,
    validate_spec,
)
from .mult import (
    _logit,
    initial_state,
    sample_inclusion_probs,
    update_loadings,
    update_noise,
)
from .rng import RngStreams

# Burn-in step-size adaptation: Robbins-Monro decay with a gain floor, so the
# step keeps tracking the stiffening posterior (effect rows activating) until
# the freeze; only the frozen phase needs a fixed kernel.
_ADAPT_DECAY = 0.7
_ADAPT_GAIN_FLOOR = 0.1
_RW_STEP_BOUNDS = (1e-4, 10.0)


def gp_prior_logdens(kernel: KernelMatrix, state: McmcState, spec: ModelSpec) -> float:
    """Log density of the latent effect structure under the kernel: the active
    rows for the per-row prior, the shared row for the shared prior."""
    if spec.shared_effect:
        return kernel.logdens(state.shared_effect)
    active = state.inter_mask.astype(bool)
    if not active.any():
        return 0.0
    return kernel.logdens(state.effects[active])


def update_effect_rows(state: McmcState, data: DataMatrix, spec: ModelSpec,
                       layout: PriorLayout, kernel: KernelMatrix,
                       rng: np.random.Generator) -> None:
    """Marginalized indicator update followed by a conditional redraw of every
    active effect row (per-row effect prior)."""
    R = data.values - state.loadings @ state.scores
    llr = marginal_ratio_rows(R, kernel, state.noise_var)
    p = expit(_logit(state.inter_prob) + llr)
    p = np.where(np.isnan(layout.fixed_inter), p, layout.fixed_inter)
    mask = rng.random(p.shape[0]) < p

    d, U = kernel.eigensystem()
    s2 = state.noise_var[:, None]
    gain = d[None, :] / (d[None, :] + s2)
    proj = R @ U
    mean_proj = gain * proj
    sd_proj = np.sqrt(gain * s2)
    rows = (mean_proj + sd_proj * rng.standard_normal(proj.shape)) @ U.T
    state.inter_mask = mask.astype(np.int8)
    state.effects = np.where(mask[:, None], rows, 0.0)


def shared_effect_posterior(state: McmcState, data: DataMatrix,
                            kernel: KernelMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian conditional of the shared effect given the active rows.

    Returns (mean, per-eigendirection variances, eigenvector basis); with no
    active rows this is the prior.
    """
    R = data.values - state.loadings @ state.scores
    active = state.inter_mask.astype(bool)
    d, U = kernel.eigensystem()
    w = 1.0 / state.noise_var[active]
    total_w = float(w.sum())
    var_diag = d / (1.0 + total_w * d)
    if active.any():
        b = (R[active] * w[:, None]).sum(axis=0)
        mean = U @ (var_diag * (U.T @ b))
    else:
        mean = np.zeros(kernel.n)
    return mean, var_diag, U


def update_shared_effect(state: McmcState, data: DataMatrix, spec: ModelSpec,
                         layout: PriorLayout, kernel: KernelMatrix,
                         rng: np.random.Generator) -> None:
    """Draw the shared effect given the active rows, then flip each indicator
    by comparing the row likelihood under the shared effect versus zero."""
    mean, var_diag, U = shared_effect_posterior(state, data, kernel)
    fstar = mean + U @ (np.sqrt(var_diag) * rng.standard_normal(kernel.n))
    state.shared_effect = fstar

    R = data.values - state.loadings @ state.scores
    quad = R @ fstar
    ss = float(fstar @ fstar)
    logodds = _logit(state.inter_prob) + (quad - 0.5 * ss) / state.noise_var
    p = expit(logodds)
    p = np.where(np.isnan(layout.fixed_inter), p, layout.fixed_inter)
    mask = rng.random(p.shape[0]) < p
    state.inter_mask = mask.astype(np.int8)
    state.effects = np.where(mask[:, None], fstar[None, :], 0.0)


def column_delta_log_joint(state: McmcState, data: DataMatrix, spec: ModelSpec,
                           kernel: KernelMatrix, j: int, proposal: np.ndarray,
                           gp_logdens_current: float) -> tuple[float, KernelMatrix, float]:
    """Log-joint change for replacing score column j with ``proposal``.

    Covers the data likelihood at column j, the standard-normal score prior,
    and the GP density of the latent effect structure under the rebuilt
    kernel. Returns (delta, proposed kernel, proposed GP density).
    """
    current = state.scores[:, j]
    x = data.values[:, j] - state.effects[:, j]
    w = 1.0 / state.noise_var
    res_cur = x - state.loadings @ current
    res_prop = x - state.loadings @ proposal
    delta = -0.5 * float((res_prop * res_prop - res_cur * res_cur) @ w)
    delta -= 0.5 * (float(proposal @ proposal) - float(current @ current))

    scores_prop = state.scores.copy()
    scores_prop[:, j] = proposal
    kernel_prop = se_kernel(scores_prop, spec.length_scale)
    gp_prop = gp_prior_logdens(kernel_prop, state, spec)
    delta += gp_prop - gp_logdens_current
    return delta, kernel_prop, gp_prop


class GpChain:
    """One nonlinear-family chain; owns the kernel tied to the current scores."""

    def __init__(self, spec: ModelSpec, data: DataMatrix, seed: int = 0, chain: int = 0,
                 rw_step: float = 0.1, adapt_rw: bool = True, mh_target: float = 0.30):
        if spec.family is not Family.GP:
            raise SpecConflict("GpChain requires a gp family spec")
        self.spec = validate_spec(spec)
        self.data = data
        self.layout = build_layout(spec, data.n_features)
        self.streams = RngStreams(seed, chain)
        self.state = initial_state(spec, data, self.layout, self.streams.get("init"))
        self.kernel = se_kernel(self.state.scores, spec.length_scale)
        self.rw_step = float(rw_step)
        self.adapt_rw = adapt_rw
        self.mh_target = mh_target
        self.iteration = 0
        self.adapting = True
        # accepted / proposed per column, tallied only while adaptation is frozen
        self.accept_counts = np.zeros((data.n_samples, 2), dtype=np.int64)

    def freeze_adaptation(self) -> None:
        self.adapting = False

    def update_score_columns(self) -> int:
        """Random-walk Metropolis over every score column; returns the number
        of accepted proposals in this sweep."""
        rng = self.streams.get("scores_mh")
        state, spec = self.state, self.spec
        gp_cur = gp_prior_logdens(self.kernel, state, spec)
        accepted = 0
        for j in range(self.data.n_samples):
            proposal = state.scores[:, j] + self.rw_step * rng.standard_normal(spec.n_factors)
            log_u = np.log(rng.random())
            try:
                delta, kernel_prop, gp_prop = column_delta_log_joint(
                    state, self.data, spec, self.kernel, j, proposal, gp_cur)
            except CholeskyFailure:
                if not self.adapting:
                    self.accept_counts[j, 1] += 1
                continue
            if not self.adapting:
                self.accept_counts[j, 1] += 1
            if log_u < delta:
                state.scores[:, j] = proposal
                self.kernel = kernel_prop
                gp_cur = gp_prop
                accepted += 1
                if not self.adapting:
                    self.accept_counts[j, 0] += 1
        return accepted

    def sweep(self) -> None:
        update_loadings(self.state, self.data, self.spec, self.layout,
                        self.streams.get("loadings"))
        accepted = self.update_score_columns()
        if self.adapting and self.adapt_rw:
            rate = accepted / self.data.n_samples
            gain = max((self.iteration + 1) ** -_ADAPT_DECAY, _ADAPT_GAIN_FLOOR)
            step = np.log(self.rw_step) + gain * (rate - self.mh_target)
            self.rw_step = float(np.clip(np.exp(step), *_RW_STEP_BOUNDS))
        if self.spec.shared_effect:
            update_shared_effect(self.state, self.data, self.spec, self.layout,
                                 self.kernel, self.streams.get("effects"))
        else:
            update_effect_rows(self.state, self.data, self.spec, self.layout,
                               self.kernel, self.streams.get("effects"))
        update_noise(self.state, self.data, self.spec, self.streams.get("noise"))
        self._update_probs()
        self.iteration += 1

    def _update_probs(self) -> None:
        rng = self.streams.get("probs")
        lay, spec, state = self.layout, self.spec, self.state
        state.load_prob = sample_inclusion_probs(
            rng, state.load_mask, lay.fixed_load, lay.load_group,
            lay.load_a, lay.load_b, spec.load_prob_model.value)
        state.inter_prob = sample_inclusion_probs(
            rng, state.inter_mask, lay.fixed_inter, lay.inter_group,
            lay.inter_a, lay.inter_b, spec.inter_prob_model.value)


def run_gp_chain(spec: ModelSpec, data: DataMatrix, n_iters: int = 600,
                 burn_in: int | None = None, thin: int = 1, seed: int = 0,
                 chain: int = 0, rw_step: float = 0.1, adapt_rw: bool = True,
                 mh_target: float = 0.30) -> PosteriorDraws:
    """Run one chain; the proposal scale adapts during burn-in (Robbins-Monro
    toward the target acceptance rate) and is frozen afterwards."""
    from .model import McmcSettings

    settings = McmcSettings(n_iters=n_iters, burn_in=burn_in, thin=thin, seed=seed)
    burn = settings.resolve_burn_in(spec.family)
    gc = GpChain(spec, data, seed=seed, chain=chain, rw_step=rw_step,
                 adapt_rw=adapt_rw, mh_target=mh_target)
    states: list[McmcState] = []
    for it in range(1, n_iters + 1):
        if it == burn + 1:
            gc.freeze_adaptation()
        gc.sweep()
        if it > burn and (it - burn) % thin == 0:
            states.append(gc.state.copy())
    return PosteriorDraws(
        spec=spec, states=states, burn_in=burn, thin=thin, n_iters=n_iters,
        seed=seed, chain=chain, feature_ids=data.feature_ids, sample_ids=data.sample_ids,
        mh_accept_counts=gc.accept_counts, rw_step_final=gc.rw_step)


def log_joint(state: McmcState, data: DataMatrix, spec: ModelSpec,
              kernel: KernelMatrix | None = None,
              layout: PriorLayout | None = None) -> float:
    """Unnormalized log joint of the nonlinear model at a state (diagnostics
    and conditional-correctness checks)."""
    from .mult import _prob_block

    if layout is None:
        layout = build_layout(spec, data.n_features)
    if kernel is None:
        kernel = se_kernel(state.scores, spec.length_scale)
    R = data.values - state.loadings @ state.scores - state.effects
    w = 1.0 / state.noise_var
    total = -0.5 * float(np.sum(R * R * w[:, None]))
    total -= 0.5 * data.n_samples * float(np.sum(np.log(state.noise_var)))
    total -= 0.5 * float(np.sum(state.scores ** 2))

    on = state.load_mask.astype(bool)
    total -= 0.5 * float(np.sum(state.loadings[on] ** 2)) / spec.slab_var_loading
    total -= 0.5 * int(on.sum()) * np.log(spec.slab_var_loading)

    total += gp_prior_logdens(kernel, state, spec)

    a, b = spec.noise_prior
    total += float(np.sum(-(a + 1.0) * np.log(state.noise_var) - b / state.noise_var))
    total += _prob_block(state.load_mask, state.load_prob, layout.fixed_load,
                         layout.load_group, layout.load_a, layout.load_b,
                         spec.load_prob_model.value)
    total += _prob_block(state.inter_mask, state.inter_prob, layout.fixed_inter,
                         layout.inter_group, layout.inter_a, layout.inter_b,
                         spec.inter_prob_model.value)
    return total
