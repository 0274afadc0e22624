"""Gibbs sampler for the multiplicative-interaction factor model.

The observation model is X = loadings @ scores + inter_loadings @ inter_scores
+ noise, with spike-and-slab priors on both loading matrices, standard-normal
priors on the scores, and inverse-gamma noise variances. Each interaction
score row follows the product of its two factor-score rows, either through a
tight Gaussian tie (approach 1) or exactly (approach 2).

Update scheme per sweep: loading rows (indicator integrated over the
coefficient, then the coefficient given the indicator), score columns by
single-coordinate Gibbs (the conditional stays Gaussian despite the score
product), interaction-score columns (approach 1), interaction-loading rows,
noise variances, inclusion probabilities. Bayes factors are formed in log
space throughout.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import SpecConflict
from .model import (
    DataMatrix,
    Family,
    McmcState,
    ModelSpec,
    PosteriorDraws,
    PriorLayout,
    build_layout,
    factor_pairs,
    validate_spec,
)
from .rng import RngStreams

_PROB_FLOOR = 1e-300


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _PROB_FLOOR, 1.0 - 1e-16)
    return np.log(p) - np.log1p(-p)


def slab_posterior(residual: np.ndarray, regressor: np.ndarray,
                   noise_var: np.ndarray, slab_var: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian slab conditional for one coefficient per row.

    ``residual`` (m, n) excludes the coefficient's own contribution;
    ``regressor`` (n,) multiplies the coefficient in the row means.
    Returns (mean, variance) arrays of length m.
    """
    ss = float(regressor @ regressor)
    var = 1.0 / (1.0 / slab_var + ss / noise_var)
    mean = var * (residual @ regressor) / noise_var
    return mean, var


def slab_log_bayes_factor(mean: np.ndarray, var: np.ndarray, slab_var: float) -> np.ndarray:
    """log of the slab/spike marginal likelihood ratio given the slab conditional."""
    return 0.5 * (np.log(var) - np.log(slab_var)) + 0.5 * mean * mean / var


def sample_spike_slab(rng: np.random.Generator, logit_prob: np.ndarray, log_bf: np.ndarray,
                      mean: np.ndarray, var: np.ndarray,
                      fixed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Draw (indicator, coefficient) for one column of a spike-and-slab block.

    ``fixed`` holds NaN for free entries and 0/1 where the inclusion
    probability is degenerate.
    """
    p = expit(logit_prob + log_bf)
    p = np.where(np.isnan(fixed), p, fixed)
    mask = rng.random(p.shape[0]) < p
    draws = mean + np.sqrt(var) * rng.standard_normal(p.shape[0])
    return mask.astype(np.int8), np.where(mask, draws, 0.0)


def inclusion_posterior_params(mask: np.ndarray, fixed: np.ndarray, groups: np.ndarray,
                               prior_a: np.ndarray, prior_b: np.ndarray, model: str):
    """Beta posterior parameters for the inclusion probabilities.

    Degenerate entries never enter the counts. Returns per-entry (a, b) arrays
    for the per-entry model, a scalar pair for the global model, and a
    {group_label: (a, b)} dict for the grouped model.
    """
    free = np.isnan(fixed)
    k = mask.astype(float)
    if model in ("per_entry", "per_feature"):
        return prior_a + k, prior_b + 1.0 - k
    if model == "global":
        return (float(prior_a.flat[0] + k[free].sum()),
                float(prior_b.flat[0] + free.sum() - k[free].sum()))
    if model == "grouped":
        out = {}
        grp = np.broadcast_to(groups.reshape(groups.shape + (1,) * (mask.ndim - groups.ndim)),
                              mask.shape)
        for g in np.unique(grp):
            sel = free & (grp == g)
            a0 = prior_a[grp == g].flat[0]
            b0 = prior_b[grp == g].flat[0]
            out[int(g)] = (float(a0 + k[sel].sum()), float(b0 + sel.sum() - k[sel].sum()))
        return out
    raise SpecConflict(f"unknown inclusion probability model {model!r}")


def sample_inclusion_probs(rng: np.random.Generator, mask: np.ndarray, fixed: np.ndarray,
                           groups: np.ndarray, prior_a: np.ndarray, prior_b: np.ndarray,
                           model: str) -> np.ndarray:
    """Draw the inclusion probabilities, writing shared values into every entry
    they govern; degenerate entries keep their fixed value."""
    params = inclusion_posterior_params(mask, fixed, groups, prior_a, prior_b, model)
    prob = np.empty(mask.shape, dtype=float)
    if model in ("per_entry", "per_feature"):
        a, b = params
        prob[...] = rng.beta(a, b)
    elif model == "global":
        a, b = params
        prob[...] = rng.beta(a, b)
    else:
        grp = np.broadcast_to(groups.reshape(groups.shape + (1,) * (mask.ndim - groups.ndim)),
                              mask.shape)
        for g, (a, b) in params.items():
            prob[grp == g] = rng.beta(a, b)
    free = np.isnan(fixed)
    return np.where(free, prob, fixed)


def interaction_term(state: McmcState, spec: ModelSpec) -> np.ndarray:
    if spec.is_mult:
        return state.inter_loadings @ state.inter_scores
    return state.effects


def residual_matrix(state: McmcState, data: DataMatrix, spec: ModelSpec) -> np.ndarray:
    return data.values - state.loadings @ state.scores - interaction_term(state, spec)


def update_loadings(state: McmcState, data: DataMatrix, spec: ModelSpec,
                    layout: PriorLayout, rng: np.random.Generator) -> None:
    """Spike-and-slab update of every loading column (shared by both families)."""
    for l in range(spec.n_factors):
        reg = state.scores[l]
        R = residual_matrix(state, data, spec)
        R += np.outer(state.loadings[:, l], reg)
        mean, var = slab_posterior(R, reg, state.noise_var, spec.slab_var_loading)
        log_bf = slab_log_bayes_factor(mean, var, spec.slab_var_loading)
        mask, coef = sample_spike_slab(rng, _logit(state.load_prob[:, l]), log_bf,
                                       mean, var, layout.fixed_load[:, l])
        state.load_mask[:, l] = mask
        state.loadings[:, l] = coef


def update_inter_loadings(state: McmcState, data: DataMatrix, spec: ModelSpec,
                          layout: PriorLayout, rng: np.random.Generator) -> None:
    for t in range(spec.n_pairs):
        reg = state.inter_scores[t]
        R = residual_matrix(state, data, spec)
        R += np.outer(state.inter_loadings[:, t], reg)
        mean, var = slab_posterior(R, reg, state.noise_var, spec.slab_var_inter)
        log_bf = slab_log_bayes_factor(mean, var, spec.slab_var_inter)
        mask, coef = sample_spike_slab(rng, _logit(state.inter_prob[:, t]), log_bf,
                                       mean, var, layout.fixed_inter[:, t])
        state.inter_mask[:, t] = mask
        state.inter_loadings[:, t] = coef


def score_conditional(state: McmcState, data: DataMatrix, spec: ModelSpec,
                      l: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional (mean, variance) of score row l across all columns.

    Under approach 2 the effective regressor per cell folds in the interaction
    loadings times the partner scores; under approach 1 the product prior adds
    pseudo-observations from the interaction scores.
    """
    pairs = factor_pairs(spec.n_factors)
    w = 1.0 / state.noise_var
    if spec.family is Family.MULT_APPROACH2:
        c = np.repeat(state.loadings[:, l][:, None], data.n_samples, axis=1)
        for t, (l1, l2) in enumerate(pairs):
            if l == l1:
                c += np.outer(state.inter_loadings[:, t], state.scores[l2])
            elif l == l2:
                c += np.outer(state.inter_loadings[:, t], state.scores[l1])
        R = residual_matrix(state, data, spec) + c * state.scores[l][None, :]
        prec = 1.0 + (c * c * w[:, None]).sum(axis=0)
        num = (c * R * w[:, None]).sum(axis=0)
    else:
        a = state.loadings[:, l]
        R = residual_matrix(state, data, spec) + np.outer(a, state.scores[l])
        prec = np.full(data.n_samples, 1.0 + float(a * a @ w))
        num = (a * w) @ R
        for t, (l1, l2) in enumerate(pairs):
            partner = l2 if l == l1 else (l1 if l == l2 else None)
            if partner is None:
                continue
            other = state.scores[partner]
            prec += other * other / spec.product_var
            num += other * state.inter_scores[t] / spec.product_var
    var = 1.0 / prec
    return num * var, var


def refresh_products(state: McmcState, spec: ModelSpec) -> None:
    """Recompute the interaction scores as exact score products (approach 2)."""
    for t, (l1, l2) in enumerate(factor_pairs(spec.n_factors)):
        state.inter_scores[t] = state.scores[l1] * state.scores[l2]


def update_scores(state: McmcState, data: DataMatrix, spec: ModelSpec,
                  rng: np.random.Generator) -> None:
    for l in range(spec.n_factors):
        mean, var = score_conditional(state, data, spec, l)
        state.scores[l] = mean + np.sqrt(var) * rng.standard_normal(data.n_samples)
        if spec.family is Family.MULT_APPROACH2:
            refresh_products(state, spec)


def inter_score_conditional(state: McmcState, data: DataMatrix, spec: ModelSpec,
                            t: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional of interaction-score row t (approach 1 only)."""
    l1, l2 = factor_pairs(spec.n_factors)[t]
    th = state.inter_loadings[:, t]
    w = 1.0 / state.noise_var
    R = residual_matrix(state, data, spec) + np.outer(th, state.inter_scores[t])
    prior_mean = state.scores[l1] * state.scores[l2]
    prec = 1.0 / spec.product_var + float(th * th @ w)
    num = prior_mean / spec.product_var + (th * w) @ R
    var = np.full(data.n_samples, 1.0 / prec)
    return num * var, var


def update_inter_scores(state: McmcState, data: DataMatrix, spec: ModelSpec,
                        rng: np.random.Generator) -> None:
    for t in range(spec.n_pairs):
        mean, var = inter_score_conditional(state, data, spec, t)
        state.inter_scores[t] = mean + np.sqrt(var) * rng.standard_normal(data.n_samples)


def noise_conditional(state: McmcState, data: DataMatrix,
                      spec: ModelSpec) -> tuple[float, np.ndarray]:
    """Inverse-gamma conditional (shape, per-row scale) for the noise variances."""
    a, b = spec.noise_prior
    R = residual_matrix(state, data, spec)
    rss = np.sum(R * R, axis=1)
    return a + data.n_samples / 2.0, b + 0.5 * rss


def update_noise(state: McmcState, data: DataMatrix, spec: ModelSpec,
                 rng: np.random.Generator) -> None:
    shape, scale = noise_conditional(state, data, spec)
    state.noise_var = scale / rng.gamma(shape, 1.0, size=scale.shape)


def update_probs(state: McmcState, spec: ModelSpec, layout: PriorLayout,
                 rng: np.random.Generator) -> None:
    state.load_prob = sample_inclusion_probs(
        rng, state.load_mask, layout.fixed_load, layout.load_group,
        layout.load_a, layout.load_b, spec.load_prob_model.value)
    state.inter_prob = sample_inclusion_probs(
        rng, state.inter_mask, layout.fixed_inter, layout.inter_group,
        layout.inter_a, layout.inter_b, spec.inter_prob_model.value)


def initial_state(spec: ModelSpec, data: DataMatrix, layout: PriorLayout,
                  rng: np.random.Generator) -> McmcState:
    """Zero loadings, standard-normal scores, unit noise variances; the
    inclusion probabilities start at their prior means (fixed entries at their
    degenerate values) and the indicators are drawn from them."""
    m, n, L = data.n_features, data.n_samples, spec.n_factors
    scores = rng.standard_normal((L, n))
    load_prob = layout.load_a / (layout.load_a + layout.load_b)
    load_prob = np.where(np.isnan(layout.fixed_load), load_prob, layout.fixed_load)
    inter_prob = layout.inter_a / (layout.inter_a + layout.inter_b)
    inter_prob = np.where(np.isnan(layout.fixed_inter), inter_prob, layout.fixed_inter)
    load_mask = (rng.random((m, L)) < load_prob).astype(np.int8)
    inter_mask = (rng.random(inter_prob.shape) < inter_prob).astype(np.int8)

    state = McmcState(
        loadings=np.zeros((m, L)),
        scores=scores,
        load_mask=load_mask,
        load_prob=load_prob,
        noise_var=np.ones(m),
        inter_mask=inter_mask,
        inter_prob=inter_prob,
    )
    if spec.is_mult:
        state.inter_loadings = np.zeros((m, spec.n_pairs))
        state.inter_scores = np.empty((spec.n_pairs, n))
        refresh_products(state, spec)
    else:
        state.effects = np.zeros((m, n))
        if spec.shared_effect:
            state.shared_effect = np.zeros(n)
    return state


class MultChain:
    """One multiplicative-family chain over immutable data."""

    def __init__(self, spec: ModelSpec, data: DataMatrix, seed: int = 0, chain: int = 0):
        if not spec.is_mult:
            raise SpecConflict("MultChain requires a multiplicative family spec")
        self.spec = validate_spec(spec)
        self.data = data
        self.layout = build_layout(spec, data.n_features)
        self.streams = RngStreams(seed, chain)
        self.state = initial_state(spec, data, self.layout, self.streams.get("init"))
        self.iteration = 0

    def sweep(self) -> None:
        update_loadings(self.state, self.data, self.spec, self.layout,
                        self.streams.get("loadings"))
        update_scores(self.state, self.data, self.spec, self.streams.get("scores"))
        if self.spec.family is Family.MULT_APPROACH1:
            update_inter_scores(self.state, self.data, self.spec,
                                self.streams.get("inter_scores"))
        update_inter_loadings(self.state, self.data, self.spec, self.layout,
                              self.streams.get("inter_loadings"))
        update_noise(self.state, self.data, self.spec, self.streams.get("noise"))
        update_probs(self.state, self.spec, self.layout, self.streams.get("probs"))
        self.iteration += 1


def run_mult_chain(spec: ModelSpec, data: DataMatrix, n_iters: int = 600,
                   burn_in: int | None = None, thin: int = 1, seed: int = 0,
                   chain: int = 0) -> PosteriorDraws:
    """Run one chain and return the retained states; deterministic given seed."""
    from .model import McmcSettings

    settings = McmcSettings(n_iters=n_iters, burn_in=burn_in, thin=thin, seed=seed)
    burn = settings.resolve_burn_in(spec.family)
    mc = MultChain(spec, data, seed=seed, chain=chain)
    states: list[McmcState] = []
    for it in range(1, n_iters + 1):
        mc.sweep()
        if it > burn and (it - burn) % thin == 0:
            states.append(mc.state.copy())
    return PosteriorDraws(
        spec=spec, states=states, burn_in=burn, thin=thin, n_iters=n_iters,
        seed=seed, chain=chain, feature_ids=data.feature_ids, sample_ids=data.sample_ids)


def log_joint(state: McmcState, data: DataMatrix, spec: ModelSpec,
              layout: PriorLayout | None = None) -> float:
    """Unnormalized log joint density of the multiplicative model at a state.

    Used by conditional-correctness checks; under approach 2 the interaction
    scores are recomputed from the current scores so the product constraint is
    honored when a score coordinate is perturbed.
    """
    if layout is None:
        layout = build_layout(spec, data.n_features)
    if spec.family is Family.MULT_APPROACH2:
        inter_scores = np.stack([state.scores[l1] * state.scores[l2]
                                 for l1, l2 in factor_pairs(spec.n_factors)])
    else:
        inter_scores = state.inter_scores
    mean = state.loadings @ state.scores + state.inter_loadings @ inter_scores
    R = data.values - mean
    w = 1.0 / state.noise_var
    total = -0.5 * float(np.sum(R * R * w[:, None]))
    total -= 0.5 * data.n_samples * float(np.sum(np.log(state.noise_var)))

    total -= 0.5 * float(np.sum(state.scores ** 2))

    on = state.load_mask.astype(bool)
    total -= 0.5 * float(np.sum(state.loadings[on] ** 2)) / spec.slab_var_loading
    total -= 0.5 * int(on.sum()) * math.log(spec.slab_var_loading)
    on_t = state.inter_mask.astype(bool)
    total -= 0.5 * float(np.sum(state.inter_loadings[on_t] ** 2)) / spec.slab_var_inter
    total -= 0.5 * int(on_t.sum()) * math.log(spec.slab_var_inter)

    if spec.family is Family.MULT_APPROACH1:
        prod = np.stack([state.scores[l1] * state.scores[l2]
                         for l1, l2 in factor_pairs(spec.n_factors)])
        dev = state.inter_scores - prod
        total -= 0.5 * float(np.sum(dev * dev)) / spec.product_var

    a, b = spec.noise_prior
    total += float(np.sum(-(a + 1.0) * np.log(state.noise_var) - b / state.noise_var))

    total += _prob_block(state.load_mask, state.load_prob, layout.fixed_load,
                         layout.load_group, layout.load_a, layout.load_b,
                         spec.load_prob_model.value)
    total += _prob_block(state.inter_mask, state.inter_prob, layout.fixed_inter,
                         layout.inter_group, layout.inter_a, layout.inter_b,
                         spec.inter_prob_model.value)
    return total


def _prob_block(mask, prob, fixed, groups, prior_a, prior_b, model) -> float:
    """Bernoulli terms over free entries plus the Beta prior terms, counted
    once per distinct probability parameter (normalizing constants omitted)."""
    free = np.isnan(fixed)
    k = mask.astype(float)[free]
    p = np.clip(prob[free], _PROB_FLOOR, 1 - 1e-16)
    total = float(np.sum(k * np.log(p) + (1 - k) * np.log1p(-p)))
    if model in ("per_entry", "per_feature"):
        total += float(np.sum((prior_a[free] - 1) * np.log(p)
                              + (prior_b[free] - 1) * np.log1p(-p)))
    elif model == "global":
        p_all = np.clip(prob, _PROB_FLOOR, 1 - 1e-16)
        p0 = float(p_all.flat[0])
        total += (prior_a.flat[0] - 1) * np.log(p0) + (prior_b.flat[0] - 1) * np.log1p(-p0)
    else:
        grp = np.broadcast_to(groups.reshape(groups.shape + (1,) * (mask.ndim - groups.ndim)),
                              mask.shape)
        p_all = np.clip(prob, _PROB_FLOOR, 1 - 1e-16)
        for g in np.unique(grp):
            sel = grp == g
            p0 = float(p_all[sel].flat[0])
            total += ((prior_a[sel].flat[0] - 1) * np.log(p0)
                      + (prior_b[sel].flat[0] - 1) * np.log1p(-p0))
    return total
