"""Applied pipeline: seed-gene windows, cleaning, candidate selection,
interaction detection, the cross-dataset overlap permutation test, and
posterior summaries.

Seed genes anchor the factor interpretation: each group is assumed to load on
exactly one factor with a common sign and to carry no interaction. Cleaning
removes group members whose fitted pattern violates that assumption;
candidate selection then keeps the remaining genes loading on both factors,
since those are the plausible carriers of interaction effects.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AllRemoved, ConfigError, EmptyWindowWarning, InsufficientDraws
from .model import DataMatrix, McmcSettings, ModelSpec, PosteriorDraws, mult_spec
from .rng import stream


@dataclass(frozen=True)
class Annotation:
    """Probe positions on the genome."""

    probe_ids: tuple[str, ...]
    chromosomes: tuple[str, ...]
    positions: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.int64)
        if len(self.probe_ids) != len(self.chromosomes) or len(self.probe_ids) != positions.shape[0]:
            raise ConfigError("annotation columns have mismatched lengths")
        if len(set(self.probe_ids)) != len(self.probe_ids):
            raise ConfigError("annotation probe ids are not unique")
        if (positions < 0).any():
            raise ConfigError("annotation positions must be nonnegative")
        positions.flags.writeable = False
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "probe_ids", tuple(str(p) for p in self.probe_ids))
        object.__setattr__(self, "chromosomes", tuple(str(c) for c in self.chromosomes))

    def __len__(self) -> int:
        return len(self.probe_ids)


def seed_gene_window(annotation: Annotation, chromosome: str, center: int,
                     half_width: int) -> np.ndarray:
    """Indices of probes on the chromosome within ``half_width`` of ``center``."""
    if half_width < 0:
        raise ConfigError(f"half_width must be nonnegative, got {half_width}")
    chrom = np.asarray(annotation.chromosomes) == str(chromosome)
    near = np.abs(annotation.positions - int(center)) <= int(half_width)
    idx = np.flatnonzero(chrom & near)
    if idx.size == 0:
        warnings.warn(
            f"window chr{chromosome}:{center}±{half_width} matched no probes",
            EmptyWindowWarning, stacklevel=2)
    return idx


def two_factor_null_spec(seed_groups: dict[int, frozenset[int]] | None = None,
                         **kwargs) -> ModelSpec:
    """Two-factor model with the interaction block disabled."""
    return mult_spec(2, n_factors=2, seed_groups=seed_groups,
                     include_interactions=False, **kwargs)


@dataclass(frozen=True)
class RemovalRecord:
    feature: int
    group: str
    reason: str  # low_own_inclusion | sign_mismatch | cross_loading


def _mixture_mean(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean over the states where the indicator is on (0 where never on)."""
    count = mask.sum(axis=0)
    total = (values * mask).sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def _fit_null_model(data: DataMatrix, settings: McmcSettings,
                    seed_groups: dict[int, frozenset[int]] | None = None) -> PosteriorDraws:
    from .mult import run_mult_chain

    spec = two_factor_null_spec(seed_groups=seed_groups)
    return run_mult_chain(spec, data, n_iters=settings.n_iters, burn_in=settings.burn_in,
                          thin=settings.thin, seed=settings.seed)


def _submatrix(data: DataMatrix, rows: np.ndarray) -> DataMatrix:
    return DataMatrix(data.values[rows], tuple(data.feature_ids[i] for i in rows),
                      data.sample_ids)


def clean_seed_genes(data: DataMatrix, group1, group2, settings: McmcSettings,
                     ) -> tuple[np.ndarray, np.ndarray, list[RemovalRecord]]:
    """Drop seed genes whose fitted pattern contradicts the group assumption.

    Fits an unconstrained two-factor no-interaction model to the stacked seed
    submatrix, matches factors to groups by mean inclusion, and removes a gene
    when its own-factor inclusion probability is at most 0.5, its loading sign
    disagrees with the group majority, or it loads on the other group's factor.
    """
    g1 = np.asarray(sorted(set(int(i) for i in group1)), dtype=int)
    g2 = np.asarray(sorted(set(int(i) for i in group2)), dtype=int)
    if g1.size == 0 or g2.size == 0:
        raise ConfigError("both seed groups must be nonempty")
    if np.intersect1d(g1, g2).size:
        raise ConfigError("seed groups overlap")
    rows = np.concatenate([g1, g2])
    draws = _fit_null_model(_submatrix(data, rows), settings)

    masks = draws.stack("load_mask").astype(float)     # (S, k, 2)
    loadings = draws.stack("loadings")                 # (S, k, 2)
    incl = masks.mean(axis=0)                          # (k, 2)
    est = _mixture_mean(loadings, masks)               # (k, 2)

    in1 = np.arange(g1.size)
    in2 = np.arange(g1.size, rows.size)
    # assign each group its factor by the larger mean inclusion
    direct = incl[in1, 0].mean() + incl[in2, 1].mean()
    swapped = incl[in1, 1].mean() + incl[in2, 0].mean()
    f1, f2 = (0, 1) if direct >= swapped else (1, 0)

    report: list[RemovalRecord] = []
    keep1, keep2 = [], []
    for name, members, local, own, other, keep in (
        ("G1", g1, in1, f1, f2, keep1),
        ("G2", g2, in2, f2, f1, keep2),
    ):
        loaded = incl[local, own] > 0.5
        signs = np.sign(est[local, own])
        voting = signs[loaded]
        majority = 1.0 if voting.sum() >= 0 else -1.0
        for k, feature in zip(local, members):
            if incl[k, own] <= 0.5:
                report.append(RemovalRecord(int(feature), name, "low_own_inclusion"))
            elif np.sign(est[k, own]) != majority:
                report.append(RemovalRecord(int(feature), name, "sign_mismatch"))
            elif incl[k, other] > 0.5:
                report.append(RemovalRecord(int(feature), name, "cross_loading"))
            else:
                keep.append(int(feature))
        if not keep:
            raise AllRemoved(name)
    return np.asarray(keep1, dtype=int), np.asarray(keep2, dtype=int), report


@dataclass(frozen=True)
class CandidateRule:
    threshold: float = 0.5
    require_both: bool = True


def select_candidate_genes(data: DataMatrix, group1, group2, settings: McmcSettings,
                           rule: CandidateRule = CandidateRule()) -> np.ndarray:
    """Candidate features for interaction effects: everything outside the seed
    groups whose loading inclusion probability clears the threshold on both
    factors (on either factor with ``require_both`` off).

    The underlying fit is the two-factor no-interaction model with degenerate
    seed priors keeping the factor interpretation anchored.
    """
    g1 = frozenset(int(i) for i in group1)
    g2 = frozenset(int(i) for i in group2)
    draws = _fit_null_model(data, settings, seed_groups={0: g1, 1: g2})
    incl = draws.stack("load_mask").astype(float).mean(axis=0)  # (m, 2)
    seeds = g1 | g2
    mask = (incl[:, 0] > rule.threshold) & (incl[:, 1] > rule.threshold) \
        if rule.require_both else \
        (incl[:, 0] > rule.threshold) | (incl[:, 1] > rule.threshold)
    mask[list(seeds)] = False
    return np.flatnonzero(mask)


def interaction_probabilities(draws: PosteriorDraws) -> np.ndarray:
    """Per-feature posterior probability of carrying an interaction effect:
    the retained-state mean of the feature's indicator (any pair indicator for
    the multiplicative families)."""
    z = draws.stack("inter_mask")
    if z.ndim == 3:
        z = z.any(axis=2)
    return z.astype(float).mean(axis=0)


def detect_interactions(draws: PosteriorDraws, threshold: float = 0.5) -> dict[int, float]:
    """Features whose interaction probability exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    probs = interaction_probabilities(draws)
    return {int(i): float(probs[i]) for i in np.flatnonzero(probs > threshold)}


@dataclass(frozen=True)
class OverlapTestInput:
    """Configuration of the cross-dataset overlap test."""

    population_size: int
    per_dataset_counts: tuple[int, ...]
    observed_overlap: int
    n_replicates: int = 100_000

    def __post_init__(self):
        if self.population_size < 1:
            raise ConfigError("population_size must be positive")
        if len(self.per_dataset_counts) < 2:
            raise ConfigError("need at least two datasets")
        if any(not 0 <= c <= self.population_size for c in self.per_dataset_counts):
            raise ConfigError("every dataset count must lie in [0, population_size]")
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be positive")
        if self.observed_overlap < 0:
            raise ConfigError("observed_overlap must be nonnegative")


@dataclass(frozen=True)
class OverlapReplicates:
    overlaps: np.ndarray
    mean: float
    sd: float
    n_at_least_observed: int


def overlap_permutation_test(inp: OverlapTestInput, seed: int = 0,
                             ) -> tuple[float, OverlapReplicates]:
    """Null distribution of the summed pairwise overlap between gene sets drawn
    uniformly at random without replacement, one set per dataset.

    The p-value is the fraction of replicates whose overlap reaches the
    observed value.
    """
    rng = stream(seed, 0, "overlap")
    n_sets = len(inp.per_dataset_counts)
    pop = inp.population_size
    overlaps = np.empty(inp.n_replicates, dtype=np.int64)
    members = np.zeros((n_sets, pop), dtype=bool)
    for k in range(inp.n_replicates):
        members[:] = False
        for d, count in enumerate(inp.per_dataset_counts):
            members[d, rng.choice(pop, size=count, replace=False)] = True
        total = 0
        for a in range(n_sets - 1):
            for b in range(a + 1, n_sets):
                total += int(np.count_nonzero(members[a] & members[b]))
        overlaps[k] = total
    at_least = int(np.count_nonzero(overlaps >= inp.observed_overlap))
    p_value = at_least / inp.n_replicates
    return p_value, OverlapReplicates(
        overlaps=overlaps, mean=float(overlaps.mean()),
        sd=float(overlaps.std(ddof=1)) if inp.n_replicates > 1 else 0.0,
        n_at_least_observed=at_least)


def two_window_converged(trace: np.ndarray, z_limit: float = 3.0) -> bool:
    """Mean-comparison diagnostic between the first 10% and last 50% of the
    retained trace; standardized difference below the limit passes."""
    trace = np.asarray(trace, dtype=float)
    s = trace.shape[0]
    k1 = max(1, s // 10)
    first = trace[:k1]
    last = trace[s - max(1, s // 2):]
    v1 = first.var(ddof=1) / first.size if first.size > 1 else 0.0
    v2 = last.var(ddof=1) / last.size if last.size > 1 else 0.0
    diff = abs(first.mean() - last.mean())
    denom = np.sqrt(v1 + v2)
    scale = 1e-12 * (1.0 + abs(first.mean()))
    if denom <= scale:  # numerically constant trace
        return bool(diff <= scale)
    return bool(diff / denom < z_limit)


@dataclass(frozen=True)
class ParameterSummary:
    name: str
    role: str
    estimate: float
    ci_low: float
    ci_high: float
    inclusion_prob: float | None
    converged: bool


@dataclass(frozen=True)
class PosteriorSummary:
    rows: tuple[ParameterSummary, ...] = field(default_factory=tuple)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "role", "estimate", "ci_low", "ci_high",
                             "inclusion_prob", "converged"])
            for r in self.rows:
                writer.writerow([
                    r.name, r.role, f"{r.estimate:.10g}", f"{r.ci_low:.10g}",
                    f"{r.ci_high:.10g}",
                    "" if r.inclusion_prob is None else f"{r.inclusion_prob:.10g}",
                    "1" if r.converged else "0"])

    def by_name(self) -> dict[str, ParameterSummary]:
        return {r.name: r for r in self.rows}


def _plain_summary(name: str, role: str, trace: np.ndarray) -> ParameterSummary:
    lo, hi = np.percentile(trace, [2.5, 97.5])
    return ParameterSummary(name, role, float(trace.mean()), float(lo), float(hi),
                            None, two_window_converged(trace))


def _mixture_summary(name: str, role: str, trace: np.ndarray,
                     indicator: np.ndarray) -> ParameterSummary:
    """Point estimate and interval from the dominant mixture component: the
    slab states when the inclusion probability exceeds 0.5, the spike at zero
    otherwise."""
    incl = float(indicator.mean())
    if incl > 0.5:
        sub = trace[indicator.astype(bool)]
        lo, hi = np.percentile(sub, [2.5, 97.5])
        est = float(sub.mean())
    else:
        est, lo, hi = 0.0, 0.0, 0.0
    return ParameterSummary(name, role, est, float(lo), float(hi), incl,
                            two_window_converged(trace))


def posterior_summary(draws: PosteriorDraws, min_states: int = 20) -> PosteriorSummary:
    """Mixture-aware per-parameter summary of the retained states."""
    if len(draws.states) < min_states:
        raise InsufficientDraws(
            f"need at least {min_states} retained states, have {len(draws.states)}")
    fids = draws.feature_ids or tuple(str(i) for i in range(draws.states[0].loadings.shape[0]))
    sids = draws.sample_ids or tuple(str(j) for j in range(draws.states[0].scores.shape[1]))
    rows: list[ParameterSummary] = []

    loadings = draws.stack("loadings")
    load_mask = draws.stack("load_mask")
    m, L = loadings.shape[1], loadings.shape[2]
    for i in range(m):
        for l in range(L):
            rows.append(_mixture_summary(f"loading[{fids[i]},{l + 1}]", "loading",
                                         loadings[:, i, l], load_mask[:, i, l]))

    scores = draws.stack("scores")
    for l in range(scores.shape[1]):
        for j in range(scores.shape[2]):
            rows.append(_plain_summary(f"score[{l + 1},{sids[j]}]", "factor_score",
                                       scores[:, l, j]))

    if draws.spec.is_mult:
        inter = draws.stack("inter_loadings")
        imask = draws.stack("inter_mask")
        for i in range(m):
            for t in range(inter.shape[2]):
                rows.append(_mixture_summary(
                    f"inter_loading[{fids[i]},{t + 1}]", "interaction_loading",
                    inter[:, i, t], imask[:, i, t]))
        iscores = draws.stack("inter_scores")
        for t in range(iscores.shape[1]):
            for j in range(iscores.shape[2]):
                rows.append(_plain_summary(f"inter_score[{t + 1},{sids[j]}]",
                                           "interaction_score", iscores[:, t, j]))
    else:
        effects = draws.stack("effects")
        imask = draws.stack("inter_mask")
        for i in range(m):
            for j in range(effects.shape[2]):
                rows.append(_mixture_summary(f"effect[{fids[i]},{sids[j]}]",
                                             "interaction_effect",
                                             effects[:, i, j], imask[:, i]))

    noise = draws.stack("noise_var")
    for i in range(m):
        rows.append(_plain_summary(f"noise_var[{fids[i]}]", "noise_variance",
                                   noise[:, i]))
    return PosteriorSummary(rows=tuple(rows))
