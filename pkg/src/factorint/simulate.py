"""Synthetic data with known ground truth and the model-comparison harness.

Generates two-factor datasets whose interaction effect is the saddle-shaped
score product, computes the average-absolute-deviation statistic against the
planted truth (after sign/permutation alignment of the factors), exports
interaction surfaces, and fits competing specifications side by side.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import InvalidFraction, ShapeMismatch
from .genomics import detect_interactions
from .gp import run_gp_chain
from .model import DataMatrix, Family, McmcSettings, ModelSpec, PosteriorDraws, standardize_rows
from .mult import run_mult_chain
from .rng import stream


@dataclass(frozen=True)
class SyntheticTruth:
    """Planted quantities behind one synthetic dataset (post-standardization scale)."""

    loadings: np.ndarray          # (m, L)
    scores: np.ndarray            # (L, n)
    effects: np.ndarray           # (m, n)
    noise_var: np.ndarray         # (m,)
    affected: np.ndarray          # sorted feature indices with nonzero effect rows
    seed_groups: dict[int, np.ndarray]


def _seed_blocks(m: int, group_size: int | None) -> tuple[np.ndarray, np.ndarray]:
    g = group_size if group_size is not None else max(5, m // 10)
    if 2 * g >= m:
        raise InvalidFraction(f"seed groups of size {g} leave no candidate features for m={m}")
    return np.arange(g), np.arange(g, 2 * g)


def generate_saddle_dataset(m: int, n: int, frac_affected: float, noise_scale: float = 1.0,
                            seed: int = 0, seed_group_size: int | None = None,
                            ) -> tuple[DataMatrix, SyntheticTruth]:
    """Two-factor data where a fraction of the candidate features carries the
    saddle-shaped product interaction.

    Seed blocks load positively on a single factor each; the remaining
    features load on both factors, and ``frac_affected`` of them receive an
    effect row equal to the score product times a per-feature coefficient.
    Rows are standardized with the truth rescaled consistently.
    """
    if m < 10 or n < 10:
        raise InvalidFraction(f"need m >= 10 and n >= 10, got {m}x{n}")
    if not 0.0 <= frac_affected < 1.0:
        raise InvalidFraction(f"frac_affected must lie in [0, 1), got {frac_affected}")
    rng = stream(seed, 0, "simulate")
    g1, g2 = _seed_blocks(m, seed_group_size)
    candidates = np.arange(2 * len(g1), m)

    scores = rng.standard_normal((2, n))
    loadings = np.zeros((m, 2))
    loadings[g1, 0] = rng.uniform(1.0, 2.0, size=len(g1))
    loadings[g2, 1] = rng.uniform(1.0, 2.0, size=len(g2))
    signs = rng.choice([-1.0, 1.0], size=(len(candidates), 2))
    loadings[candidates] = signs * rng.uniform(0.7, 1.3, size=(len(candidates), 2))

    n_affected = int(round(frac_affected * len(candidates)))
    affected = np.sort(rng.choice(candidates, size=n_affected, replace=False))
    effects = np.zeros((m, n))
    if n_affected:
        # effect dominating the row's factor signal, as in the plotted saddles
        coeff = rng.choice([-1.0, 1.0], size=n_affected) * rng.uniform(2.0, 3.0, size=n_affected)
        effects[affected] = coeff[:, None] * (scores[0] * scores[1])[None, :]

    raw = loadings @ scores + effects + noise_scale * rng.standard_normal((m, n))
    sd = (raw - raw.mean(axis=1, keepdims=True)).std(axis=1, ddof=1)
    data = standardize_rows(raw)
    truth = SyntheticTruth(
        loadings=loadings / sd[:, None],
        scores=scores,
        effects=effects / sd[:, None],
        noise_var=(noise_scale / sd) ** 2,
        affected=affected,
        seed_groups={0: g1, 1: g2},
    )
    return data, truth


def generate_hidden_factor_dataset(m: int, n: int, seed: int = 0,
                                   seed_group_size: int | None = None,
                                   ) -> tuple[DataMatrix, SyntheticTruth]:
    """Two-factor data with no interaction but a strong unmodeled third factor
    over most candidate features. A loosely tied interaction column fitted to
    this data drifts toward the extra factor instead of the score product."""
    if m < 10 or n < 10:
        raise InvalidFraction(f"need m >= 10 and n >= 10, got {m}x{n}")
    rng = stream(seed, 0, "simulate-hidden")
    g1, g2 = _seed_blocks(m, seed_group_size)
    candidates = np.arange(2 * len(g1), m)

    scores = rng.standard_normal((2, n))
    hidden = rng.standard_normal(n)
    loadings = np.zeros((m, 2))
    loadings[g1, 0] = rng.uniform(1.0, 2.0, size=len(g1))
    loadings[g2, 1] = rng.uniform(1.0, 2.0, size=len(g2))
    signs = rng.choice([-1.0, 1.0], size=(len(candidates), 2))
    loadings[candidates] = signs * rng.uniform(0.7, 1.3, size=(len(candidates), 2))

    hidden_load = np.zeros(m)
    carriers = rng.choice(candidates, size=int(round(0.6 * len(candidates))), replace=False)
    hidden_load[carriers] = rng.choice([-1.0, 1.0], size=len(carriers)) * rng.uniform(1.0, 2.0, size=len(carriers))

    raw = loadings @ scores + np.outer(hidden_load, hidden) + rng.standard_normal((m, n))
    sd = (raw - raw.mean(axis=1, keepdims=True)).std(axis=1, ddof=1)
    data = standardize_rows(raw)
    truth = SyntheticTruth(
        loadings=loadings / sd[:, None],
        scores=scores,
        effects=np.zeros((m, n)),
        noise_var=1.0 / sd ** 2,
        affected=np.array([], dtype=int),
        seed_groups={0: g1, 1: g2},
    )
    return data, truth


def aad(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Average absolute deviation between an estimate and the truth."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ShapeMismatch(f"shape {estimate.shape} vs {truth.shape}")
    return float(np.mean(np.abs(estimate - truth)))


def align_factors(scores_est: np.ndarray, scores_true: np.ndarray,
                  loadings_est: np.ndarray | None = None):
    """Match estimated factors to the truth by maximal absolute correlation and
    flip signs to agree; the loadings receive the same permutation and signs.

    Returns (aligned scores, aligned loadings or None, permutation, signs).
    """
    L = scores_true.shape[0]
    corr = np.zeros((L, L))
    for a in range(L):
        for b in range(L):
            corr[a, b] = np.corrcoef(scores_true[a], scores_est[b])[0, 1]
    corr = np.nan_to_num(corr)
    _, perm = linear_sum_assignment(-np.abs(corr))
    signs = np.array([1.0 if corr[a, perm[a]] >= 0 else -1.0 for a in range(L)])
    aligned_scores = scores_est[perm] * signs[:, None]
    aligned_loadings = None
    if loadings_est is not None:
        aligned_loadings = loadings_est[:, perm] * signs[None, :]
    return aligned_scores, aligned_loadings, perm, signs


def posterior_mean_effects(draws: PosteriorDraws) -> np.ndarray:
    """Posterior mean of the interaction-effect matrix (per-state products for
    the multiplicative families)."""
    if draws.spec.is_mult:
        total = None
        for s in draws.states:
            term = s.inter_loadings @ s.inter_scores
            total = term if total is None else total + term
        return total / len(draws.states)
    return draws.stack("effects").mean(axis=0)


def saddle_quadrant_recovery(effects_est: np.ndarray, truth: SyntheticTruth,
                             min_abs: float = 0.3) -> float:
    """Fraction of truly affected features whose estimated effect matches the
    true effect's sign in all four quadrants of the true score plane.

    Samples too close to either axis are excluded from the quadrant means.
    """
    if len(truth.affected) == 0:
        return 1.0
    s1, s2 = truth.scores[0], truth.scores[1]
    clear = (np.abs(s1) > min_abs) & (np.abs(s2) > min_abs)
    quads = [clear & (s1 > 0) & (s2 > 0), clear & (s1 < 0) & (s2 > 0),
             clear & (s1 > 0) & (s2 < 0), clear & (s1 < 0) & (s2 < 0)]
    hits = 0
    for i in truth.affected:
        ok = True
        for q in quads:
            if not q.any():
                continue
            if np.sign(effects_est[i, q].mean()) != np.sign(truth.effects[i, q].mean()):
                ok = False
                break
        hits += ok
    return hits / len(truth.affected)


@dataclass(frozen=True)
class SurfaceGrid:
    """Interaction surface: per-sample points plus a regular-grid interpolation."""

    points: np.ndarray  # (n, 3) columns score1, score2, effect
    grid: np.ndarray    # (g*g, 3)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda1", "lambda2", "effect", "source"])
            for row in self.points:
                writer.writerow([f"{v:.10g}" for v in row] + ["sample"])
            for row in self.grid:
                writer.writerow([f"{v:.10g}" for v in row] + ["grid"])


def export_surface(effect: np.ndarray, score_pair: np.ndarray, grid_size: int = 25,
                   n_neighbors: int = 8) -> SurfaceGrid:
    """Surface of one feature's interaction effect over the score plane.

    ``effect`` holds the per-sample effect values and ``score_pair`` the (2, n)
    estimated scores. The regular grid is filled by inverse-distance weighting
    over the nearest samples.
    """
    effect = np.asarray(effect, dtype=float).ravel()
    score_pair = np.atleast_2d(np.asarray(score_pair, dtype=float))
    if score_pair.shape != (2, effect.shape[0]):
        raise ShapeMismatch(f"scores {score_pair.shape} do not match {effect.shape[0]} samples")
    points = np.column_stack([score_pair[0], score_pair[1], effect])

    xs = np.linspace(score_pair[0].min(), score_pair[0].max(), grid_size)
    ys = np.linspace(score_pair[1].min(), score_pair[1].max(), grid_size)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    dist = cdist(nodes, points[:, :2])
    k = min(n_neighbors, effect.shape[0])
    idx = np.argsort(dist, axis=1)[:, :k]
    nd = np.take_along_axis(dist, idx, axis=1)
    weights = 1.0 / np.maximum(nd, 1e-12) ** 2
    vals = (weights * effect[idx]).sum(axis=1) / weights.sum(axis=1)
    exact = nd[:, 0] < 1e-12
    vals[exact] = effect[idx[exact, 0]]
    grid = np.column_stack([nodes, vals])
    return SurfaceGrid(points=points, grid=grid)


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    aad_loadings: float
    aad_scores: float
    aad_effects: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    quadrant_recovery: float
    surface: SurfaceGrid


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[ComparisonRow, ...] = field(default_factory=tuple)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "aad_loadings", "aad_scores", "aad_effects",
                             "tp", "fp", "tn", "fn", "accuracy", "quadrant_recovery"])
            for r in self.rows:
                writer.writerow([r.label, f"{r.aad_loadings:.10g}", f"{r.aad_scores:.10g}",
                                 f"{r.aad_effects:.10g}", r.tp, r.fp, r.tn, r.fn,
                                 f"{r.accuracy:.10g}", f"{r.quadrant_recovery:.10g}"])


def fit_spec(spec: ModelSpec, data: DataMatrix, settings: McmcSettings,
             chain: int = 0) -> PosteriorDraws:
    """Dispatch one fit to the family's sampler."""
    if spec.family is Family.GP:
        return run_gp_chain(spec, data, n_iters=settings.n_iters, burn_in=settings.burn_in,
                            thin=settings.thin, seed=settings.seed, chain=chain,
                            rw_step=settings.rw_step, adapt_rw=settings.adapt_rw,
                            mh_target=settings.mh_target)
    return run_mult_chain(spec, data, n_iters=settings.n_iters, burn_in=settings.burn_in,
                          thin=settings.thin, seed=settings.seed, chain=chain)


def compare_models(data: DataMatrix, truth: SyntheticTruth, specs: list[ModelSpec],
                   settings: McmcSettings, labels: list[str] | None = None,
                   threshold: float = 0.5) -> ComparisonReport:
    """Fit every spec on the same data and report deviation from the planted
    truth, affected-set classification at the threshold, and a surface for the
    strongest estimated effect."""
    labels = labels or [f"model_{k}" for k in range(len(specs))]
    m = data.n_features
    truly = np.zeros(m, dtype=bool)
    truly[truth.affected] = True
    rows = []
    for label, spec in zip(labels, specs):
        draws = fit_spec(spec, data, settings)
        eff = posterior_mean_effects(draws)
        scores_mean = draws.stack("scores").mean(axis=0)
        loadings_mean = draws.stack("loadings").mean(axis=0)
        aligned_scores, aligned_loadings, _, _ = align_factors(
            scores_mean, truth.scores, loadings_mean)

        detected = detect_interactions(draws, threshold)
        flag = np.zeros(m, dtype=bool)
        flag[list(detected)] = True
        tp = int(np.sum(flag & truly))
        fp = int(np.sum(flag & ~truly))
        tn = int(np.sum(~flag & ~truly))
        fn = int(np.sum(~flag & truly))

        strongest = int(np.argmax(np.abs(eff).sum(axis=1)))
        surface = export_surface(eff[strongest], aligned_scores)
        rows.append(ComparisonRow(
            label=label,
            aad_loadings=aad(aligned_loadings, truth.loadings),
            aad_scores=aad(aligned_scores, truth.scores),
            aad_effects=aad(eff, truth.effects),
            tp=tp, fp=fp, tn=tn, fn=fn,
            accuracy=(tp + tn) / m,
            quadrant_recovery=saddle_quadrant_recovery(eff, truth),
            surface=surface,
        ))
    return ComparisonReport(rows=tuple(rows))
