"""Domain types shared by both sampler families.

Defines the standardized data matrix, the declarative model specification
(family, factor count, prior layout, seed-gene constraints), the mutable
sampler state, and the container of retained posterior draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ConstantRow, InvalidFactorCount, SpecConflict


class Family(str, Enum):
    MULT_APPROACH1 = "mult_approach1"  # score product enters as the mean of a Gaussian prior
    MULT_APPROACH2 = "mult_approach2"  # score product imposed exactly
    GP = "gp"                          # nonlinear interaction rows under a squared-exponential GP prior


class LoadProbModel(str, Enum):
    """How the loading inclusion probabilities are shared."""

    PER_ENTRY = "per_entry"
    GROUPED = "grouped"


class InterProbModel(str, Enum):
    """How the interaction inclusion probabilities are shared."""

    PER_FEATURE = "per_feature"
    GLOBAL = "global"
    GROUPED = "grouped"


# Group labels used by the GROUPED strategies, derived from seed groups.
LOAD_GROUPS = ("expected", "excluded", "unknown")
INTER_GROUPS = ("seed", "unknown")

# gp_variant -> (loading-prob model, shared interaction effect, interaction-prob model)
GP_VARIANT_TABLE: dict[int, tuple[LoadProbModel, bool, InterProbModel]] = {
    1: (LoadProbModel.PER_ENTRY, False, InterProbModel.PER_FEATURE),
    2: (LoadProbModel.PER_ENTRY, True, InterProbModel.PER_FEATURE),
    3: (LoadProbModel.PER_ENTRY, False, InterProbModel.GLOBAL),
    4: (LoadProbModel.PER_ENTRY, True, InterProbModel.GLOBAL),
    5: (LoadProbModel.GROUPED, False, InterProbModel.GROUPED),
}

_CONSTANT_ROW_TOL = 1e-12


@dataclass(frozen=True)
class DataMatrix:
    """Feature-by-sample matrix with identifiers. Rows are standardized."""

    values: np.ndarray
    feature_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ConfigError("data matrix must be two-dimensional")
        m, n = values.shape
        if m < 2 or n < 2:
            raise ConfigError(f"data matrix needs at least 2 features and 2 samples, got {m}x{n}")
        if not np.isfinite(values).all():
            raise ConfigError("data matrix contains non-finite entries")
        if len(self.feature_ids) != m or len(self.sample_ids) != n:
            raise ConfigError("identifier lengths do not match the matrix shape")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_ids", tuple(str(f) for f in self.feature_ids))
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def feature_index(self) -> dict[str, int]:
        return {fid: i for i, fid in enumerate(self.feature_ids)}


def default_ids(prefix: str, count: int) -> tuple[str, ...]:
    width = max(4, len(str(count)))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(count))


def standardize_rows(
    raw,
    feature_ids: Sequence[str] | None = None,
    sample_ids: Sequence[str] | None = None,
) -> DataMatrix:
    """Center each row at 0 and scale it to unit sample variance (n-1 denominator).

    Accepts a plain array or a DataMatrix; identifiers are preserved.
    Raises ConstantRow if any row has zero variance.
    """
    if isinstance(raw, DataMatrix):
        feature_ids = feature_ids or raw.feature_ids
        sample_ids = sample_ids or raw.sample_ids
        raw = raw.values
    values = np.array(raw, dtype=float)
    if values.ndim != 2:
        raise ConfigError("expected a two-dimensional matrix")
    m, n = values.shape
    feature_ids = tuple(feature_ids) if feature_ids is not None else default_ids("f", m)
    sample_ids = tuple(sample_ids) if sample_ids is not None else default_ids("s", n)

    means = values.mean(axis=1)
    centered = values - means[:, None]
    sd = centered.std(axis=1, ddof=1)
    tol = _CONSTANT_ROW_TOL * (1.0 + np.abs(means))
    for i in range(m):
        if sd[i] <= tol[i]:
            raise ConstantRow(i, feature_ids[i] if i < len(feature_ids) else None)
    return DataMatrix(centered / sd[:, None], feature_ids, sample_ids)


def interaction_pair_count(n_factors: int) -> int:
    """Number of unordered factor pairs, L(L-1)/2."""
    if n_factors < 2:
        raise InvalidFactorCount(f"need at least 2 factors, got {n_factors}")
    return n_factors * (n_factors - 1) // 2


def factor_pairs(n_factors: int) -> tuple[tuple[int, int], ...]:
    """Unordered factor pairs (l1 < l2), lexicographic, 0-based."""
    if n_factors < 2:
        raise InvalidFactorCount(f"need at least 2 factors, got {n_factors}")
    return tuple((l1, l2) for l1 in range(n_factors - 1) for l2 in range(l1 + 1, n_factors))


@dataclass(frozen=True)
class BetaTable:
    """Beta hyperparameters with optional per-group and per-entry overrides.

    ``entries`` keys are (feature, factor) for loadings, (feature, pair) or
    (feature,) for interactions; ``groups`` keys are group names.
    """

    default: tuple[float, float] = (1.0, 1.0)
    groups: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    entries: Mapping[tuple, tuple[float, float]] = field(default_factory=dict)

    def lookup(self, entry: tuple | None = None, group: str | None = None) -> tuple[float, float]:
        if entry is not None and entry in self.entries:
            return self.entries[entry]
        if group is not None and group in self.groups:
            return self.groups[group]
        return self.default

    def all_pairs(self) -> Iterable[tuple[float, float]]:
        yield self.default
        yield from self.groups.values()
        yield from self.entries.values()


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one model variant.

    ``slab_var_loading`` is the slab variance of the factor loadings and
    ``slab_var_inter`` the slab variance of the interaction loadings
    (multiplicative families only). ``product_var`` is the variance tying the
    interaction scores to the score product (multiplicative approach 1 only).
    Seed groups map a factor to the features assumed to load on it alone;
    with ``seed_constraints`` these become degenerate inclusion probabilities
    (own factor 1, other factors 0, interactions 0).
    """

    family: Family
    n_factors: int = 2
    slab_var_loading: float = 10.0
    slab_var_inter: float = 10.0
    noise_prior: tuple[float, float] = (2.1, 1.1)
    product_var: float | None = None
    gp_variant: int | None = None
    length_scale: float | None = None
    load_prob_model: LoadProbModel = LoadProbModel.PER_ENTRY
    inter_prob_model: InterProbModel = InterProbModel.PER_FEATURE
    load_prob_prior: BetaTable = field(default_factory=BetaTable)
    inter_prob_prior: BetaTable = field(default_factory=BetaTable)
    seed_groups: Mapping[int, frozenset[int]] | None = None
    fixed_load_prob: Mapping[tuple[int, int], float] | None = None
    fixed_inter_prob: Mapping[int, float] | None = None
    seed_constraints: bool = True
    include_interactions: bool = True

    @property
    def n_pairs(self) -> int:
        return interaction_pair_count(self.n_factors)

    @property
    def is_mult(self) -> bool:
        return self.family in (Family.MULT_APPROACH1, Family.MULT_APPROACH2)

    @property
    def shared_effect(self) -> bool:
        return self.family is Family.GP and self.gp_variant in (2, 4)

    def seed_union(self) -> frozenset[int]:
        if not self.seed_groups:
            return frozenset()
        out: set[int] = set()
        for members in self.seed_groups.values():
            out |= set(members)
        return frozenset(out)


def mult_spec(approach: int, n_factors: int = 2, **kwargs) -> ModelSpec:
    """Multiplicative-interaction model; approach 1 ties the interaction scores
    to the score product through a Gaussian, approach 2 imposes the product."""
    if approach not in (1, 2):
        raise SpecConflict(f"multiplicative approach must be 1 or 2, got {approach}")
    family = Family.MULT_APPROACH1 if approach == 1 else Family.MULT_APPROACH2
    if approach == 1:
        kwargs.setdefault("product_var", 1e-5)
    return ModelSpec(family=family, n_factors=n_factors, **kwargs)


def gp_spec(variant: int, n_factors: int = 2, length_scale: float = 0.2, **kwargs) -> ModelSpec:
    """Nonlinear-interaction model; ``variant`` selects one of the five prior
    configurations (loading-probability model, shared effect, interaction-
    probability model)."""
    if variant not in GP_VARIANT_TABLE:
        raise SpecConflict(f"gp_variant must be in 1..5, got {variant}")
    load_model, _, inter_model = GP_VARIANT_TABLE[variant]
    kwargs.setdefault("load_prob_model", load_model)
    kwargs.setdefault("inter_prob_model", inter_model)
    return ModelSpec(
        family=Family.GP,
        n_factors=n_factors,
        gp_variant=variant,
        length_scale=length_scale,
        **kwargs,
    )


def _check_positive(name: str, value) -> None:
    if value is None or not np.isfinite(value) or value <= 0:
        raise SpecConflict(f"{name} must be a positive finite number, got {value}")


def validate_spec(spec: ModelSpec) -> ModelSpec:
    """Cross-field consistency checks; returns the ModelSpec unchanged on success."""
    if spec.n_factors < 2:
        raise InvalidFactorCount(f"need at least 2 factors, got {spec.n_factors}")
    _check_positive("slab_var_loading", spec.slab_var_loading)
    a, b = spec.noise_prior
    _check_positive("noise_prior shape", a)
    _check_positive("noise_prior scale", b)
    for pair in list(spec.load_prob_prior.all_pairs()) + list(spec.inter_prob_prior.all_pairs()):
        _check_positive("Beta hyperparameter", pair[0])
        _check_positive("Beta hyperparameter", pair[1])

    if spec.family is Family.GP:
        if spec.product_var is not None:
            raise SpecConflict("product_var applies only to multiplicative approach 1")
        if spec.gp_variant not in GP_VARIANT_TABLE:
            raise SpecConflict(f"gp_variant must be in 1..5, got {spec.gp_variant}")
        _check_positive("length_scale", spec.length_scale)
        if not spec.include_interactions:
            raise SpecConflict("the nonlinear family has no interaction-free variant")
        load_model, _, inter_model = GP_VARIANT_TABLE[spec.gp_variant]
        if spec.load_prob_model is not load_model or spec.inter_prob_model is not inter_model:
            raise SpecConflict(
                f"gp_variant {spec.gp_variant} requires ({load_model.value}, {inter_model.value}) "
                f"probability models, got ({spec.load_prob_model.value}, {spec.inter_prob_model.value})"
            )
    else:
        if spec.gp_variant is not None or spec.length_scale is not None:
            raise SpecConflict("gp_variant/length_scale apply only to the gp family")
        _check_positive("slab_var_inter", spec.slab_var_inter)
        if spec.family is Family.MULT_APPROACH1:
            _check_positive("product_var", spec.product_var)
        elif spec.product_var is not None:
            raise SpecConflict("product_var applies only to multiplicative approach 1")

    if spec.seed_groups:
        seen: set[int] = set()
        for factor, members in spec.seed_groups.items():
            if not 0 <= int(factor) < spec.n_factors:
                raise SpecConflict(f"seed group factor {factor} outside 0..{spec.n_factors - 1}")
            members = set(int(i) for i in members)
            if any(i < 0 for i in members):
                raise SpecConflict("seed group contains a negative feature index")
            overlap = seen & members
            if overlap:
                raise SpecConflict(f"seed groups overlap on features {sorted(overlap)}")
            seen |= members
    if spec.fixed_load_prob:
        for (i, l), v in spec.fixed_load_prob.items():
            if v not in (0.0, 1.0):
                raise SpecConflict(f"fixed loading probability at ({i},{l}) must be 0 or 1, got {v}")
    if spec.fixed_inter_prob:
        for i, v in spec.fixed_inter_prob.items():
            if v not in (0.0, 1.0):
                raise SpecConflict(f"fixed interaction probability at {i} must be 0 or 1, got {v}")
    return spec


@dataclass(frozen=True)
class PriorLayout:
    """Per-entry expansion of the prior bookkeeping for a given feature count.

    ``fixed_*`` hold NaN where the probability is free and 0/1 where it is
    degenerate. ``*_group`` hold integer labels into LOAD_GROUPS /
    INTER_GROUPS. Interaction arrays are (m,) for the gp family and
    (m, n_pairs) for the multiplicative families.
    """

    fixed_load: np.ndarray
    load_group: np.ndarray
    load_a: np.ndarray
    load_b: np.ndarray
    fixed_inter: np.ndarray
    inter_group: np.ndarray
    inter_a: np.ndarray
    inter_b: np.ndarray


def build_layout(spec: ModelSpec, n_features: int) -> PriorLayout:
    m, L = n_features, spec.n_factors
    fixed_load = np.full((m, L), np.nan)
    load_group = np.full((m, L), LOAD_GROUPS.index("unknown"), dtype=np.int8)

    inter_shape = (m, spec.n_pairs) if spec.is_mult else (m,)
    fixed_inter = np.full(inter_shape, np.nan)
    inter_group = np.full(m, INTER_GROUPS.index("unknown"), dtype=np.int8)

    seed_union = spec.seed_union()
    if seed_union and max(seed_union) >= m:
        raise SpecConflict(f"seed feature index {max(seed_union)} outside 0..{m - 1}")
    if spec.seed_groups:
        for factor, members in spec.seed_groups.items():
            idx = np.fromiter((int(i) for i in members), dtype=int)
            load_group[idx, :] = LOAD_GROUPS.index("excluded")
            load_group[idx, int(factor)] = LOAD_GROUPS.index("expected")
        seed_idx = np.fromiter(sorted(seed_union), dtype=int)
        inter_group[seed_idx] = INTER_GROUPS.index("seed")
        if spec.seed_constraints:
            for factor, members in spec.seed_groups.items():
                idx = np.fromiter((int(i) for i in members), dtype=int)
                fixed_load[idx, :] = 0.0
                fixed_load[idx, int(factor)] = 1.0
            if spec.is_mult:
                fixed_inter[seed_idx, :] = 0.0
            else:
                fixed_inter[seed_idx] = 0.0

    if not spec.include_interactions:
        fixed_inter[...] = 0.0

    if spec.fixed_load_prob:
        for (i, l), v in spec.fixed_load_prob.items():
            if not (0 <= i < m and 0 <= l < L):
                raise SpecConflict(f"fixed loading probability index ({i},{l}) out of range")
            fixed_load[i, l] = v
    if spec.fixed_inter_prob:
        for i, v in spec.fixed_inter_prob.items():
            if not 0 <= i < m:
                raise SpecConflict(f"fixed interaction probability index {i} out of range")
            fixed_inter[i, ...] = v

    load_a = np.empty((m, L))
    load_b = np.empty((m, L))
    for l in range(L):
        for i in range(m):
            a, b = spec.load_prob_prior.lookup((i, l), LOAD_GROUPS[load_group[i, l]])
            load_a[i, l] = a
            load_b[i, l] = b

    inter_a = np.empty(inter_shape)
    inter_b = np.empty(inter_shape)
    if spec.is_mult:
        for i in range(m):
            group = INTER_GROUPS[inter_group[i]]
            for t in range(spec.n_pairs):
                a, b = spec.inter_prob_prior.lookup((i, t), group)
                inter_a[i, t] = a
                inter_b[i, t] = b
    else:
        for i in range(m):
            a, b = spec.inter_prob_prior.lookup((i,), INTER_GROUPS[inter_group[i]])
            inter_a[i] = a
            inter_b[i] = b

    return PriorLayout(fixed_load, load_group, load_a, load_b,
                       fixed_inter, inter_group, inter_a, inter_b)


@dataclass
class McmcState:
    """One full set of latent quantities at a sampler iteration.

    ``inter_loadings``/``inter_scores`` exist for the multiplicative families,
    ``effects``/``shared_effect`` for the gp family. Masks are the binary
    inclusion indicators; probability arrays mirror the mask shapes with
    shared values expanded per entry.
    """

    loadings: np.ndarray                     # (m, L)
    scores: np.ndarray                       # (L, n)
    load_mask: np.ndarray                    # (m, L) int8
    load_prob: np.ndarray                    # (m, L)
    noise_var: np.ndarray                    # (m,)
    inter_mask: np.ndarray                   # (m, T) int8 or (m,) int8
    inter_prob: np.ndarray                   # same shape as inter_mask
    inter_loadings: np.ndarray | None = None  # (m, T)
    inter_scores: np.ndarray | None = None    # (T, n)
    effects: np.ndarray | None = None         # (m, n)
    shared_effect: np.ndarray | None = None   # (n,)

    def copy(self) -> "McmcState":
        opt = lambda x: None if x is None else x.copy()
        return McmcState(
            loadings=self.loadings.copy(),
            scores=self.scores.copy(),
            load_mask=self.load_mask.copy(),
            load_prob=self.load_prob.copy(),
            noise_var=self.noise_var.copy(),
            inter_mask=self.inter_mask.copy(),
            inter_prob=self.inter_prob.copy(),
            inter_loadings=opt(self.inter_loadings),
            inter_scores=opt(self.inter_scores),
            effects=opt(self.effects),
            shared_effect=opt(self.shared_effect),
        )


@dataclass
class PosteriorDraws:
    """Retained post-burn-in states plus the MH acceptance ledger."""

    spec: ModelSpec
    states: list[McmcState]
    burn_in: int
    thin: int
    n_iters: int
    seed: int
    chain: int = 0
    feature_ids: tuple[str, ...] | None = None
    sample_ids: tuple[str, ...] | None = None
    mh_accept_counts: np.ndarray | None = None  # (n, 2) accepted/proposed, post burn-in
    rw_step_final: float | None = None

    def __len__(self) -> int:
        return len(self.states)

    def stack(self, attr: str) -> np.ndarray:
        values = [getattr(s, attr) for s in self.states]
        if any(v is None for v in values):
            raise AttributeError(f"states do not carry '{attr}'")
        return np.stack(values, axis=0)


@dataclass(frozen=True)
class McmcSettings:
    """Chain-length and proposal configuration for one run."""

    n_iters: int = 600
    burn_in: int | None = None  # None: 400 for multiplicative families, 300 for gp
    thin: int = 1
    seed: int = 0
    n_chains: int = 1
    rw_step: float = 0.1
    adapt_rw: bool = True
    mh_target: float = 0.30

    def resolve_burn_in(self, family: Family) -> int:
        if self.burn_in is not None:
            burn = self.burn_in
        else:
            burn = 300 if family is Family.GP else 400
        if not 0 <= burn < self.n_iters:
            raise ConfigError(f"burn_in {burn} must lie in [0, n_iters={self.n_iters})")
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        if (self.n_iters - burn) % self.thin:
            raise ConfigError(
                f"(n_iters - burn_in) = {self.n_iters - burn} is not divisible by thin = {self.thin}"
            )
        return burn
