"""Bayesian sparse latent factor models with interaction effects.

Two model families over a standardized feature-by-sample matrix: pairwise
multiplicative interactions between latent factors (exact product or a tight
Gaussian tie) and general nonlinear interactions through a squared-exponential
Gaussian-process prior. Spike-and-slab priors give exact sparsity and
posterior inclusion probabilities for significance testing; fitting is Gibbs
sampling with a random-walk Metropolis step for the scores under the
nonlinear family.
"""

from .errors import (
    AllRemoved,
    CholeskyFailure,
    ConfigError,
    ConstantRow,
    CorruptFile,
    EmptyWindowWarning,
    FactorIntError,
    FormatVersionMismatch,
    InsufficientDraws,
    InvalidFactorCount,
    InvalidFraction,
    ShapeMismatch,
    SpecConflict,
)
from .genomics import (
    Annotation,
    CandidateRule,
    OverlapTestInput,
    PosteriorSummary,
    clean_seed_genes,
    detect_interactions,
    overlap_permutation_test,
    posterior_summary,
    seed_gene_window,
    select_candidate_genes,
    two_factor_null_spec,
)
from .gp import GpChain, run_gp_chain
from .kernels import KernelMatrix, gp_marginal_loglik_ratio, se_kernel
from .model import (
    BetaTable,
    DataMatrix,
    Family,
    InterProbModel,
    LoadProbModel,
    McmcSettings,
    McmcState,
    ModelSpec,
    PosteriorDraws,
    factor_pairs,
    gp_spec,
    interaction_pair_count,
    mult_spec,
    standardize_rows,
    validate_spec,
)
from .mult import MultChain, run_mult_chain
from .simulate import (
    ComparisonReport,
    SurfaceGrid,
    SyntheticTruth,
    aad,
    align_factors,
    compare_models,
    export_surface,
    fit_spec,
    generate_hidden_factor_dataset,
    generate_saddle_dataset,
    posterior_mean_effects,
    saddle_quadrant_recovery,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
