"""quadot: quadratically regularized optimal transport on discrete measures,
with the statistical-inference toolkit built on its dual potentials.

The solver computes sparse optimal couplings via exact coordinate ascent on
the concave dual; on top of it sit section geometry diagnostics, asymptotic
(CLT) variance formulas with plug-in confidence intervals, and a reproducible
Monte Carlo experiment harness.  Hot kernels are numba-compiled with a pure
numpy fallback (set ``QUADOT_NO_NUMBA=1`` before import to force it).
"""

from ._kernels import NUMBA_ENABLED, warmup
from .errors import (
    QuadotError,
    InputError,
    NegativeWeightError,
    WeightSumMismatchError,
    DimensionMismatchError,
    TooLargeError,
    NonpositiveEpsilonError,
    NotConvergedError,
    NoConsistentActiveSetError,
    InfeasibleCouplingError,
    EmptySectionError,
    EmptySupportError,
    SingularOnQuotientError,
    FactorizationFailureError,
    InvalidLevelError,
    TooFewSamplesError,
    DegenerateInputError,
)
from .measures import (
    DiscreteMeasure,
    DomainSpec,
    validate_measure,
    quadrature_grid,
    rng_stream,
    derive_seed,
    sample_empirical,
    read_measure_csv,
    write_measure_csv,
)
from .solver import (
    QotProblem,
    PotentialPair,
    SolveReport,
    eval_cost,
    cost_matrix_points,
    gauge_fix,
    xi,
    slack_matrix,
    dual_objective,
    marginal_residuals,
    coordinate_update_row,
    solve_alternating,
    solve_gradient,
    to_convex_form,
    extend_potential,
    active_set_oracle,
)
from .coupling import (
    SparseCoupling,
    primal_from_dual,
    primal_objective,
    duality_gap,
    marginals,
    marginal_defects,
    support_stats,
    write_coupling_csv,
)
from .geometry import (
    SectionReport,
    section,
    min_section_mass,
    barycenter_gradient,
    lipschitz_beta_diagnostic,
    gradient_lipschitz_diagnostic,
    vc_sup_deviation,
    product_thickening,
    write_diagnostics_csv,
)
from .limitlaw import (
    LimitLawModel,
    ConfidenceInterval,
    build_operator,
    invert_L,
    build_limit_model,
    gaussian_covariances,
    covariance_form_gap,
    potentials_limit_cov,
    cost_variance_plugin,
    cost_ci,
    coupling_functional_variance,
    sample_limit_gaussian,
    model_summary,
)
from .experiments import (
    EtaSpec,
    ExperimentConfig,
    ExperimentReport,
    run_cost_clt,
    run_potential_rate,
    run_vc_rate,
    run_coupling_clt,
    run_consistency,
    fit_rate,
    ks_distance,
)

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED",
    "warmup",
    "QuadotError",
    "InputError",
    "NegativeWeightError",
    "WeightSumMismatchError",
    "DimensionMismatchError",
    "TooLargeError",
    "NonpositiveEpsilonError",
    "NotConvergedError",
    "NoConsistentActiveSetError",
    "InfeasibleCouplingError",
    "EmptySectionError",
    "EmptySupportError",
    "SingularOnQuotientError",
    "FactorizationFailureError",
    "InvalidLevelError",
    "TooFewSamplesError",
    "DegenerateInputError",
    "DiscreteMeasure",
    "DomainSpec",
    "validate_measure",
    "quadrature_grid",
    "rng_stream",
    "derive_seed",
    "sample_empirical",
    "read_measure_csv",
    "write_measure_csv",
    "QotProblem",
    "PotentialPair",
    "SolveReport",
    "eval_cost",
    "cost_matrix_points",
    "gauge_fix",
    "xi",
    "slack_matrix",
    "dual_objective",
    "marginal_residuals",
    "coordinate_update_row",
    "solve_alternating",
    "solve_gradient",
    "to_convex_form",
    "extend_potential",
    "active_set_oracle",
    "SparseCoupling",
    "primal_from_dual",
    "primal_objective",
    "duality_gap",
    "marginals",
    "marginal_defects",
    "support_stats",
    "write_coupling_csv",
    "SectionReport",
    "section",
    "min_section_mass",
    "barycenter_gradient",
    "lipschitz_beta_diagnostic",
    "gradient_lipschitz_diagnostic",
    "vc_sup_deviation",
    "product_thickening",
    "write_diagnostics_csv",
    "LimitLawModel",
    "ConfidenceInterval",
    "build_operator",
    "invert_L",
    "build_limit_model",
    "gaussian_covariances",
    "covariance_form_gap",
    "potentials_limit_cov",
    "cost_variance_plugin",
    "cost_ci",
    "coupling_functional_variance",
    "sample_limit_gaussian",
    "model_summary",
    "EtaSpec",
    "ExperimentConfig",
    "ExperimentReport",
    "run_cost_clt",
    "run_potential_rate",
    "run_vc_rate",
    "run_coupling_clt",
    "run_consistency",
    "fit_rate",
    "ks_distance",
    "__version__",
]
