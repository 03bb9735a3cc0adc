"""Estimation toolkit for higher-order spatial autoregressions.

Closed-form IV/OLS estimators, Newton-step approximations to the
Gaussian pseudo maximum likelihood estimate, asymptotic inference in the
bounded and divergent connectivity regimes, and a deterministic Monte
Carlo harness.
"""

__version__ = "0.1.0"

from .errors import (
    ConditioningError,
    ConfigError,
    DegenerateInferenceError,
    InvalidDesignError,
    NewtonStepError,
    NonpositiveDeterminantError,
    NumericalError,
    OptimizationFailureError,
    SarError,
    SingularModelError,
    UnderIdentificationError,
    ValidationError,
    WeakInstrumentError,
)
from .estimators import (
    EstimateReport,
    EstimatorConfig,
    IterateRecord,
    PmleResult,
    PmleSearchConfig,
    benchmark,
    default_instruments,
    estimate_iv,
    estimate_ols,
    iterate_newton,
    newton_step,
    pmle,
)
from .inference import (
    CovarianceEstimate,
    covariance_bounded,
    covariance_divergent,
    residual_moments,
    se_ratio,
    t_statistics,
)
from .model import (
    MomentInputs,
    ObjectiveState,
    SarDataset,
    SpatialSolve,
    Theta,
    draw_errors,
    expected_hessian,
    hessian,
    logdet_S,
    neg2_loglik,
    score,
    score_variance_excess,
    simulate,
    spatial_lags,
)
from .montecarlo import McDesign, McRunResult, McTable, default_design, design_names, run
from .weights import (
    SpatialWeightSet,
    WeightDesignSpec,
    build_circulant,
    build_distance_rings,
    build_random_sparse,
    build_weights,
    circulant_weight_set,
    empty_weight_set,
    load_weight_set,
    save_weight_set,
    spectral_norm,
)

__all__ = [name for name in dir() if not name.startswith("_")]
