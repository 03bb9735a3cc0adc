"""Asymptotic covariance matrices, standard errors, and t-statistics.

Two connectivity regimes are supported.  With a growing number of
neighbours per unit the information equality holds asymptotically and
the covariance of the Newton-step estimate reduces to the classical
``sigma2 * ([R, X]'[R, X])^{-1}``.  With bounded connectivity the
equality fails and the covariance takes the sandwich form
``(sigma2/n) * (2 Xi^{-1} + Xi^{-1} Omega Xi^{-1})`` built from the
expected Hessian and the third/fourth-moment score-variance excess.

Regime selection is a caller decision: boundedness of the connectivity
scale is an asymptotic property with no finite-sample test.  The
measured ``h_scale`` diagnostic of the weight set is the practical
guide.  Contrast matrices other than the identity are a one-line
post-multiplication left to callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConditioningError, DegenerateInferenceError, ValidationError
from .estimators import EstimateReport
from .model import (
    MomentInputs,
    SarDataset,
    expected_hessian,
    score_variance_excess,
    spatial_lags,
)

__all__ = [
    "CovarianceEstimate",
    "covariance_divergent",
    "covariance_bounded",
    "residual_moments",
    "t_statistics",
    "se_ratio",
]


@dataclass(frozen=True)
class CovarianceEstimate:
    """Covariance matrix of an estimate with per-coordinate SEs."""

    matrix: np.ndarray
    regime: str  # "divergent_h" | "bounded_h"
    moment_inputs_used: MomentInputs | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("covariance matrix must be square")
        scale = float(np.max(np.abs(m))) or 1.0
        if float(np.max(np.abs(m - m.T))) > 1e-10 * scale:
            raise ValidationError("covariance matrix is not symmetric")
        if np.any(np.diag(m) < -1e-10 * scale):
            raise DegenerateInferenceError("covariance has a negative variance")
        object.__setattr__(self, "matrix", m)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.matrix), 0.0))


def covariance_divergent(dataset: SarDataset, report: EstimateReport) -> CovarianceEstimate:
    """Covariance for the divergent-connectivity regime.

    ``Var(theta) ~ sigma2_hat * ([R, X]'[R, X])^{-1}``; with no spatial
    lags this is the classical least-squares covariance.
    """
    d = np.hstack([spatial_lags(dataset.weights, dataset.y), dataset.X])
    gram = d.T @ d
    try:
        inv = sla.solve((gram + gram.T) / 2.0, np.eye(gram.shape[0]), assume_a="pos")
    except sla.LinAlgError as exc:
        raise ConditioningError(f"[R, X] Gram matrix is singular: {exc}") from exc
    mat = report.sigma2_hat * (inv + inv.T) / 2.0
    return CovarianceEstimate(matrix=mat, regime="divergent_h")


def residual_moments(dataset: SarDataset, report: EstimateReport) -> MomentInputs:
    """Plug-in error moments from the residuals of an estimate.

    Central sample moments of ``u_hat = S(lam_hat) y - X beta_hat``;
    the third and fourth moments feed the bounded-regime sandwich.
    """
    r = spatial_lags(dataset.weights, dataset.y)
    u = dataset.y - r @ report.theta_hat.lam - dataset.X @ report.theta_hat.beta
    e = u - u.mean()
    sigma2 = float(np.mean(e**2))
    if sigma2 <= 0:
        raise DegenerateInferenceError("residuals have zero variance")
    return MomentInputs(mu3=float(np.mean(e**3)), mu4=float(np.mean(e**4)), sigma2=sigma2)


def covariance_bounded(
    dataset: SarDataset,
    report: EstimateReport,
    moments: MomentInputs | None = None,
) -> CovarianceEstimate:
    """Sandwich covariance for the bounded-connectivity regime.

    ``Var(theta) ~ (sigma2_hat / n) (2 Xi^{-1} + Xi^{-1} Omega Xi^{-1})``
    with the expected Hessian and score-variance excess evaluated at the
    estimate.  Moments default to the residual plug-ins; under Gaussian
    errors the excess vanishes and the two regimes agree.

    Heteroskedastic designs have no robust variance counterpart here;
    SEs reported for them carry that caveat.
    """
    if moments is None:
        moments = residual_moments(dataset, report)
    xi = expected_hessian(dataset, report.theta_hat, report.sigma2_hat)
    omega = score_variance_excess(dataset, report.theta_hat, moments)
    try:
        xi_inv = sla.solve(xi, np.eye(xi.shape[0]), assume_a="sym")
    except sla.LinAlgError as exc:
        raise ConditioningError(f"expected Hessian is singular: {exc}") from exc
    mat = (report.sigma2_hat / dataset.n) * (2.0 * xi_inv + xi_inv @ omega @ xi_inv)
    mat = (mat + mat.T) / 2.0
    return CovarianceEstimate(matrix=mat, regime="bounded_h", moment_inputs_used=moments)


def t_statistics(report: EstimateReport, cov: CovarianceEstimate) -> np.ndarray:
    """Per-coordinate ratio of estimate to standard error."""
    theta = report.theta_hat.stacked()
    se = cov.se
    if theta.size != se.size:
        raise ValidationError("covariance dimension does not match the estimate")
    if np.any(se == 0.0):
        raise DegenerateInferenceError("zero standard error: t-statistic undefined")
    return theta / se


def se_ratio(cov_initial: CovarianceEstimate, cov_newton: CovarianceEstimate) -> np.ndarray:
    """Per-coefficient ratio of initial-estimator SE to Newton-step SE."""
    se_n = cov_newton.se
    if np.any(se_n == 0.0):
        raise DegenerateInferenceError("zero Newton-step standard error")
    return cov_initial.se / se_n
