"""Closed-form IV/OLS estimation and Newton iterations toward the PMLE.

The initial estimates are two-stage least squares (with spatial lags of
the regressors as default instruments) and ordinary least squares on the
augmented regressor matrix ``[R, X]`` with ``R`` the spatial lags of the
response.  Newton steps ``theta <- theta - H^{-1} score`` then carry an
initial estimate toward the pseudo maximum likelihood estimate without
any grid search; a reference profile-search PMLE is included for
cross-validation and benchmarking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from .errors import (
    ConditioningError,
    NewtonStepError,
    NumericalError,
    OptimizationFailureError,
    UnderIdentificationError,
    ValidationError,
    WeakInstrumentError,
)
from .model import (
    SarDataset,
    Theta,
    build_state,
    hessian_state,
    logdet_S,
    neg2_loglik,
    neg2_loglik_state,
    numerical_rank,
    score_state,
    spatial_lags,
)
from .weights import SpatialWeightSet

__all__ = [
    "EstimatorConfig",
    "IterateRecord",
    "EstimateReport",
    "PmleSearchConfig",
    "PmleResult",
    "default_instruments",
    "estimate_iv",
    "estimate_ols",
    "newton_step",
    "iterate_newton",
    "pmle",
    "benchmark",
]


@dataclass(frozen=True)
class EstimatorConfig:
    """Recipe for an initial estimate plus Newton iterations."""

    initial: str = "iv"
    newton_steps: int = 3
    sigma2_update: str = "refresh_each_step"
    pmle_mode: str = "off"
    convergence_tol: float = 1e-10

    def __post_init__(self):
        if self.initial not in ("iv", "ols"):
            raise ValidationError(f"initial must be 'iv' or 'ols', got {self.initial!r}")
        if self.newton_steps < 0:
            raise ValidationError("newton_steps must be nonnegative")
        if self.sigma2_update not in ("refresh_each_step", "fixed_initial"):
            raise ValidationError(f"unknown sigma2_update {self.sigma2_update!r}")
        if self.pmle_mode not in ("off", "profile_search"):
            raise ValidationError(f"unknown pmle_mode {self.pmle_mode!r}")
        if not self.convergence_tol > 0:
            raise ValidationError("convergence_tol must be positive")

    @property
    def label(self) -> str:
        if self.newton_steps == 0:
            return self.initial
        return f"{self.initial}+n{self.newton_steps}"


@dataclass(frozen=True)
class IterateRecord:
    """One row of the Newton iterate trace."""

    theta: Theta
    sigma2: float
    step_norm: float
    neg2_loglik: float


@dataclass
class EstimateReport:
    """Estimator output: point estimate, trace, timings, diagnostics.

    ``iterates[0]`` is the initial estimate; each later entry is one
    Newton step.  ``failed_at`` is the 1-based index of the first step
    that could not be completed, if any; the report then carries the
    last valid iterate as the point estimate.
    """

    theta_hat: Theta
    sigma2_hat: float
    method_label: str
    iterates: list[IterateRecord] = field(default_factory=list)
    wall_times: dict[str, float] = field(default_factory=dict)
    covariance: object | None = None
    hessian_builds: int = 0
    converged: bool = False
    failed_at: int | None = None
    failure_reason: str | None = None

    def theta_at_step(self, step: int) -> Theta | None:
        """Estimate after ``step`` Newton iterations, or None if that
        step failed.  Early-stopped traces return the last iterate."""
        if self.failed_at is not None and step >= self.failed_at:
            return None
        if step < len(self.iterates):
            return self.iterates[step].theta
        return self.iterates[-1].theta if self.iterates else None

    def sigma2_at_step(self, step: int) -> float | None:
        if self.failed_at is not None and step >= self.failed_at:
            return None
        if step < len(self.iterates):
            return self.iterates[step].sigma2
        return self.iterates[-1].sigma2 if self.iterates else None


def default_instruments(weights: SpatialWeightSet, X: np.ndarray) -> np.ndarray:
    """Default instrument matrix: independent columns of (W_1 X, ..., W_p X, X).

    Columns are selected by QR with column pivoting at tolerance
    1e-10 times the largest column norm and returned in pivot order, so
    the result is deterministic.  Raises
    :class:`UnderIdentificationError` when fewer than p + k independent
    columns survive, which leaves the spatial lags under-instrumented.
    """
    X = np.asarray(X, dtype=float)
    if numerical_rank(X) < X.shape[1]:
        raise ValidationError("X must have full column rank")
    blocks = [w @ X for w in weights.mats] + [X]
    cand = np.hstack(blocks)
    r, piv = sla.qr(cand, mode="r", pivoting=True)[0:2]
    diag = np.abs(np.diag(np.atleast_2d(r)))
    tol = 1e-10 * float(np.max(np.linalg.norm(cand, axis=0)))
    rank = int(np.sum(diag > tol))
    need = weights.p + X.shape[1]
    if rank < need:
        raise UnderIdentificationError(
            f"only {rank} independent instrument columns for p + k = {need}"
        )
    return cand[:, piv[:rank]]


def _augment_with_regressors(Z: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Append the X columns that add rank beyond span(Z).

    The IV normal equations are written in terms of the stacked
    instrument set [Z, X]; duplicated directions (the default Z already
    contains X) must be dropped to keep the Gram matrix invertible.
    """
    f = Z
    base = numerical_rank(f)
    for j in range(X.shape[1]):
        cand = np.column_stack([f, X[:, j]])
        r = numerical_rank(cand)
        if r > base:
            f = cand
            base = r
    return f


def _instrument_matrix(dataset: SarDataset) -> np.ndarray:
    if dataset.Z is not None:
        f = _augment_with_regressors(dataset.Z, dataset.X)
    else:
        f = default_instruments(dataset.weights, dataset.X)
    if f.shape[1] < dataset.p + dataset.k:
        raise UnderIdentificationError(
            f"{f.shape[1]} instruments cannot identify p + k = {dataset.p + dataset.k} parameters"
        )
    return f


def _append_objective(
    dataset: SarDataset, report: EstimateReport, with_objective: bool
) -> None:
    obj = np.nan
    if with_objective:
        try:
            obj = neg2_loglik(dataset, report.theta_hat, report.sigma2_hat)
        except NumericalError:
            obj = np.nan
    report.iterates.append(
        IterateRecord(report.theta_hat, report.sigma2_hat, 0.0, obj)
    )


def estimate_iv(dataset: SarDataset, with_objective: bool = True) -> EstimateReport:
    """Closed-form IV (two-stage least squares) estimate.

    Uses the dataset's instruments when present, otherwise the default
    spatial-lag instruments.  ``with_objective=False`` skips the
    pseudo-likelihood evaluation at the estimate, which needs a log
    determinant the closed form itself does not (used by the benchmark
    to time the estimator honestly).

    Raises
    ------
    ConditioningError
        Singular instrument Gram matrix (collinear instruments).
    WeakInstrumentError
        Singular projected design (instruments uncorrelated with lags).
    """
    t0 = time.perf_counter()
    f = _instrument_matrix(dataset)
    n = dataset.n
    d = np.hstack([spatial_lags(dataset.weights, dataset.y), dataset.X])
    j = f.T @ f / n
    k_mat = f.T @ d / n
    k_vec = f.T @ dataset.y / n
    try:
        j_inv_k = sla.solve(j, np.column_stack([k_mat, k_vec]), assume_a="pos")
    except sla.LinAlgError as exc:
        raise ConditioningError(f"instrument Gram matrix is singular: {exc}") from exc
    q = k_mat.T @ j_inv_k[:, :-1]
    q = (q + q.T) / 2.0
    rhs = k_mat.T @ j_inv_k[:, -1]
    try:
        theta_vec = sla.solve(q, rhs, assume_a="sym")
    except sla.LinAlgError as exc:
        raise WeakInstrumentError(f"projected design matrix is singular: {exc}") from exc
    if not np.all(np.isfinite(theta_vec)):
        raise WeakInstrumentError("IV solve produced non-finite estimates")
    theta = Theta.from_stacked(theta_vec, dataset.p)
    resid = dataset.y - d @ theta_vec
    report = EstimateReport(
        theta_hat=theta,
        sigma2_hat=float(resid @ resid / n),
        method_label="iv",
    )
    _append_objective(dataset, report, with_objective)
    report.wall_times["total"] = time.perf_counter() - t0
    return report


def estimate_ols(dataset: SarDataset, with_objective: bool = True) -> EstimateReport:
    """Least squares of y on the augmented regressors [R, X].

    Consistent only in the divergent-connectivity regime; used there as
    a Newton starting point and everywhere as a building block.
    """
    t0 = time.perf_counter()
    n = dataset.n
    d = np.hstack([spatial_lags(dataset.weights, dataset.y), dataset.X])
    l_mat = d.T @ d / n
    l_vec = d.T @ dataset.y / n
    try:
        theta_vec = sla.solve(l_mat, l_vec, assume_a="pos")
    except sla.LinAlgError as exc:
        raise ConditioningError(f"[R, X] Gram matrix is singular: {exc}") from exc
    theta = Theta.from_stacked(theta_vec, dataset.p)
    resid = dataset.y - d @ theta_vec
    report = EstimateReport(
        theta_hat=theta,
        sigma2_hat=float(resid @ resid / n),
        method_label="ols",
    )
    _append_objective(dataset, report, with_objective)
    report.wall_times["total"] = time.perf_counter() - t0
    return report


def newton_step(
    dataset: SarDataset, theta_in: Theta, sigma2_in: float
) -> tuple[Theta, np.ndarray]:
    """One Newton update ``theta - H^{-1} score`` at ``(theta_in, sigma2_in)``.

    Returns the updated parameter and the step vector actually taken.
    The Hessian solve uses a symmetric indefinite factorization (the
    Hessian need not be positive definite away from the optimum).

    Raises
    ------
    SingularModelError, NonpositiveDeterminantError
        If ``S(lam_in)`` is singular or has nonpositive determinant.
    NewtonStepError
        If the Hessian is singular at the evaluation point.
    """
    state = build_state(dataset, theta_in, sigma2_in)
    return _newton_step_from_state(state)


def _newton_step_from_state(state) -> tuple[Theta, np.ndarray]:
    xi = score_state(state)
    h = hessian_state(state)
    try:
        delta = -sla.solve(h, xi, assume_a="sym")
    except sla.LinAlgError as exc:
        raise NewtonStepError(f"singular Hessian in Newton step: {exc}") from exc
    if not np.all(np.isfinite(delta)):
        raise NewtonStepError("Newton step produced non-finite update")
    theta_out = Theta.from_stacked(state.theta.stacked() + delta, state.theta.p)
    return theta_out, delta


def iterate_newton(dataset: SarDataset, config: EstimatorConfig) -> EstimateReport:
    """Run ``config.newton_steps`` Newton iterations from an initial estimate.

    After each accepted step the variance is refreshed to the profile
    value ``||S(lam) y - X beta||^2 / n`` unless
    ``config.sigma2_update == "fixed_initial"``.  Iteration stops early
    once the relative step norm drops below ``config.convergence_tol``.
    A numerical failure at step s leaves the report with ``failed_at=s``
    and the last valid iterate as the point estimate; iterates whose own
    objective is undefined (nonpositive determinant) are recorded with a
    NaN objective.
    """
    t0 = time.perf_counter()
    initial = estimate_iv(dataset, with_objective=False) if config.initial == "iv" else (
        estimate_ols(dataset, with_objective=False)
    )
    t_init = time.perf_counter() - t0
    theta, sigma2 = initial.theta_hat, initial.sigma2_hat
    report = EstimateReport(
        theta_hat=theta,
        sigma2_hat=sigma2,
        method_label=config.label,
        hessian_builds=0,
    )
    n = dataset.n
    R = spatial_lags(dataset.weights, dataset.y)

    def record(th, s2, step_norm, state):
        obj = neg2_loglik_state(state) if state is not None else np.nan
        report.iterates.append(IterateRecord(th, s2, step_norm, obj))

    state = None
    try:
        state = build_state(dataset, theta, sigma2, R=R)
    except NumericalError as exc:
        record(theta, sigma2, 0.0, None)
        if config.newton_steps > 0:
            report.failed_at = 1
            report.failure_reason = str(exc)
        report.wall_times.update(total=time.perf_counter() - t0, initial=t_init)
        return report
    record(theta, sigma2, 0.0, state)

    for step_idx in range(1, config.newton_steps + 1):
        try:
            theta_new, delta = _newton_step_from_state(state)
        except NumericalError as exc:
            report.failed_at = step_idx
            report.failure_reason = str(exc)
            break
        report.hessian_builds += 1
        resid = dataset.y - R @ theta_new.lam - dataset.X @ theta_new.beta
        if config.sigma2_update == "refresh_each_step":
            sigma2_new = float(resid @ resid / n)
        else:
            sigma2_new = sigma2
        if sigma2_new <= 0.0 or not np.isfinite(sigma2_new):
            report.failed_at = step_idx
            report.failure_reason = f"degenerate variance {sigma2_new!r} after step"
            break
        step_norm = float(np.linalg.norm(delta))
        try:
            state = build_state(dataset, theta_new, sigma2_new, R=R)
        except NumericalError as exc:
            # The estimate itself is defined; only its objective is not.
            report.iterates.append(IterateRecord(theta_new, sigma2_new, step_norm, np.nan))
            theta, sigma2 = theta_new, sigma2_new
            report.theta_hat, report.sigma2_hat = theta, sigma2
            if step_idx < config.newton_steps:
                report.failed_at = step_idx + 1
                report.failure_reason = str(exc)
            break
        record(theta_new, sigma2_new, step_norm, state)
        rel = step_norm / (1.0 + float(np.linalg.norm(theta.stacked())))
        theta, sigma2 = theta_new, sigma2_new
        report.theta_hat, report.sigma2_hat = theta, sigma2
        if rel < config.convergence_tol:
            report.converged = True
            break

    report.wall_times.update(total=time.perf_counter() - t0, initial=t_init)
    return report


@dataclass(frozen=True)
class PmleSearchConfig:
    """Settings for the reference profile-search PMLE."""

    xatol: float = 1e-10
    fatol: float = 1e-13
    max_evaluations: int = 20_000
    lam_abs_sum_bound: float = 0.995
    logdet_method: str = "auto"  # auto | lu | spectral
    max_p: int = 6

    def resolve_method(self, weights: SpatialWeightSet) -> str:
        if self.logdet_method == "auto":
            return "spectral" if weights.spectra is not None else "lu"
        return self.logdet_method


@dataclass(frozen=True)
class PmleResult:
    """Output of the reference PMLE search."""

    theta_check: Theta
    sigma2_check: float
    objective_value: float
    evaluations: int
    converged: bool


def pmle(dataset: SarDataset, search_config: PmleSearchConfig | None = None) -> PmleResult:
    """Reference PMLE by profiling beta and sigma2 out of the objective.

    For fixed ``lam`` the slopes and variance have closed forms, leaving
    a p-dimensional search minimized by Nelder-Mead restarted from the
    IV estimate and from zero.  The search is confined to
    ``sum_i |lam_i| <= 0.995`` (a sufficient invertibility region) with
    determinant-sign rejection inside; this is a tool choice for the
    reference implementation, not a property of the Newton estimates.

    Raises
    ------
    OptimizationFailureError
        If no admissible ``lam`` is found.
    """
    cfg = search_config or PmleSearchConfig()
    p = dataset.p
    if p > cfg.max_p:
        raise ValidationError(
            f"profile search is guarded to p <= {cfg.max_p} at desk scale, got p = {p}"
        )
    n = dataset.n
    y, X = dataset.y, dataset.X
    R = spatial_lags(dataset.weights, dataset.y)

    if p == 0:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ beta
        sigma2 = float(resid @ resid / n)
        theta = Theta(lam=np.empty(0), beta=beta)
        return PmleResult(theta, sigma2, neg2_loglik(dataset, theta, sigma2), 1, True)

    method = cfg.resolve_method(dataset.weights)
    xq, _ = np.linalg.qr(X)
    y_perp = y - xq @ (xq.T @ y)
    r_perp = R - xq @ (xq.T @ R)
    gram_yy = float(y_perp @ y_perp)
    gram_ry = r_perp.T @ y_perp
    gram_rr = r_perp.T @ r_perp
    evaluations = 0

    def profile_objective(lam: np.ndarray) -> float:
        nonlocal evaluations
        evaluations += 1
        if np.sum(np.abs(lam)) > cfg.lam_abs_sum_bound:
            return np.inf
        try:
            ld = logdet_S(dataset.weights, lam, method=method)
        except NumericalError:
            return np.inf
        s2 = (gram_yy - 2.0 * lam @ gram_ry + lam @ gram_rr @ lam) / n
        if s2 <= 0.0 or not np.isfinite(s2):
            return np.inf
        return float(np.log(2.0 * np.pi * s2) + 1.0 - 2.0 / n * ld)

    def feasible_start(lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        total = float(np.sum(np.abs(lam)))
        if total > 0.9 * cfg.lam_abs_sum_bound:
            lam = lam * (0.9 * cfg.lam_abs_sum_bound / total)
        for _ in range(60):
            if np.isfinite(profile_objective(lam)):
                return lam
            lam = lam / 2.0
        return np.zeros_like(lam)

    starts = [np.zeros(p)]
    try:
        starts.insert(0, estimate_iv(dataset, with_objective=False).theta_hat.lam)
    except NumericalError:
        pass

    best = None
    for start in starts:
        res = minimize(
            profile_objective,
            feasible_start(start),
            method="Nelder-Mead",
            options={
                "xatol": cfg.xatol,
                "fatol": cfg.fatol,
                "maxiter": cfg.max_evaluations,
                "maxfev": cfg.max_evaluations,
            },
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise OptimizationFailureError("no admissible lam found in the profile search")

    lam = np.atleast_1d(best.x)
    beta, *_ = np.linalg.lstsq(X, y - R @ lam, rcond=None)
    resid = y - R @ lam - X @ beta
    sigma2 = float(resid @ resid / n)
    theta = Theta(lam=lam, beta=beta)
    objective = neg2_loglik(dataset, theta, sigma2)
    return PmleResult(theta, sigma2, objective, evaluations, bool(best.success))


def benchmark(
    dataset: SarDataset, methods: list[str], repetitions: int = 3
) -> list[dict]:
    """Wall-clock comparison of estimators on identical inputs.

    Each method runs ``repetitions`` times (the reference PMLE once; its
    search is long enough that a median adds nothing) and the table rows
    carry median and min times plus the instrumentation counts of the
    last run: Newton Hessian builds and PMLE objective evaluations.  The
    PMLE is timed on its general LU log-determinant path so the
    comparison reflects arbitrary weight designs, not the circulant
    shortcut.  Run single-threaded for timing integrity.
    """
    if not methods:
        raise ValidationError("methods list must be nonempty")
    rows = []
    for label in methods:
        reps = 1 if label == "pmle" else repetitions
        times = []
        hessian_builds = 0
        objective_evals = 0
        for _ in range(reps):
            t0 = time.perf_counter()
            if label == "iv":
                estimate_iv(dataset, with_objective=False)
            elif label == "ols":
                estimate_ols(dataset, with_objective=False)
            elif label.startswith("newton"):
                steps = int(label[len("newton"):] or 1)
                cfg = EstimatorConfig(initial="iv", newton_steps=steps)
                rep = iterate_newton(dataset, cfg)
                hessian_builds = rep.hessian_builds
            elif label == "pmle":
                res = pmle(dataset, PmleSearchConfig(logdet_method="lu"))
                objective_evals = res.evaluations
            else:
                raise ValidationError(f"unknown benchmark method {label!r}")
            times.append(time.perf_counter() - t0)
        rows.append(
            {
                "method": label,
                "n": dataset.n,
                "p": dataset.p,
                "repetitions": reps,
                "median_s": float(np.median(times)),
                "min_s": float(np.min(times)),
                "hessian_builds": hessian_builds,
                "objective_evaluations": objective_evals,
            }
        )
    return rows
