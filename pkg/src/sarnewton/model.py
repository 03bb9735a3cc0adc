"""Analytic core of the higher-order SAR model.

The model is ``y = sum_i lam_i W_i y + X beta + u`` with p spatial weight
matrices.  Everything here is expressed through the (-2/n) Gaussian
pseudo log-likelihood

    Q(theta, sigma2) = log(2 pi sigma2) - (2/n) log det S(lam)
                       + ||S(lam) y - X beta||^2 / (n sigma2),

where ``S(lam) = I - sum_i lam_i W_i``.  The module provides simulation
from the reduced form, the objective, its analytic gradient and Hessian,
the expected Hessian at the truth, and the score-variance excess that
appears under non-Gaussian errors.

All operations are pure functions of immutable inputs; a
:class:`SpatialSolve` caches the factorization-dependent quantities for
one value of ``lam`` and may be shared across evaluations at different
``(beta, sigma2)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import (
    InvalidDesignError,
    NonpositiveDeterminantError,
    SingularModelError,
    ValidationError,
)
from .weights import SpatialWeightSet

__all__ = [
    "Theta",
    "SarDataset",
    "MomentInputs",
    "SpatialSolve",
    "ObjectiveState",
    "spatial_lags",
    "simulate",
    "draw_errors",
    "neg2_loglik",
    "score",
    "hessian",
    "expected_hessian",
    "score_variance_excess",
    "logdet_S",
    "numerical_rank",
]

ERROR_SPECS = ("std_normal", "t6", "het_normal")


@dataclass(frozen=True)
class Theta:
    """Stacked parameter point: spatial coefficients and slopes."""

    lam: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", np.atleast_1d(np.asarray(self.lam, dtype=float)))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not (np.all(np.isfinite(self.lam)) and np.all(np.isfinite(self.beta))):
            raise ValidationError("parameter vector contains non-finite entries")

    @property
    def p(self) -> int:
        return self.lam.size

    @property
    def k(self) -> int:
        return self.beta.size

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.lam, self.beta])

    @classmethod
    def from_stacked(cls, vec: np.ndarray, p: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        return cls(lam=vec[:p], beta=vec[p:])


def numerical_rank(a: np.ndarray) -> int:
    """Column rank by pivoted QR with tolerance 1e-10 * largest column norm."""
    if a.size == 0:
        return 0
    r = sla.qr(a, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    tol = 1e-10 * float(np.max(np.linalg.norm(a, axis=0)))
    return int(np.sum(diag > tol))


@dataclass(frozen=True)
class SarDataset:
    """Observed data: response, regressors, weights, optional instruments."""

    y: np.ndarray
    X: np.ndarray
    weights: SpatialWeightSet
    Z: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValidationError("X must be a 2-d array")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        n = y.size
        if X.shape[0] != n:
            raise ValidationError(f"X has {X.shape[0]} rows, y has {n}")
        if self.weights.n != n:
            raise ValidationError(
                f"weight matrices are {self.weights.n} x {self.weights.n}, need {n}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValidationError("y or X contains non-finite entries")
        if numerical_rank(X) < X.shape[1]:
            raise ValidationError("X is rank deficient")
        if self.Z is not None:
            Z = np.asarray(self.Z, dtype=float)
            if Z.ndim != 2 or Z.shape[0] != n:
                raise ValidationError("Z must be an n x r matrix")
            if not np.all(np.isfinite(Z)):
                raise ValidationError("Z contains non-finite entries")
            # Z itself must be full rank; overlap with X is legal (the
            # estimator deduplicates when stacking [Z, X]).
            if numerical_rank(Z) < Z.shape[1]:
                raise ValidationError("Z is rank deficient")
            object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.weights.p


@dataclass(frozen=True)
class MomentInputs:
    """Third and fourth error moments plus the error variance."""

    mu3: float
    mu4: float
    sigma2: float

    def __post_init__(self):
        if not all(np.isfinite([self.mu3, self.mu4, self.sigma2])):
            raise ValidationError("moments must be finite")
        if self.sigma2 <= 0:
            raise ValidationError("sigma2 must be positive")
        if self.mu4 < self.sigma2**2 * (1 - 1e-12):
            raise ValidationError("mu4 < sigma2^2 violates Jensen's inequality")


def spatial_lags(weights: SpatialWeightSet, y: np.ndarray) -> np.ndarray:
    """The n x p matrix whose column i is ``W_i y``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != weights.n:
        raise ValidationError("y length does not match weight dimension")
    if weights.p == 0:
        return np.empty((y.size, 0))
    return np.column_stack([w @ y for w in weights.mats])


class SpatialSolve:
    """LU factorization of ``S(lam)`` with cached derived quantities.

    Construction fails with :class:`SingularModelError` if the
    factorization breaks down and with
    :class:`NonpositiveDeterminantError` if ``det S(lam) <= 0``, where
    the pseudo-likelihood is undefined.  The dense inverse and the
    ``G_i = W_i S^{-1}`` products are computed lazily, once, and reused
    by every trace the score and Hessian need.
    """

    def __init__(self, weights: SpatialWeightSet, lam: np.ndarray):
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.size != weights.p:
            raise ValidationError(f"lam has length {lam.size}, expected {weights.p}")
        self.weights = weights
        self.lam = lam
        n = weights.n
        s = np.eye(n)
        for li, w in zip(lam, weights.mats):
            if li != 0.0:
                s -= li * w.toarray()
        try:
            with warnings.catch_warnings():
                # an exact zero pivot warns before we turn it into a
                # typed error below
                warnings.simplefilter("ignore", sla.LinAlgWarning)
                lu, piv = sla.lu_factor(s, check_finite=False)
        except (ValueError, sla.LinAlgError) as exc:
            raise SingularModelError(f"LU factorization of S(lam) failed: {exc}") from exc
        diag = np.diag(lu)
        if np.any(diag == 0.0):
            raise SingularModelError("S(lam) is singular")
        sign = 1 if np.sum(piv != np.arange(n)) % 2 == 0 else -1
        sign *= -1 if np.sum(diag < 0) % 2 else 1
        if sign <= 0:
            raise NonpositiveDeterminantError(
                "det S(lam) <= 0: objective undefined at this lam"
            )
        self._lu = (lu, piv)
        self.logdet = float(np.sum(np.log(np.abs(diag))))

    @property
    def n(self) -> int:
        return self.weights.n

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``S(lam) x = b``."""
        return sla.lu_solve(self._lu, b, check_finite=False)

    @cached_property
    def s_inv(self) -> np.ndarray:
        return sla.lu_solve(self._lu, np.eye(self.n), check_finite=False)

    @cached_property
    def g_mats(self) -> list[np.ndarray]:
        return [w @ self.s_inv for w in self.weights.mats]

    @cached_property
    def trace_g(self) -> np.ndarray:
        """Vector of ``tr G_i`` (zero at lam = 0 since diagonals vanish)."""
        sit = self.s_inv.T
        return np.array([w.multiply(sit).sum() for w in self.weights.mats])

    def g_diagonals(self) -> np.ndarray:
        """(n, p) array with column i the diagonal of ``G_i``."""
        sit = self.s_inv.T
        cols = [np.asarray(w.multiply(sit).sum(axis=1)).ravel() for w in self.weights.mats]
        return np.column_stack(cols) if cols else np.empty((self.n, 0))

    def trace_product(self, j: int, i: int, transpose_first: bool = False) -> float:
        """``tr(G_j G_i)``, or ``tr(G_j' G_i)`` when ``transpose_first``.

        Indices are 0-based.  Uses the cached dense ``G`` matrices; the
        one-time dense inverse is amortized across all p^2 traces.
        """
        gj, gi = self.g_mats[j], self.g_mats[i]
        if transpose_first:
            return float(np.einsum("rs,rs->", gj, gi))
        return float(np.einsum("rs,sr->", gj, gi))

    def _pair_trace_matrix(self, transpose_first: bool) -> np.ndarray:
        p = self.weights.p
        out = np.zeros((p, p))
        for i in range(p):
            for j in range(i, p):
                t = self.trace_product(j, i, transpose_first)
                out[i, j] = t
                out[j, i] = t
        return out

    @cached_property
    def pair_traces(self) -> np.ndarray:
        """p x p matrix with (i, j) element ``tr(G_j G_i)`` (symmetric)."""
        return self._pair_trace_matrix(transpose_first=False)

    @cached_property
    def pair_traces_transposed(self) -> np.ndarray:
        """p x p matrix with (i, j) element ``tr(G_j' G_i)`` (symmetric)."""
        return self._pair_trace_matrix(transpose_first=True)


@dataclass(frozen=True)
class ObjectiveState:
    """Cached quantities for one evaluation point of the objective."""

    dataset: SarDataset
    theta: Theta
    sigma2: float
    solve: SpatialSolve
    R: np.ndarray
    resid: np.ndarray

    @property
    def logdetS(self) -> float:
        return self.solve.logdet

    @property
    def S_factor(self) -> SpatialSolve:
        return self.solve


def build_state(
    dataset: SarDataset,
    theta: Theta,
    sigma2: float,
    solve: SpatialSolve | None = None,
    R: np.ndarray | None = None,
) -> ObjectiveState:
    """Assemble an :class:`ObjectiveState`, reusing caches when supplied."""
    if sigma2 <= 0 or not np.isfinite(sigma2):
        raise ValidationError("sigma2 must be positive and finite")
    if theta.p != dataset.p or theta.k != dataset.k:
        raise ValidationError(
            f"theta has (p, k) = ({theta.p}, {theta.k}), "
            f"dataset has ({dataset.p}, {dataset.k})"
        )
    if solve is None or not np.array_equal(solve.lam, theta.lam):
        solve = SpatialSolve(dataset.weights, theta.lam)
    if R is None:
        R = spatial_lags(dataset.weights, dataset.y)
    resid = dataset.y - R @ theta.lam - dataset.X @ theta.beta
    return ObjectiveState(
        dataset=dataset, theta=theta, sigma2=float(sigma2), solve=solve, R=R, resid=resid
    )


def logdet_S(weights: SpatialWeightSet, lam: np.ndarray, method: str = "lu") -> float:
    """``log det S(lam)``, raising if the determinant is not positive.

    ``method="lu"`` tracks the sign through an LU factorization.
    ``method="spectral"`` uses the eigenvalue table carried by
    simultaneously diagonalizable weight families (circulant design) and
    costs O(n p); it requires ``weights.spectra``.
    """
    if method == "lu":
        return SpatialSolve(weights, lam).logdet
    if method != "spectral":
        raise ValidationError(f"unknown logdet method {method!r}")
    if weights.spectra is None:
        raise ValidationError("weight set carries no eigenvalue table")
    factors = 1.0 - weights.spectra @ np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(factors <= 0.0):
        raise NonpositiveDeterminantError("det S(lam) <= 0 on the spectral path")
    return float(np.sum(np.log(factors)))


# -- simulation -------------------------------------------------------------


def draw_errors(
    error_spec: str, n: int, rng: np.random.Generator, X: np.ndarray | None = None
) -> np.ndarray:
    """Draw the disturbance vector for one replication.

    ``std_normal`` draws N(0, 1); ``t6`` draws Student t with 6 degrees
    of freedom, unstandardized (variance 3/2); ``het_normal`` draws
    N(0, h_j) with multiplicative heteroskedasticity through the first
    two regressor columns:

        h_j = n * (|x_j1| + |x_j2|) / sum_r (|x_r1| + |x_r2|),

    so the h_j average to one exactly.
    """
    if error_spec == "std_normal":
        return rng.standard_normal(n)
    if error_spec == "t6":
        return rng.standard_t(6, size=n)
    if error_spec == "het_normal":
        if X is None or X.shape[1] < 2:
            raise InvalidDesignError("het_normal errors need X with at least 2 columns")
        s = np.abs(X[:, 0]) + np.abs(X[:, 1])
        total = float(s.sum())
        if total <= 0:
            raise InvalidDesignError("het_normal errors need a nonzero |x1|+|x2|")
        h = n * s / total
        return rng.standard_normal(n) * np.sqrt(h)
    raise InvalidDesignError(f"unknown error spec {error_spec!r}; choose from {ERROR_SPECS}")


def simulate(
    weights: SpatialWeightSet,
    X: np.ndarray,
    beta0: np.ndarray,
    lambda0: np.ndarray,
    error_spec: str = "std_normal",
    seed: int = 0,
) -> np.ndarray:
    """Simulate a response vector from the reduced form.

    Solves ``S(lambda0) y = X beta0 + u`` with ``u`` drawn according to
    ``error_spec``.  Pure function of its arguments: the same seed gives
    bit-identical output.

    Raises
    ------
    SingularModelError
        If ``S(lambda0)`` is singular.
    """
    X = np.asarray(X, dtype=float)
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    lambda0 = np.atleast_1d(np.asarray(lambda0, dtype=float))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u = draw_errors(error_spec, weights.n, rng, X=X)
    return simulate_given_errors(weights, X, beta0, lambda0, u)


def simulate_given_errors(
    weights: SpatialWeightSet,
    X: np.ndarray,
    beta0: np.ndarray,
    lambda0: np.ndarray,
    u: np.ndarray,
    solve: SpatialSolve | None = None,
) -> np.ndarray:
    """Reduced-form response for given disturbances.

    ``solve`` may carry a prefactored ``S(lambda0)`` so that Monte Carlo
    loops factor once per design rather than once per replication.
    """
    rhs = X @ beta0 + u
    if np.all(lambda0 == 0.0):
        return rhs
    if solve is None:
        solve = SpatialSolve(weights, lambda0)
    elif not np.array_equal(solve.lam, lambda0):
        raise ValidationError("prefactored solve does not match lambda0")
    return solve.solve(rhs)


# -- objective, gradient, Hessian -------------------------------------------


def neg2_loglik_state(state: ObjectiveState) -> float:
    n = state.dataset.n
    rss = float(state.resid @ state.resid)
    return (
        float(np.log(2.0 * np.pi * state.sigma2))
        - 2.0 / n * state.logdetS
        + rss / (n * state.sigma2)
    )


def neg2_loglik(dataset: SarDataset, theta: Theta, sigma2: float) -> float:
    """(-2/n) Gaussian pseudo log-likelihood at ``(theta, sigma2)``."""
    return neg2_loglik_state(build_state(dataset, theta, sigma2))


def score_state(state: ObjectiveState) -> np.ndarray:
    n = state.dataset.n
    sigma2 = state.sigma2
    # resid = S(lam) y - X beta = -(R lam + X beta - y), which fixes the
    # signs below.
    lam_part = (2.0 / (sigma2 * n)) * (
        sigma2 * state.solve.trace_g - state.R.T @ state.resid
    )
    beta_part = -(2.0 / (sigma2 * n)) * (state.dataset.X.T @ state.resid)
    return np.concatenate([lam_part, beta_part])


def score(dataset: SarDataset, theta: Theta, sigma2: float) -> np.ndarray:
    """Gradient of the objective with respect to theta, sigma2 held fixed."""
    return score_state(build_state(dataset, theta, sigma2))


def _mirror(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2.0


def hessian_state(state: ObjectiveState) -> np.ndarray:
    n = state.dataset.n
    sigma2 = state.sigma2
    X = state.dataset.X
    R = state.R
    p, k = state.theta.p, state.theta.k
    h = np.zeros((p + k, p + k))
    if p:
        h[:p, :p] = (2.0 / n) * state.solve.pair_traces + (2.0 / (n * sigma2)) * _mirror(
            R.T @ R
        )
        cross = (2.0 / (n * sigma2)) * (R.T @ X)
        h[:p, p:] = cross
        h[p:, :p] = cross.T
    h[p:, p:] = (2.0 / (n * sigma2)) * _mirror(X.T @ X)
    return h


def hessian(dataset: SarDataset, theta: Theta, sigma2: float) -> np.ndarray:
    """Analytic Hessian of the objective in theta; exactly symmetric."""
    return hessian_state(build_state(dataset, theta, sigma2))


def _lag_means(solve: SpatialSolve, X: np.ndarray, beta0: np.ndarray) -> np.ndarray:
    """Columns ``G_i X beta0`` without forming dense G matrices."""
    xb = solve.solve(X @ beta0)
    cols = [w @ xb for w in solve.weights.mats]
    return np.column_stack(cols) if cols else np.empty((X.shape[0], 0))


def expected_hessian(dataset: SarDataset, theta0: Theta, sigma2_0: float) -> np.ndarray:
    """Expectation of the Hessian at the true parameter point.

    The spatial block replaces the random ``R'R`` Gram by its mean,
    which splits into the two pair-trace matrices plus the Gram of the
    systematic lag components ``G_i X beta0``.
    """
    if sigma2_0 <= 0:
        raise ValidationError("sigma2_0 must be positive")
    if theta0.p != dataset.p or theta0.k != dataset.k:
        raise ValidationError("theta0 dimensions do not match the dataset")
    solve = SpatialSolve(dataset.weights, theta0.lam)
    X = dataset.X
    n = dataset.n
    p, k = theta0.p, theta0.k
    a = _lag_means(solve, X, theta0.beta)
    out = np.zeros((p + k, p + k))
    if p:
        out[:p, :p] = (2.0 / n) * (
            solve.pair_traces
            + solve.pair_traces_transposed
            + _mirror(a.T @ a) / sigma2_0
        )
        cross = (2.0 / (n * sigma2_0)) * (a.T @ X)
        out[:p, p:] = cross
        out[p:, :p] = cross.T
    out[p:, p:] = (2.0 / (n * sigma2_0)) * _mirror(X.T @ X)
    return out


def score_variance_excess(
    dataset: SarDataset, theta0: Theta, moments: MomentInputs
) -> np.ndarray:
    """Excess of the score variance over twice the expected Hessian.

    ``n E(score score') = 2 * expected_hessian + excess``; the excess
    vanishes under Gaussian errors (mu3 = 0, mu4 = 3 sigma^4) and more
    generally whenever the ``G_i`` have zero diagonals.  The skewness
    term is assembled in symmetrized form, which is the dimensionally
    consistent reading of the defining sums and keeps the matrix exactly
    symmetric.
    """
    if theta0.p != dataset.p or theta0.k != dataset.k:
        raise ValidationError("theta0 dimensions do not match the dataset")
    p, k = theta0.p, theta0.k
    out = np.zeros((p + k, p + k))
    if p == 0:
        return out
    solve = SpatialSolve(dataset.weights, theta0.lam)
    n = dataset.n
    s4 = moments.sigma2**2
    cdiag = 2.0 * solve.g_diagonals()  # columns: diagonals of C_i = G_i + G_i'
    b = _lag_means(solve, dataset.X, theta0.beta)
    t_cb = cdiag.T @ b
    lam_block = (2.0 * moments.mu3 / (n * s4)) * (t_cb + t_cb.T)
    lam_block += ((moments.mu4 - 3.0 * s4) / (n * s4)) * _mirror(cdiag.T @ cdiag)
    lam_beta = (2.0 * moments.mu3 / (n * s4)) * (dataset.X.T @ cdiag)  # k x p
    out[:p, :p] = lam_block
    out[:p, p:] = lam_beta.T
    out[p:, :p] = lam_beta
    return out
