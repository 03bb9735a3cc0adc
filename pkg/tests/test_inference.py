"""Covariance estimators, standard errors, and t-statistics."""

from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from numpy.testing import assert_allclose

import sarnewton.rng as rngmod
from sarnewton.errors import DegenerateInferenceError
from sarnewton.estimators import EstimatorConfig, estimate_ols, iterate_newton
from sarnewton.inference import (
    CovarianceEstimate,
    covariance_bounded,
    covariance_divergent,
    residual_moments,
    se_ratio,
    t_statistics,
)
from sarnewton.model import SarDataset, draw_errors, simulate, simulate_given_errors
from sarnewton.model import SpatialSolve
from sarnewton.weights import build_random_sparse, circulant_weight_set, empty_weight_set


def make_dataset(n=120, p=2, seed=0, lam=(0.4, 0.5), beta=(1.0, 0.5)):
    ws = circulant_weight_set(n, p)
    X = np.random.default_rng(seed).uniform(size=(n, 2))
    y = simulate(ws, X, beta, lam[:p], "std_normal", seed=seed + 1)
    return SarDataset(y=y, X=X, weights=ws)


class TestDivergentCovariance:
    def test_reduces_to_classical_ols(self):
        n = 60
        ws = empty_weight_set(n)
        X = np.random.default_rng(1).uniform(size=(n, 2))
        y = np.random.default_rng(2).normal(size=n)
        ds = SarDataset(y=y, X=X, weights=ws)
        rep = estimate_ols(ds)
        cov = covariance_divergent(ds, rep)
        classical = rep.sigma2_hat * np.linalg.inv(X.T @ X)
        assert_allclose(cov.matrix, classical, rtol=1e-10)
        assert cov.regime == "divergent_h"

    def test_se_halves_when_n_doubles(self):
        # circulant design keeps the Gram limit stable, so SE ~ n^(-1/2)
        ses = {}
        for n in (400, 800):
            acc = []
            for seed in range(30):
                ds = make_dataset(n=n, seed=seed)
                rep = iterate_newton(ds, EstimatorConfig(newton_steps=1))
                acc.append(covariance_divergent(ds, rep).se)
            ses[n] = np.mean(acc, axis=0)
        ratio = ses[800] / ses[400]
        assert np.all(np.abs(ratio - 1 / np.sqrt(2)) < 0.15 / np.sqrt(2))

    def test_coverage_divergent_n800(self):
        # 95% CIs for beta_1 from the one-step Newton estimate cover the
        # truth in 95% +/- 2% of replications
        reps = 2000
        with ProcessPoolExecutor(max_workers=2) as pool:
            parts = pool.map(_coverage_block, [(0, reps // 2), (reps // 2, reps)])
        hits, total = np.sum(list(parts), axis=0)
        coverage = hits / total
        assert abs(coverage - 0.95) < 0.02


def _coverage_block(bounds):
    lo, hi = bounds
    n = 800
    ws = build_random_sparse(n, 2, seed=2024)
    lam0, beta0 = np.array([0.4, 0.5]), np.array([1.0, 0.5])
    solve0 = SpatialSolve(ws, lam0)
    hits = 0
    total = 0
    for r in range(lo, hi):
        X = rngmod.stream(55, r, rngmod.PURPOSE_X).uniform(size=(n, 2))
        u = draw_errors("std_normal", n, rngmod.stream(55, r, rngmod.PURPOSE_ERRORS))
        y = simulate_given_errors(ws, X, beta0, lam0, u, solve=solve0)
        ds = SarDataset(y=y, X=X, weights=ws)
        rep = iterate_newton(ds, EstimatorConfig(newton_steps=1))
        if rep.failed_at is not None:
            continue
        cov = covariance_divergent(ds, rep)
        b1 = rep.theta_hat.beta[0]
        half = 1.959963984540054 * cov.se[2]
        hits += int(abs(b1 - beta0[0]) <= half)
        total += 1
    return np.array([hits, total])


class TestBoundedCovariance:
    def test_gaussian_regimes_agree_on_divergent_design(self):
        # with Gaussian errors the excess vanishes and L ~ (sigma2/2) Xi,
        # so the two covariance formulas nearly coincide
        n = 800
        ws = build_random_sparse(n, 2, seed=5)
        X = np.random.default_rng(6).uniform(size=(n, 2))
        y = simulate(ws, X, [1.0, 0.5], [0.4, 0.5], "std_normal", seed=7)
        ds = SarDataset(y=y, X=X, weights=ws)
        rep = iterate_newton(ds, EstimatorConfig(newton_steps=1))
        cd = covariance_divergent(ds, rep)
        cb = covariance_bounded(ds, rep)
        rel = np.max(np.abs(cd.matrix - cb.matrix)) / np.max(np.abs(cd.matrix))
        assert rel < 0.1

    def test_moment_plugins_recorded(self):
        ds = make_dataset(150, 2, seed=9)
        rep = iterate_newton(ds, EstimatorConfig(newton_steps=3))
        cov = covariance_bounded(ds, rep)
        m = cov.moment_inputs_used
        assert m is not None and m.mu4 >= m.sigma2**2 * (1 - 1e-12)
        explicit = covariance_bounded(ds, rep, moments=residual_moments(ds, rep))
        assert_allclose(cov.matrix, explicit.matrix, rtol=1e-12)

    def test_positive_semidefinite(self):
        ds = make_dataset(150, 2, seed=10)
        rep = iterate_newton(ds, EstimatorConfig(newton_steps=3))
        for cov in (covariance_bounded(ds, rep), covariance_divergent(ds, rep)):
            eigs = np.linalg.eigvalsh(cov.matrix)
            assert eigs.min() > -1e-10
            assert np.all(cov.se > 0)

    def test_se_ratio_structure(self):
        ds = make_dataset(200, 2, seed=11)
        iv = iterate_newton(ds, EstimatorConfig(newton_steps=0))
        newton = iterate_newton(ds, EstimatorConfig(newton_steps=1))
        ratio = se_ratio(covariance_bounded(ds, iv), covariance_bounded(ds, newton))
        assert ratio.shape == (4,)
        assert np.all(np.isfinite(ratio)) and np.all(ratio >= 0)


class TestTStatistics:
    def _cov(self, diag):
        return CovarianceEstimate(matrix=np.diag(diag), regime="divergent_h")

    def test_zero_estimate_zero_t(self):
        from sarnewton.estimators import EstimateReport
        from sarnewton.model import Theta

        rep = EstimateReport(
            theta_hat=Theta(lam=[0.0], beta=[0.0]), sigma2_hat=1.0, method_label="iv"
        )
        t = t_statistics(rep, self._cov([0.25, 0.25]))
        assert np.array_equal(t, [0.0, 0.0])

    def test_doubling_se_halves_t(self):
        from sarnewton.estimators import EstimateReport
        from sarnewton.model import Theta

        rep = EstimateReport(
            theta_hat=Theta(lam=[0.4], beta=[1.0]), sigma2_hat=1.0, method_label="iv"
        )
        t1 = t_statistics(rep, self._cov([0.04, 0.01]))
        t2 = t_statistics(rep, self._cov([0.16, 0.04]))
        assert_allclose(t1, 2.0 * t2, rtol=1e-14)

    def test_zero_se_rejected(self):
        from sarnewton.estimators import EstimateReport
        from sarnewton.model import Theta

        rep = EstimateReport(
            theta_hat=Theta(lam=[0.4], beta=[1.0]), sigma2_hat=1.0, method_label="iv"
        )
        with pytest.raises(DegenerateInferenceError):
            t_statistics(rep, self._cov([0.0, 1.0]))

    def test_power_smoke_beta2(self):
        # beta_2 = 0.5 against SE ~ 0.15 at n = 400 (the estimator's
        # actual sampling SD there): |t| > 2 most of the time
        hits = 0
        reps = 100
        for seed in range(reps):
            ds = make_dataset(n=400, seed=100 + seed)
            rep = iterate_newton(ds, EstimatorConfig(newton_steps=1))
            cov = covariance_bounded(ds, rep)
            t = t_statistics(rep, cov)
            hits += int(abs(t[3]) > 2.0)
        assert hits >= 0.8 * reps

    def test_scale_equivariance(self):
        ds = make_dataset(200, 2, seed=12)
        c = 7.5
        X2 = ds.X.copy()
        X2[:, 1] *= c
        ds2 = SarDataset(y=ds.y, X=X2, weights=ds.weights)
        rep1 = iterate_newton(ds, EstimatorConfig(newton_steps=2))
        rep2 = iterate_newton(ds2, EstimatorConfig(newton_steps=2))
        assert_allclose(rep2.theta_hat.beta[1], rep1.theta_hat.beta[1] / c, rtol=1e-8)
        t1 = t_statistics(rep1, covariance_bounded(ds, rep1))
        t2 = t_statistics(rep2, covariance_bounded(ds2, rep2))
        assert abs(t1[3] - t2[3]) < 1e-8
