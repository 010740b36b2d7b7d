import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from tosccamm.lme import (
    DesignError,
    MixedModelFit,
    TimeBasis,
    build_design,
    fit_lme,
    mean_trajectory,
    predict_latent,
    profiled_loglik,
)


def balanced(n=20, m=5, s2b=0.8, s2e=0.5, beta=(1.0, -0.4), seed=0):
    rng = np.random.default_rng(seed)
    subj = np.repeat(np.arange(n), m).astype(str)
    t = np.tile(np.arange(1.0, m + 1), n)
    b = rng.normal(0, math.sqrt(s2b), n)
    y = beta[0] + beta[1] * t + np.repeat(b, m) + rng.normal(0, math.sqrt(s2e), n * m)
    return y, subj, t


def marginal_cov(subj, lam, s2e=1.0):
    same = subj[:, None] == subj[None, :]
    return s2e * (np.eye(len(subj)) + lam * same)


def gls_oracle(y, D, V):
    Vi = np.linalg.inv(V)
    return np.linalg.solve(D.T @ Vi @ D, D.T @ Vi @ y)


# -- bases ------------------------------------------------------------------


def test_design_rows():
    np.testing.assert_array_equal(build_design(TimeBasis.polynomial(3), [2.0]), [[1, 2, 4, 8]])
    cp = TimeBasis.changepoint(1, 0.0)
    np.testing.assert_array_equal(build_design(cp, [-1.0, 1.0]), [[1, -1, 0], [1, 1, 1]])
    np.testing.assert_array_equal(build_design(TimeBasis.linear(), [0.0]), [[1, 0]])
    assert TimeBasis.linear() == TimeBasis.polynomial(1)
    assert TimeBasis.changepoint(2).n_columns == TimeBasis.polynomial(2).n_columns + 1


@pytest.mark.parametrize("text", ["linear", "poly:3", "changepoint:3:0", "changepoint:2:1.5"])
def test_basis_text_round_trip(text):
    b = TimeBasis.parse(text)
    assert TimeBasis.parse(str(b)) == b


def test_basis_parse_rejects_garbage():
    for bad in ("cubic", "poly:0", "poly:x"):
        with pytest.raises(ValueError):
            TimeBasis.parse(bad)


def test_rank_deficient_design():
    with pytest.raises(DesignError):
        fit_lme(np.arange(6.0), list("aabbcc"), [1, 2, 1, 2, 1, 2], TimeBasis.polynomial(3))


# -- estimation against dense oracles ----------------------------------------


def test_gls_and_blup_match_dense_oracle():
    y, subj, t = balanced()
    fit = fit_lme(y, subj, t)
    lam = fit.ratio
    assert 0 < lam < 1e3
    D = build_design(TimeBasis.linear(), t)
    V = marginal_cov(subj, lam, fit.var_resid)
    beta = gls_oracle(y, D, V)
    np.testing.assert_allclose(fit.fixed_effects, beta, atol=1e-6)
    for s in np.unique(subj):
        rows = subj == s
        m = rows.sum()
        r = y[rows] - D[rows] @ fit.fixed_effects
        shrink = lam * m / (1 + lam * m) * r.mean()
        assert fit.random_intercepts[s] == pytest.approx(shrink, abs=1e-8)
        # BLUP from the full covariance: s2b 1' V_i^-1 r
        Vi = np.linalg.inv(V[np.ix_(rows, rows)])
        assert fit.random_intercepts[s] == pytest.approx(fit.var_random * Vi.sum(0) @ r, abs=1e-8)


def test_known_ratio_gls_unbalanced():
    rng = np.random.default_rng(4)
    subj = np.repeat(np.arange(12), rng.integers(1, 6, 12)).astype(str)
    t = rng.uniform(0, 5, len(subj))
    y = 0.3 + 0.7 * t + rng.standard_normal(len(subj))
    fit = fit_lme(y, subj, t, variance_ratio=2.5)
    D = build_design(TimeBasis.linear(), t)
    np.testing.assert_allclose(fit.fixed_effects, gls_oracle(y, D, marginal_cov(subj, 2.5)),
                               atol=1e-8)
    assert fit.ratio == pytest.approx(2.5)


def test_loglik_matches_multivariate_normal():
    y, subj, t = balanced(seed=2)
    fit = fit_lme(y, subj, t)
    D = build_design(TimeBasis.linear(), t)
    cov = fit.var_resid * np.eye(len(y)) + fit.var_random * (subj[:, None] == subj[None, :])
    dense = multivariate_normal(D @ fit.fixed_effects, cov).logpdf(y)
    assert fit.loglik == pytest.approx(dense, abs=1e-8)


def test_ml_estimates_match_direct_optimisation():
    y, subj, t = balanced(seed=6)
    fit = fit_lme(y, subj, t)
    D = build_design(TimeBasis.linear(), t)
    same = (subj[:, None] == subj[None, :]).astype(float)

    def nll(par):
        b0, b1, ls2b, ls2e = par
        cov = math.exp(ls2e) * np.eye(len(y)) + math.exp(ls2b) * same
        return -multivariate_normal(D @ [b0, b1], cov).logpdf(y)

    res = minimize(nll, [0, 0, 0, 0], method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 20000, "maxfev": 20000})
    assert -res.fun <= fit.loglik + 1e-8
    assert fit.var_random == pytest.approx(math.exp(res.x[2]), rel=1e-3)
    assert fit.var_resid == pytest.approx(math.exp(res.x[3]), rel=1e-3)


def test_profiled_loglik_beats_random_ratios():
    y, subj, t = balanced(seed=3)
    fit = fit_lme(y, subj, t)
    best = profiled_loglik(y, subj, t, TimeBasis.linear(), fit.ratio)
    assert best == pytest.approx(fit.loglik)
    rng = np.random.default_rng(0)
    for lam in 10 ** rng.uniform(-6, 3, 50):
        assert profiled_loglik(y, subj, t, TimeBasis.linear(), lam) <= best + 1e-12
    for f in (1 - 1e-3, 1 + 1e-3):
        assert profiled_loglik(y, subj, t, TimeBasis.linear(), fit.ratio * f) <= best + 1e-9


def test_zero_between_subject_variation_gives_ols():
    rng = np.random.default_rng(1)
    n, m = 15, 4
    subj = np.repeat(np.arange(n), m).astype(str)
    t = np.tile(np.arange(m, dtype=float), n)
    e = rng.standard_normal((n, m))
    e -= e.mean(1, keepdims=True)  # b_i = 0 exactly, and no spurious subject means
    y = 2.0 - 0.5 * t + e.ravel()
    fit = fit_lme(y, subj, t)
    ols, *_ = np.linalg.lstsq(build_design(TimeBasis.linear(), t), y, rcond=None)
    assert fit.var_random == 0.0
    np.testing.assert_allclose(fit.fixed_effects, ols, atol=1e-8)


def test_singletons_fall_back_to_ols():
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 3, 30)
    y = 1 + t + rng.standard_normal(30)
    with pytest.warns(UserWarning, match="single observation"):
        fit = fit_lme(y, np.arange(30), t)
    ols, *_ = np.linalg.lstsq(build_design(TimeBasis.linear(), t), y, rcond=None)
    np.testing.assert_allclose(fit.fixed_effects, ols, atol=1e-10)
    assert fit.var_random == 0.0


# -- properties ---------------------------------------------------------------


def test_blups_shrink_and_grow_with_ratio():
    y, subj, t = balanced(seed=7)
    D = build_design(TimeBasis.linear(), t)
    prev = None
    for lam in (0.01, 0.1, 1.0, 10.0, 100.0):
        fit = fit_lme(y, subj, t, variance_ratio=lam)
        b = np.array([fit.random_intercepts[s] for s in np.unique(subj)])
        resid = np.array([(y - D @ fit.fixed_effects)[subj == s].mean() for s in np.unique(subj)])
        assert np.all(np.abs(b) <= np.abs(resid) + 1e-12)
        if prev is not None:
            assert np.all(np.abs(b) >= np.abs(prev) - 1e-12)
        prev = b


def test_blup_shrinkage_grows_with_measurement_count():
    rng = np.random.default_rng(8)
    counts = np.array([1, 2, 3, 5, 8, 13])
    subj = np.repeat(np.arange(len(counts)), counts).astype(str)
    t = np.concatenate([np.arange(c, dtype=float) for c in counts])
    y = 1 + 0.2 * t + np.repeat(rng.standard_normal(len(counts)), counts) + rng.standard_normal(len(t))
    fit = fit_lme(y, subj, t, variance_ratio=0.5)
    r = y - build_design(TimeBasis.linear(), t) @ fit.fixed_effects
    factors = [fit.random_intercepts[s] / r[subj == s].mean() for s in np.unique(subj)]
    np.testing.assert_allclose(factors, 0.5 * counts / (1 + 0.5 * counts), rtol=1e-10)
    assert np.all(np.diff(factors) > 0)


@pytest.mark.parametrize("seed", [0, 9])
def test_shift_equivariance(seed):
    y, subj, t = balanced(seed=seed)
    f0 = fit_lme(y, subj, t)
    f1 = fit_lme(y + 3.7, subj, t)
    assert f1.fixed_effects[0] == pytest.approx(f0.fixed_effects[0] + 3.7, abs=1e-8)
    assert f1.fixed_effects[1] == pytest.approx(f0.fixed_effects[1], abs=1e-8)
    assert f1.var_random == pytest.approx(f0.var_random, abs=1e-8)
    assert f1.var_resid == pytest.approx(f0.var_resid, abs=1e-8)
    for s, v in f0.random_intercepts.items():
        assert f1.random_intercepts[s] == pytest.approx(v, abs=1e-8)


def test_cubic_fit_is_well_conditioned_on_raw_times():
    rng = np.random.default_rng(5)
    subj = np.repeat(np.arange(30), 8).astype(str)
    t = np.tile(np.linspace(100, 130, 8), 30)
    truth = np.array([5.0, -0.1, 2e-3, -1e-5])
    y = build_design(TimeBasis.polynomial(3), t) @ truth + 0.01 * rng.standard_normal(len(t))
    fit = fit_lme(y, subj, t, TimeBasis.polynomial(3))
    np.testing.assert_allclose(mean_trajectory(fit, t[:8]),
                               build_design(TimeBasis.polynomial(3), t[:8]) @ truth, atol=0.02)


def test_changepoint_recovers_slope_change():
    subj = np.repeat(np.arange(10), 9).astype(str)
    t = np.tile(np.arange(-4.0, 5.0), 10)
    b = np.repeat(np.linspace(-1, 1, 10), 9)
    y = 1 + 0.5 * t - 1.5 * t * (t > 0) + b
    fit = fit_lme(y, subj, t, TimeBasis.changepoint(1, 0.0))
    np.testing.assert_allclose(fit.fixed_effects, [1, 0.5, -1.5], atol=1e-8)


# -- prediction -------------------------------------------------------------------


def test_noiseless_linear_interpolates():
    subj = np.repeat(np.arange(5), 3).astype(str)
    t = np.tile([0.0, 1.0, 2.0], 5)
    y = 0.5 + 2 * t
    fit = fit_lme(y, subj, t)
    np.testing.assert_allclose(predict_latent(fit, subj, t), y, atol=1e-8)


def test_unseen_subject_gets_mean_curve():
    y, subj, t = balanced()
    fit = fit_lme(y, subj, t)
    np.testing.assert_allclose(predict_latent(fit, ["new", "new"], [1.0, 2.0]),
                               mean_trajectory(fit, [1.0, 2.0]))


def test_prediction_arithmetic():
    fit = MixedModelFit(TimeBasis.linear(), np.array([0.0, 1.0]), {"7": 2.0}, 1.0, 1.0, 0.0, 1)
    assert predict_latent(fit, ["7"], [3.0])[0] == 5.0
    assert mean_trajectory(fit, [0.0])[0] == 0.0


def test_mean_curve_is_average_of_predictions():
    y, subj, t = balanced(seed=11)
    fit = fit_lme(y, subj, t)
    assert abs(sum(fit.random_intercepts.values())) < 1e-8
    grid = np.array([0.0, 2.5, 7.0])
    labels = sorted(fit.random_intercepts)
    avg = np.mean([predict_latent(fit, [s] * 3, grid) for s in labels], axis=0)
    np.testing.assert_allclose(mean_trajectory(fit, grid), avg, atol=1e-10)
    assert mean_trajectory(fit, [0.0])[0] == pytest.approx(fit.fixed_effects[0])


def test_zero_series_gives_zero_curve():
    _, subj, t = balanced()
    fit = fit_lme(np.zeros(len(t)), subj, t, TimeBasis.polynomial(2))
    np.testing.assert_array_equal(mean_trajectory(fit, [1.0, 4.0]), [0.0, 0.0])
