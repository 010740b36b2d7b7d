import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tosccamm.sparse_cca import (
    DeflationState,
    ZeroVarianceError,
    canonical_correlation,
    deflate,
    initial_weights,
    nipals_pair,
    project_out,
    scale_latent,
    soft_threshold_topk,
)


def cca_oracle(X, Y):
    """First canonical pair from the generalized symmetric eigenproblem."""
    X = X - X.mean(0)
    Y = Y - Y.mean(0)
    Sxx, Syy, Sxy = X.T @ X, Y.T @ Y, X.T @ Y
    vals, vecs = scipy.linalg.eigh(Sxy @ np.linalg.solve(Syy, Sxy.T), Sxx)
    a = vecs[:, -1]
    b = np.linalg.solve(Syy, Sxy.T @ a)
    return np.sqrt(vals[-1]), a / np.linalg.norm(a), b / np.linalg.norm(b)


def correlated_views(n, p, q, seed, strength=1.0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    X = rng.standard_normal((n, p)) + strength * np.outer(z, rng.standard_normal(p))
    Y = rng.standard_normal((n, q)) + strength * np.outer(z, rng.standard_normal(q))
    return X - X.mean(0), Y - Y.mean(0)


# -- thresholding -----------------------------------------------------------


def test_threshold_examples():
    np.testing.assert_array_equal(soft_threshold_topk([3, -1, 0.5, 2], 2), [2, 0, 0, 1])
    w = np.array([0.3, -2.0, 1.5])
    np.testing.assert_array_equal(soft_threshold_topk(w, 3), w)


def test_threshold_tie_keeps_lowest_index():
    # naive value-thresholding at the cut would zero both tied entries
    np.testing.assert_array_equal(soft_threshold_topk([2, 2, 1], 1), [1, 0, 0])
    np.testing.assert_array_equal(soft_threshold_topk([1, -3, 3, 3], 2), [0, -2, 2, 0])
    np.testing.assert_array_equal(soft_threshold_topk([5, 5, 5], 2), [5, 5, 0])


def test_threshold_rejects_bad_k():
    with pytest.raises(ValueError):
        soft_threshold_topk([1.0, 2.0], 0)
    with pytest.raises(ValueError):
        soft_threshold_topk([1.0, 2.0], 3)


def _tie_oracle(w, k):
    """Enumerate: keep the k largest |w| (stable, lowest index first)."""
    a = np.abs(w)
    order = sorted(range(len(w)), key=lambda j: (-a[j], j))
    keep = order[:k]
    rest = [a[j] for j in order[k:] if a[j] < a[order[k - 1]]]
    thr = max(rest) if len(rest) else 0.0
    if k < len(w) and a[order[k]] < a[order[k - 1]]:
        thr = a[order[k]]
    out = np.zeros(len(w))
    out[keep] = np.sign(w[keep]) * (a[keep] - thr)
    return out


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=8), st.data())
def test_threshold_matches_enumeration_on_ties(ints, data):
    w = np.array(ints, dtype=float)
    k = data.draw(st.integers(1, len(w)))
    out = soft_threshold_topk(w, k)
    np.testing.assert_array_equal(out, _tie_oracle(w, k))
    assert np.count_nonzero(out) <= k
    np.testing.assert_array_equal(out, soft_threshold_topk(w.copy(), k))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False)


@settings(max_examples=300, deadline=None)
@given(arrays(float, st.integers(1, 30), elements=finite, unique=True), st.data())
def test_threshold_cardinality_sign_and_rank(w, data):
    a = np.abs(w)
    if len(np.unique(a)) < len(a):
        w = w + np.arange(len(w)) * 1e-3 * np.sign(w + 0.5)
        a = np.abs(w)
    if len(np.unique(a)) < len(a):
        return
    k = data.draw(st.integers(1, len(w)))
    out = soft_threshold_topk(w, k)
    nz = np.flatnonzero(out)
    if k == len(w):
        np.testing.assert_array_equal(out, w)
        return
    assert len(nz) == k
    assert np.all(np.sign(out[nz]) == np.sign(w[nz]))
    # survivors are the k largest and keep their ranking
    assert set(nz) == set(np.argsort(-a)[:k])
    assert np.all(np.diff(np.abs(out[nz])[np.argsort(-a[nz])]) <= 0)


# -- latent scaling and correlation ----------------------------------------


def test_scale_latent_divides_by_sample_sd():
    v = np.array([1.0, 2.0, 3.0, 6.0])
    out = scale_latent(v)
    np.testing.assert_allclose(out, v / np.std(v, ddof=1))
    np.testing.assert_allclose(out.std(ddof=1), 1.0)
    with pytest.raises(ZeroVarianceError):
        scale_latent(np.ones(5))


def test_canonical_correlation_cases():
    rng = np.random.default_rng(3)
    a = rng.standard_normal(50)
    assert canonical_correlation(a, a) == pytest.approx(1.0, abs=1e-15)
    assert canonical_correlation(a, -a) == pytest.approx(-1.0, abs=1e-15)
    u = np.array([1.0, -1.0, 1.0, -1.0])
    v = np.array([1.0, 1.0, -1.0, -1.0])
    assert abs(canonical_correlation(u, v)) < 1e-12
    b = rng.standard_normal(50)
    n = len(a)
    textbook = (n * np.sum(a * b) - a.sum() * b.sum()) / np.sqrt(
        (n * np.sum(a * a) - a.sum() ** 2) * (n * np.sum(b * b) - b.sum() ** 2)
    )
    assert canonical_correlation(a, b) == pytest.approx(textbook, abs=1e-12)
    with pytest.raises(ZeroVarianceError):
        canonical_correlation(a, np.full(50, 2.0))


# -- nipals_pair ------------------------------------------------------------


def test_nipals_matches_cca_oracle():
    X, Y = correlated_views(200, 5, 4, seed=11, strength=0.7)
    rho_o, a, b = cca_oracle(X, Y)
    res = nipals_pair(X, Y, tol=1e-14, max_iter=5000)
    assert res.converged
    assert abs(res.rho - rho_o) < 1e-6
    assert abs(res.w_x @ a) > 1 - 1e-6
    assert abs(res.w_y @ b) > 1 - 1e-6


def test_nipals_identical_views():
    X, _ = correlated_views(60, 4, 1, seed=2)
    res = nipals_pair(X, X.copy())
    assert res.rho == pytest.approx(1.0, abs=1e-8)


@pytest.mark.filterwarnings("ignore:NIPALS did not converge")
def test_nipals_noise_below_permutation_null():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((80, 6))
    Y = rng.standard_normal((80, 5))
    X -= X.mean(0)
    Y -= Y.mean(0)
    rho = nipals_pair(X, Y, p_x=2, q_y=2).rho
    null = [nipals_pair(X, Y[rng.permutation(80)], p_x=2, q_y=2).rho for _ in range(200)]
    assert abs(rho) < np.quantile(np.abs(null), 0.95)


def test_nipals_sparsity_and_orientation():
    X, Y = correlated_views(100, 30, 20, seed=8)
    res = nipals_pair(X, Y, p_x=5, q_y=3)
    assert np.count_nonzero(res.w_x) == 5
    assert np.count_nonzero(res.w_y) == 3
    assert np.linalg.norm(res.w_x) == pytest.approx(1.0)
    assert res.w_x[np.argmax(np.abs(res.w_x))] > 0


def test_nipals_rho_is_monotone_without_sparsity():
    for seed in range(10):
        X, Y = correlated_views(50, 6, 5, seed=seed, strength=0.4)
        res = nipals_pair(X, Y, solver="lstsq", w0=initial_weights(X, seed, "random"))
        assert np.all(np.diff(res.history) >= -1e-10)


def test_nipals_null_component_on_zero_view():
    X, _ = correlated_views(30, 4, 3, seed=1)
    res = nipals_pair(X, np.zeros((30, 3)))
    assert res.null
    assert not res.w_x.any() and not res.w_y.any()


def test_selection_stable_under_column_scaling():
    X, Y = correlated_views(150, 12, 8, seed=21, strength=1.5)
    base = nipals_pair(X, Y, p_x=4, q_y=3)
    sel = np.flatnonzero(base.w_x)
    j = sel[0]
    Xs = X.copy()
    Xs[:, j] *= 1.5
    scaled = nipals_pair(Xs, Y, p_x=4, q_y=3)
    assert scaled.w_x[j] != 0
    assert set(np.flatnonzero(scaled.w_x)) == set(sel)


def test_views_must_share_rows():
    with pytest.raises(ValueError):
        nipals_pair(np.ones((5, 2)), np.ones((4, 2)))


# -- deflation --------------------------------------------------------------


def test_deflation_projection_identities():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 5))
    Y = rng.standard_normal((20, 4))
    eta = X @ rng.standard_normal(5)
    gamma = Y @ rng.standard_normal(4)
    st1 = deflate(DeflationState.start(X, Y), eta, gamma)
    np.testing.assert_allclose(eta @ st1.x, 0.0, atol=1e-8)
    np.testing.assert_allclose(gamma @ st1.y, 0.0, atol=1e-8)
    st2 = deflate(st1, eta, gamma)
    np.testing.assert_allclose(st2.x, st1.x, atol=1e-10)
    sv_before = np.linalg.svd(X, compute_uv=False)
    sv_after = np.linalg.svd(st1.x, compute_uv=False)
    tol = 1e-10 * sv_before[0]
    assert np.sum(sv_before > tol) == 5
    assert np.sum(sv_after > tol) == 4
    assert len(st2.etas) == 2


def test_project_out_rejects_zero_vector():
    with pytest.raises(ZeroVarianceError):
        project_out(np.ones((3, 2)), np.zeros(3))
