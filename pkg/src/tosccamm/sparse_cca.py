"""Sparse CCA building blocks: top-k soft-thresholding, the NIPALS pair
iteration, latent scaling, correlation and projection deflation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class ZeroVarianceError(ValueError):
    """A latent vector has (numerically) zero variance."""


NULL_EPS = 1e-12


def _as_matrix(view) -> np.ndarray:
    return np.asarray(getattr(view, "values", view), dtype=float)


def soft_threshold_topk(w, k: int) -> np.ndarray:
    """Soft-threshold ``w`` so that ``k`` coefficients survive.

    The threshold is the (k+1)-th largest magnitude (0 when ``k == len(w)``)
    and survivors are shrunk towards zero by it. When several entries tie at
    the cut the lowest-index ones are kept until ``k`` survive, and the
    threshold falls to the next distinct magnitude below the tied value so the
    kept ties stay nonzero.

    Examples
    --------
    >>> soft_threshold_topk([3, -1, 0.5, 2], 2)
    array([2., 0., 0., 1.])
    >>> soft_threshold_topk([2, 2, 1], 1)
    array([1., 0., 0.])
    """
    w = np.asarray(w, dtype=float).ravel()
    n = w.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    a = np.abs(w)
    if k == n:
        return w.copy()
    desc = np.sort(a)[::-1]
    cut = desc[k]
    if desc[k - 1] > cut:
        return np.sign(w) * np.maximum(a - cut, 0.0) + 0.0  # + 0.0 turns -0.0 into 0.0
    # tie at the cut: keep everything above it plus the lowest-index ties
    above = a > cut
    tied = np.flatnonzero(a == cut)[: k - int(above.sum())]
    below = a[a < cut]
    thr = below.max() if below.size else 0.0
    keep = above.copy()
    keep[tied] = True
    return np.where(keep, np.sign(w) * (a - thr), 0.0) + 0.0


def scale_latent(v) -> np.ndarray:
    """Divide by the sample sd over stacked rows; the mean is left in place."""
    v = np.asarray(v, dtype=float)
    sd = v.std(ddof=1) if v.shape[0] > 1 else 0.0
    if not sd > NULL_EPS:
        raise ZeroVarianceError("latent variable has zero variance")
    return v / sd


def canonical_correlation(a, b) -> float:
    """Pearson correlation of two latent series."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape or a.shape[0] < 2:
        raise ValueError("need two series of equal length >= 2")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na <= NULL_EPS * np.sqrt(a.shape[0]) or nb <= NULL_EPS * np.sqrt(b.shape[0]):
        raise ZeroVarianceError("zero variance")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


class Regressor:
    """Weight update ``w~ = R(M, latent)`` for one view.

    ``"crossprod"`` uses ``M.T @ latent``; ``"lstsq"`` uses the least-squares
    coefficients ``(M.T M)^-1 M.T latent`` (through a thin QR). ``"auto"``
    takes least squares only when the view is not thresholded and has full
    column rank with more rows than columns.
    """

    def __init__(self, M: np.ndarray, k: int, solver: str = "auto"):
        if solver not in ("auto", "lstsq", "crossprod"):
            raise ValueError(f"unknown solver {solver!r}")
        self.M = M
        if solver == "auto":
            n, p = M.shape
            solver = "crossprod"
            if k == p and n > p and np.linalg.matrix_rank(M) == p:
                solver = "lstsq"
        self.solver = solver
        if solver == "lstsq":
            self.Q, self.R = np.linalg.qr(M)

    def __call__(self, latent: np.ndarray) -> np.ndarray:
        if self.solver == "lstsq":
            return np.linalg.solve(self.R, self.Q.T @ latent)
        return self.M.T @ latent


def leading_cross_direction(A: np.ndarray, B: np.ndarray, seed: int = 0, rank: int = 10,
                            power: int = 2) -> np.ndarray:
    """Leading left singular vector of ``A.T @ B`` by a randomized range sketch.

    ``A`` and ``B`` share their rows; ``A.T @ B`` is never formed.
    """
    rng = np.random.default_rng(seed)
    r = min(rank, A.shape[1], B.shape[1])
    Z = A.T @ (B @ rng.standard_normal((B.shape[1], r)))
    Q, _ = np.linalg.qr(Z)
    for _ in range(power):
        Q, _ = np.linalg.qr(A.T @ (B @ (B.T @ (A @ Q))))
    small = (B.T @ (A @ Q)).T  # r x q, equals Q.T A.T B
    u, _, _ = np.linalg.svd(small, full_matrices=False)
    w = Q @ u[:, 0]
    j = int(np.argmax(np.abs(w)))
    return w if w[j] >= 0 else -w


def initial_weights(X: np.ndarray, seed: int = 0, method: str = "svd", Y=None) -> np.ndarray:
    """Starting x-weights.

    ``"svd"`` returns the leading left singular vector of ``X.T @ Y`` (of
    ``X.T @ X`` when ``Y`` is None) from a seeded randomized sketch;
    ``"random"`` returns a seeded random unit vector.
    """
    if method == "random":
        w = np.random.default_rng(seed).standard_normal(X.shape[1])
        return w / np.linalg.norm(w)
    if method != "svd":
        raise ValueError(f"unknown init {method!r}")
    return leading_cross_direction(X, X if Y is None else Y, seed)


@dataclass
class NipalsResult:
    w_x: np.ndarray
    w_y: np.ndarray
    rho: float
    iterations: int
    converged: bool
    eta: np.ndarray
    gamma: np.ndarray
    history: list[float] = field(default_factory=list)
    null: bool = False


def _unit(w):
    n = np.linalg.norm(w)
    return w / n if n > 0 else w


def nipals_pair(
    x,
    y,
    p_x: int | None = None,
    q_y: int | None = None,
    w0=None,
    tol: float = 1e-6,
    max_iter: int = 200,
    solver: str = "auto",
    seed: int = 0,
) -> NipalsResult:
    """Sparse CCA of two views whose rows coincide (one latent pair).

    Alternates ``w_y <- thr(R_y(eta))``, ``gamma <- scale(Y w_y)``,
    ``w_x <- thr(R_x(gamma))``, ``eta <- scale(X w_x)`` and stops once the
    change in ``cor(eta, gamma)`` drops below ``tol``. ``p_x``/``q_y`` are the
    numbers of nonzero weights kept (all by default).
    """
    X, Y = _as_matrix(x), _as_matrix(y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("views must have the same rows in non-longitudinal mode")
    p, q = X.shape[1], Y.shape[1]
    p_x = p if p_x is None else p_x
    q_y = q if q_y is None else q_y
    reg_x, reg_y = Regressor(X, p_x, solver), Regressor(Y, q_y, solver)

    w_x = initial_weights(X, seed, Y=Y) if w0 is None else np.asarray(w0, dtype=float)
    try:
        eta = scale_latent(X @ w_x)
    except ZeroVarianceError:
        return _null_pair(p, q, X.shape[0])
    rho_prev, rho = 0.0, 0.0
    history = []
    converged = False
    it = 0
    w_y = np.zeros(q)
    for it in range(1, max_iter + 1):
        wt_y = reg_y(eta)
        if np.max(np.abs(wt_y)) < NULL_EPS:
            return _null_pair(p, q, X.shape[0], it)
        w_y = soft_threshold_topk(wt_y, q_y)
        gamma_raw = Y @ w_y
        try:
            gamma = scale_latent(gamma_raw)
        except ZeroVarianceError:
            return _null_pair(p, q, X.shape[0], it)
        wt_x = reg_x(gamma)
        if np.max(np.abs(wt_x)) < NULL_EPS:
            return _null_pair(p, q, X.shape[0], it)
        w_x = soft_threshold_topk(wt_x, p_x)
        try:
            eta = scale_latent(X @ w_x)
        except ZeroVarianceError:
            return _null_pair(p, q, X.shape[0], it)
        rho = canonical_correlation(eta, gamma)
        history.append(rho)
        if abs(rho - rho_prev) < tol:
            converged = True
            break
        rho_prev = rho
    if not converged:
        warnings.warn(f"NIPALS did not converge in {max_iter} iterations", stacklevel=2)
    w_x, w_y = _unit(w_x), _unit(w_y)
    j = int(np.argmax(np.abs(w_x)))
    if w_x[j] < 0:
        w_x, w_y, eta, gamma = -w_x, -w_y, -eta, -gamma
    return NipalsResult(w_x, w_y, rho, it, converged, eta, gamma, history)


def _null_pair(p, q, n, it=0):
    return NipalsResult(np.zeros(p), np.zeros(q), 0.0, it, True, np.zeros(n), np.zeros(n), [], True)


@dataclass
class DeflationState:
    """Residualized views and the latent vectors already removed from them."""

    x: np.ndarray
    y: np.ndarray
    etas: list[np.ndarray] = field(default_factory=list)
    gammas: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def start(cls, x, y) -> "DeflationState":
        return cls(_as_matrix(x).copy(), _as_matrix(y).copy())


def project_out(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M - v (v'v)^-1 v' M``."""
    vv = float(v @ v)
    if not vv > NULL_EPS:
        raise ZeroVarianceError("cannot deflate on a zero-norm latent vector")
    return M - np.outer(v, (v @ M) / vv)


def deflate(state: DeflationState, eta, gamma) -> DeflationState:
    """Residualize each view on its own latent vector."""
    eta = np.asarray(eta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    return DeflationState(
        project_out(state.x, eta),
        project_out(state.y, gamma),
        [*state.etas, eta],
        [*state.gammas, gamma],
    )
