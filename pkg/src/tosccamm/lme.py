"""Random-intercept linear mixed models for latent series.

The model for subject ``i`` at time ``t`` is

    y_it = d(t) @ beta + b_i + e_it,   b_i ~ N(0, s2_b),  e_it ~ N(0, s2_e)

where ``d(t)`` is the fixed-effects design row produced by a
:class:`TimeBasis`. For a fixed ratio ``lam = s2_b / s2_e`` the GLS estimate
of ``beta`` and the ML residual variance are closed form, so the likelihood is
profiled down to ``lam`` and maximised over ``log(lam)`` on a bounded interval.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import comb

LOG_RATIO_BOUNDS = (-14.0, 7.0)
LOG_RATIO_XTOL = 1e-10
_COARSE_GRID = 43


class DesignError(ValueError):
    """Fixed-effects design is not full column rank on the observed times."""


@dataclass(frozen=True)
class TimeBasis:
    """Fixed-effects time basis.

    ``kind`` is ``"polynomial"`` (``linear`` is degree 1) or ``"changepoint"``,
    which appends the slope-change column ``t * 1{t > knot}``.
    """

    kind: str = "polynomial"
    degree: int = 1
    knot: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "changepoint"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")

    @classmethod
    def linear(cls) -> "TimeBasis":
        return cls("polynomial", 1)

    @classmethod
    def polynomial(cls, degree: int) -> "TimeBasis":
        return cls("polynomial", degree)

    @classmethod
    def changepoint(cls, degree: int, knot: float = 0.0) -> "TimeBasis":
        return cls("changepoint", degree, knot)

    @classmethod
    def parse(cls, spec: str) -> "TimeBasis":
        """Parse ``linear``, ``poly:D`` or ``changepoint:D[:KNOT]``."""
        spec = spec.strip().lower()
        if spec == "linear":
            return cls.linear()
        m = re.fullmatch(r"poly(?:nomial)?:(\d+)", spec)
        if m:
            return cls.polynomial(int(m.group(1)))
        m = re.fullmatch(r"changepoint:(\d+)(?::([-+0-9.eE]+))?", spec)
        if m:
            return cls.changepoint(int(m.group(1)), float(m.group(2) or 0.0))
        raise ValueError(f"cannot parse basis {spec!r}; use linear, poly:D or changepoint:D:S")

    def __str__(self):
        if self.kind == "changepoint":
            return f"changepoint:{self.degree}:{self.knot!r}"
        return "linear" if self.degree == 1 else f"poly:{self.degree}"

    @property
    def n_columns(self) -> int:
        return self.degree + 1 + (self.kind == "changepoint")


def build_design(basis: TimeBasis, times) -> np.ndarray:
    """Design matrix with columns ``[1, t, ..., t^d, (t * 1{t > knot})]``."""
    t = np.asarray(times, dtype=float).ravel()
    cols = [t**r for r in range(basis.degree + 1)]
    if basis.kind == "changepoint":
        cols.append(np.where(t > basis.knot, t, 0.0))
    return np.column_stack(cols)


def _scaling_map(basis: TimeBasis, times: np.ndarray) -> np.ndarray:
    """Matrix T with ``build_design(t) @ T`` equal to the design on rescaled times.

    Monomials of ``u = (t - c) / h`` (``u`` in [-1, 1]) are expanded in raw
    monomials; the change-point column is only divided by ``h``.
    """
    lo, hi = float(np.min(times)), float(np.max(times))
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    if h <= 0:
        h = max(abs(c), 1.0)
    d = basis.degree
    T = np.zeros((basis.n_columns, basis.n_columns))
    for r in range(d + 1):
        for j in range(r + 1):
            T[j, r] = comb(r, j, exact=True) * (-c) ** (r - j) / h**r
    if basis.kind == "changepoint":
        T[-1, -1] = 1.0 / h
    return T


@dataclass(frozen=True)
class MixedModelFit:
    """Profiled-ML fit of a random-intercept model.

    ``fixed_effects`` are on the raw time scale, ordered like
    :func:`build_design` columns.
    """

    basis: TimeBasis
    fixed_effects: np.ndarray
    random_intercepts: Mapping[str, float]
    var_random: float
    var_resid: float
    loglik: float
    n_obs: int

    @property
    def ratio(self) -> float:
        return self.var_random / self.var_resid if self.var_resid > 0 else math.inf


class _Profile:
    """Sufficient statistics for the profiled likelihood of one series."""

    def __init__(self, y, codes, n_groups, D):
        self.y = y
        self.codes = codes
        self.D = D
        self.N = y.shape[0]
        self.m = np.bincount(codes, minlength=n_groups).astype(float)
        self.S = np.zeros((n_groups, D.shape[1]))
        np.add.at(self.S, codes, D)
        self.sy = np.bincount(codes, weights=y, minlength=n_groups)
        self.DtD = D.T @ D
        self.Dty = D.T @ y
        self.yty = float(y @ y)

    def solve(self, lam: float):
        c = lam / (1.0 + lam * self.m)
        A = self.DtD - self.S.T @ (c[:, None] * self.S)
        b = self.Dty - self.S.T @ (c * self.sy)
        beta = np.linalg.solve(A, b)
        r = self.y - self.D @ beta
        rsum = np.bincount(self.codes, weights=r, minlength=self.m.shape[0])
        rss = float(r @ r) - float(c @ rsum**2)
        return beta, rsum, max(rss, 0.0)

    def score(self, lam: float) -> float:
        """d loglik / d log(lam), using the envelope theorem for beta."""
        _, rsum, rss = self.solve(lam)
        if rss <= 0:
            return 0.0
        g = 1.0 / (1.0 + lam * self.m)
        drss = -float(np.sum((g * rsum) ** 2))
        return lam * (-0.5 * self.N * drss / rss - 0.5 * float(np.sum(self.m * g)))

    def loglik(self, lam: float) -> float:
        _, _, rss = self.solve(lam)
        return self._loglik(lam, rss)

    def _loglik(self, lam, rss):
        N = self.N
        if rss <= 0:
            return math.inf
        s2 = rss / N
        return -0.5 * N * (math.log(2 * math.pi) + math.log(s2) + 1.0) - 0.5 * float(
            np.sum(np.log1p(lam * self.m))
        )


def _encode(subjects):
    labels, codes = np.unique(np.asarray([str(s) for s in subjects], dtype=object),
                              return_inverse=True)
    return list(labels), codes.ravel()


def _polish(prof: _Profile, g: float) -> float:
    """Refine an interior maximum by bracketing the root of the score.

    The bounded scalar search stops at a tolerance relative to |log lam|,
    too loose for fits that must agree to 1e-8.
    """
    lo, hi = LOG_RATIO_BOUNDS
    f = lambda u: prof.score(math.exp(u))  # noqa: E731
    step = 1e-6
    while step < 1.0:
        a, b = max(g - step, lo), min(g + step, hi)
        fa, fb = f(a), f(b)
        if fa > 0 > fb:
            root = brentq(f, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps)
            # the likelihood is flat to rounding here; only guard against a wrong root
            ref = prof.loglik(math.exp(g))
            return root if prof.loglik(math.exp(root)) >= ref - 1e-10 * max(1.0, abs(ref)) else g
        step *= 10
    return g


def _maximize_ratio(prof: _Profile) -> float:
    lo, hi = LOG_RATIO_BOUNDS
    grid = np.linspace(lo, hi, _COARSE_GRID)
    vals = np.array([prof.loglik(math.exp(g)) for g in grid])
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(
        lambda g: -prof.loglik(math.exp(g)),
        bounds=(a, b),
        method="bounded",
        options={"xatol": LOG_RATIO_XTOL, "maxiter": 500},
    )
    best_g, best_v = (res.x, -res.fun) if -res.fun >= vals[k] else (grid[k], vals[k])
    best_g = _polish(prof, best_g)
    best_v = prof.loglik(math.exp(best_g))
    # boundary: zero between-subject variance
    if prof.loglik(0.0) >= best_v:
        return 0.0
    return math.exp(best_g)


def fit_lme(
    series,
    subjects,
    times,
    basis: TimeBasis | None = None,
    variance_ratio: float | None = None,
) -> MixedModelFit:
    """Fit a random-intercept mixed model by profiled maximum likelihood.

    Parameters
    ----------
    series : (N,) array
        Latent values, one per measurement row.
    subjects, times : (N,) arrays
        Subject label and time of every row.
    basis : TimeBasis
        Fixed-effects time design (linear by default).
    variance_ratio : float, optional
        Hold ``s2_b / s2_e`` at this value instead of estimating it.

    Returns
    -------
    MixedModelFit
    """
    basis = basis or TimeBasis.linear()
    y = np.asarray(series, dtype=float).ravel()
    t = np.asarray(times, dtype=float).ravel()
    labels, codes = _encode(subjects)
    if not (y.shape[0] == t.shape[0] == codes.shape[0]):
        raise ValueError("series, subjects and times must have equal length")
    if len(labels) < 2:
        raise ValueError("need at least two subjects")

    T = _scaling_map(basis, t)
    Ds = build_design(basis, t) @ T
    if np.linalg.matrix_rank(Ds) < Ds.shape[1]:
        raise DesignError(
            f"design for basis {basis} is rank deficient on {len(np.unique(t))} distinct time(s)"
        )
    prof = _Profile(y, codes, len(labels), Ds)

    if variance_ratio is not None:
        if variance_ratio < 0:
            raise ValueError("variance_ratio must be >= 0")
        lam = float(variance_ratio)
    elif prof.solve(0.0)[2] <= 1e-24 * max(prof.yty, 1.0):
        lam = 0.0  # exact fit by the fixed effects alone
    elif prof.m.max() <= 1:
        warnings.warn("all subjects have a single observation; random-intercept variance set to 0",
                      stacklevel=2)
        lam = 0.0
    else:
        lam = _maximize_ratio(prof)

    beta_s, rsum, rss = prof.solve(lam)
    s2e = rss / prof.N
    blup = lam / (1.0 + lam * prof.m) * rsum  # = lam*m/(1+lam*m) * mean residual
    return MixedModelFit(
        basis=basis,
        fixed_effects=T @ beta_s,
        random_intercepts={lab: float(v) for lab, v in zip(labels, blup)},
        var_random=lam * s2e,
        var_resid=s2e,
        loglik=prof._loglik(lam, rss),
        n_obs=prof.N,
    )


def profiled_loglik(series, subjects, times, basis: TimeBasis, ratio: float) -> float:
    """Profiled ML log-likelihood at a given variance ratio."""
    t = np.asarray(times, dtype=float).ravel()
    labels, codes = _encode(subjects)
    Ds = build_design(basis, t) @ _scaling_map(basis, t)
    prof = _Profile(np.asarray(series, dtype=float).ravel(), codes, len(labels), Ds)
    return prof.loglik(ratio)


def predict_latent(fit: MixedModelFit, subjects, times) -> np.ndarray:
    """Fixed-effects curve plus subject BLUP (0 for subjects not in the fit)."""
    D = build_design(fit.basis, times)
    b = np.array([fit.random_intercepts.get(str(s), 0.0) for s in subjects], dtype=float)
    return D @ fit.fixed_effects + b


def mean_trajectory(fit: MixedModelFit, grid) -> np.ndarray:
    """Population curve ``d(t) @ beta`` over ``grid``."""
    return build_design(fit.basis, grid) @ fit.fixed_effects
