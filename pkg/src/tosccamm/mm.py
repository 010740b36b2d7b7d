"""Longitudinal sparse CCA: NIPALS with mixed-model latent trajectories.

Each half-step fits a random-intercept model to the current latent series on
its own view's time grid, predicts it on the other view's grid and uses that
prediction to update the other view's sparse weights. The weights are shared
by all measurements of a component; time enters only through the latent
models.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PairedStudy
from .lme import (
    MixedModelFit,
    TimeBasis,
    _scaling_map,
    build_design,
    fit_lme,
    mean_trajectory,
    predict_latent,
)
from .sparse_cca import (
    NULL_EPS,
    DeflationState,
    Regressor,
    ZeroVarianceError,
    canonical_correlation,
    deflate,
    initial_weights,
    scale_latent,
    soft_threshold_topk,
)


@dataclass(frozen=True)
class MmConfig:
    """Settings of a TOSCCA-MM run.

    ``p_x``/``q_y`` are the numbers of nonzero weights per component
    (``None`` keeps every feature). ``rho_grid="symmetric"`` averages the
    x-grid and y-grid correlations for the convergence check.
    """

    n_components: int = 1
    p_x: int | None = None
    q_y: int | None = None
    basis_x: TimeBasis = field(default_factory=TimeBasis.linear)
    basis_y: TimeBasis = field(default_factory=TimeBasis.linear)
    tol: float = 1e-6
    max_iter: int = 200
    seed: int = 0
    init: str = "svd"
    n_starts: int = 1
    solver: str = "auto"
    rho_grid: str = "x"
    variance_ratio: float | None = None

    def check(self, p: int, q: int) -> None:
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.p_x is not None and not 1 <= self.p_x <= p:
            raise ValueError(f"p_x={self.p_x} outside [1, {p}]")
        if self.q_y is not None and not 1 <= self.q_y <= q:
            raise ValueError(f"q_y={self.q_y} outside [1, {q}]")
        if self.rho_grid not in ("x", "symmetric"):
            raise ValueError(f"unknown rho_grid {self.rho_grid!r}")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["basis_x"] = str(self.basis_x)
        d["basis_y"] = str(self.basis_y)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MmConfig":
        d = dict(d)
        for key in ("basis_x", "basis_y"):
            if isinstance(d.get(key), str):
                d[key] = TimeBasis.parse(d[key])
        return cls(**d)


@dataclass
class ComponentResult:
    """One extracted component.

    ``w_x``/``w_y`` have unit norm, and the largest-magnitude entry of ``w_x``
    is positive. ``latent_x``/``latent_y`` are the scaled latent series on the
    rows of the (deflated) views; ``predicted_x_on_ty`` is the x-latent model
    evaluated on the y grid and ``predicted_y_on_tx`` the converse.
    """

    index: int
    w_x: np.ndarray
    w_y: np.ndarray
    rho: float
    iterations: int
    converged: bool
    null: bool
    fit_x: MixedModelFit | None
    fit_y: MixedModelFit | None
    latent_x: np.ndarray
    latent_y: np.ndarray
    predicted_x_on_ty: np.ndarray
    predicted_y_on_tx: np.ndarray
    history: list[float] = field(default_factory=list)

    def fitted_x(self, study: PairedStudy) -> np.ndarray:
        """x-latent model evaluated on the x grid (individual trajectories)."""
        if self.fit_x is None:
            return np.zeros(study.x.n_rows)
        return predict_latent(self.fit_x, study.x.subject_ids, study.x.times)

    def fitted_y(self, study: PairedStudy) -> np.ndarray:
        if self.fit_y is None:
            return np.zeros(study.y.n_rows)
        return predict_latent(self.fit_y, study.y.subject_ids, study.y.times)

    def mean_curve(self, view: str, grid) -> np.ndarray:
        fit = self.fit_x if view == "x" else self.fit_y
        if fit is None:
            return np.zeros(len(grid))
        return mean_trajectory(fit, grid)


def cor_mode(eta, gamma_pred) -> float:
    """Correlation of a latent series with the other view's prediction on its grid."""
    return canonical_correlation(eta, gamma_pred)


class _NullComponent(Exception):
    pass


class _Loop:
    """State shared by the iterations of one component."""

    def __init__(self, study: PairedStudy, cfg: MmConfig, state: DeflationState):
        self.cfg = cfg
        self.X, self.Y = state.x, state.y
        self.sx, self.tx = study.x.subject_ids, study.x.times
        self.sy, self.ty = study.y.subject_ids, study.y.times
        p, q = self.X.shape[1], self.Y.shape[1]
        self.px = p if cfg.p_x is None else cfg.p_x
        self.qy = q if cfg.q_y is None else cfg.q_y
        self.reg_x = Regressor(self.X, self.px, cfg.solver)
        self.reg_y = Regressor(self.Y, self.qy, cfg.solver)

    def fit_x(self, eta):
        return fit_lme(eta, self.sx, self.tx, self.cfg.basis_x, self.cfg.variance_ratio)

    def fit_y(self, gamma):
        return fit_lme(gamma, self.sy, self.ty, self.cfg.basis_y, self.cfg.variance_ratio)

    @staticmethod
    def _threshold(wt, k):
        if np.max(np.abs(wt)) < NULL_EPS:
            raise _NullComponent
        return soft_threshold_topk(wt, k)

    @staticmethod
    def _scale(v):
        try:
            return scale_latent(v)
        except ZeroVarianceError:
            raise _NullComponent from None

    def rho(self, eta, gamma_on_tx, gamma, fit_x_new):
        try:
            r = cor_mode(eta, gamma_on_tx)
            if self.cfg.rho_grid == "symmetric":
                eta_on_ty = predict_latent(fit_x_new, self.sy, self.ty)
                r = 0.5 * (r + canonical_correlation(gamma, eta_on_ty))
        except ZeroVarianceError:
            raise _NullComponent from None
        return r

    def run(self, w0):
        """Iterate from ``w0``; returns (w_x, w_y, rho, iterations, converged, history)."""
        cfg = self.cfg
        eta = self._scale(self.X @ w0)
        fx = self.fit_x(eta)
        rho_prev = 0.0
        history = []
        converged = False
        w_x = w0
        w_y = np.zeros(self.Y.shape[1])
        it = 0
        for it in range(1, cfg.max_iter + 1):
            eta_on_ty = predict_latent(fx, self.sy, self.ty)
            w_y = self._threshold(self.reg_y(eta_on_ty), self.qy)
            gamma = self._scale(self.Y @ w_y)
            fy = self.fit_y(gamma)
            gamma_on_tx = predict_latent(fy, self.sx, self.tx)
            w_x = self._threshold(self.reg_x(gamma_on_tx), self.px)
            eta = self._scale(self.X @ w_x)
            fx = self.fit_x(eta)
            rho = self.rho(eta, gamma_on_tx, gamma, fx)
            history.append(rho)
            if abs(rho - rho_prev) < cfg.tol:
                converged = True
                break
            rho_prev = rho
        return w_x, w_y, rho, it, converged, history


def trajectory_sketch(study: PairedStudy, state: DeflationState, cfg: MmConfig):
    """Per-feature mean trajectories of both views on the union time grid.

    Every column is regressed on its view's time basis by least squares and
    the fitted curves are evaluated at all distinct times of the study, which
    puts the two views on common rows.
    """
    grid = study.time_grid()
    out = []
    for M, times, basis in ((state.x, study.x.times, cfg.basis_x),
                            (state.y, study.y.times, cfg.basis_y)):
        T = _scaling_map(basis, times)
        coef, *_ = np.linalg.lstsq(build_design(basis, times) @ T, M, rcond=None)
        out.append(build_design(basis, grid) @ T @ coef)
    return out


def _starts(study: PairedStudy, state: DeflationState, cfg: MmConfig) -> list[np.ndarray]:
    out = []
    if cfg.init == "svd":
        A, B = trajectory_sketch(study, state, cfg)
        out.append(initial_weights(A, cfg.seed, "svd", Y=B))
    elif cfg.init != "random":
        raise ValueError(f"unknown init {cfg.init!r}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_starts)
    for ss in seeds[len(out):]:
        out.append(initial_weights(state.x, int(ss.generate_state(1)[0]), "random"))
    return out


def _null_result(index, loop: _Loop, it=0) -> ComponentResult:
    nx, ny = loop.X.shape[0], loop.Y.shape[0]
    return ComponentResult(
        index, np.zeros(loop.X.shape[1]), np.zeros(loop.Y.shape[1]), 0.0, it, True, True,
        None, None, np.zeros(nx), np.zeros(ny), np.zeros(ny), np.zeros(nx),
    )


def _unit(w):
    return w / np.linalg.norm(w)


def fit_component_mm(
    study: PairedStudy,
    cfg: MmConfig,
    state: DeflationState | None = None,
    w0=None,
    index: int = 1,
) -> ComponentResult:
    """Extract one TOSCCA-MM component from (possibly deflated) views.

    ``study`` supplies subjects and times of the rows; the matrices come from
    ``state`` (the study's values when ``state`` is None). The views are
    expected to be standardized.
    """
    cfg.check(study.x.n_features, study.y.n_features)
    state = state or DeflationState.start(study.x, study.y)
    loop = _Loop(study, cfg, state)
    starts = [np.asarray(w0, dtype=float)] if w0 is not None else _starts(study, state, cfg)

    best = None
    for w_start in starts:
        try:
            out = loop.run(w_start)
        except _NullComponent:
            continue
        if best is None or abs(out[2]) > abs(best[2]):
            best = out
    if best is None:
        return _null_result(index, loop)
    w_x, w_y, _, it, converged, history = best
    if not converged:
        warnings.warn(
            f"component {index} did not converge in {cfg.max_iter} iterations", stacklevel=2
        )

    w_x, w_y = _unit(w_x), _unit(w_y)
    j = int(np.argmax(np.abs(w_x)))
    if w_x[j] < 0:
        w_x, w_y = -w_x, -w_y
    try:
        eta = loop._scale(loop.X @ w_x)
        gamma = loop._scale(loop.Y @ w_y)
    except _NullComponent:
        return _null_result(index, loop, it)
    fx, fy = loop.fit_x(eta), loop.fit_y(gamma)
    eta_on_ty = predict_latent(fx, loop.sy, loop.ty)
    gamma_on_tx = predict_latent(fy, loop.sx, loop.tx)
    try:
        rho = loop.rho(eta, gamma_on_tx, gamma, fx)
    except _NullComponent:
        return _null_result(index, loop, it)
    return ComponentResult(
        index, w_x, w_y, rho, it, converged, False, fx, fy,
        eta, gamma, eta_on_ty, gamma_on_tx, history,
    )


def fit(study: PairedStudy, cfg: MmConfig) -> list[ComponentResult]:
    """Extract ``cfg.n_components`` components, deflating both views in between.

    Stops early (returning the components so far, null one included) when a
    component comes back null.
    """
    cfg.check(study.x.n_features, study.y.n_features)
    state = DeflationState.start(study.x, study.y)
    results = []
    for k in range(1, cfg.n_components + 1):
        res = fit_component_mm(study, cfg, state, index=k)
        results.append(res)
        if res.null:
            break
        if k < cfg.n_components:
            state = deflate(state, res.latent_x, res.latent_y)
    return results
