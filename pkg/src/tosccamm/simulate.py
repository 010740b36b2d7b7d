"""Synthetic paired longitudinal studies with known sparse weights and
latent paths, and recovery scores against that truth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LongView, PairedStudy

# theta2 = -0.78 makes the two deterministic paths (nearly) uncorrelated on
# the 1..10 grid, which orthogonal components need in order to recover both.
DEFAULT_THETA = (0.3, 1.0, -0.78)


def ar1_covariance(n: int, phi: float) -> np.ndarray:
    """``phi ** |a - b|``: unit diagonal, geometric decay off the diagonal."""
    idx = np.arange(n)
    return phi ** np.abs(idx[:, None] - idx[None, :])


def deterministic_paths(t, theta=DEFAULT_THETA, sine: str = "power") -> np.ndarray:
    """Noise-free latent paths, shape (len(t), 2).

    Component 1 is ``theta0 t + sin(theta1 t)^t`` and component 2 is
    ``theta2 t + (1 + t / max t)^3``. With ``sine="power"`` the power is taken
    of ``|sin|`` and the sign of ``sin`` is put back (``0^0 = 1``);
    ``sine="argument"`` reads the term as ``sin(theta1 t * t)``.
    """
    t = np.asarray(t, dtype=float)
    th0, th1, th2 = theta
    if sine == "power":
        s = np.sin(th1 * t)
        wiggle = np.where(s < 0, -1.0, 1.0) * np.abs(s) ** t
    elif sine == "argument":
        wiggle = np.sin(th1 * t * t)
    else:
        raise ValueError(f"unknown sine reading {sine!r}")
    tmax = np.max(t)
    z1 = th0 * t + wiggle
    z2 = th2 * t + (1.0 + t / tmax) ** 3 if tmax != 0 else th2 * t + 1.0
    return np.column_stack([z1, z2])


def gen_latent_paths(
    t, n: int, theta=DEFAULT_THETA, noise_sd: float = 0.25, seed: int = 0, sine: str = "power"
) -> np.ndarray:
    """Latent values per subject, time and component: shape (n, len(t), 2)."""
    det = deterministic_paths(t, theta, sine)
    rng = np.random.default_rng(seed)
    return det[None, :, :] + noise_sd * rng.standard_normal((n, det.shape[0], det.shape[1]))


def sparse_weights(dim: int, sizes, rng, low=0.5, high=1.0) -> np.ndarray:
    """(dim, K) weights with disjoint random supports of the given sizes."""
    if sum(sizes) > dim:
        raise ValueError(f"supports of total size {sum(sizes)} do not fit in {dim} features")
    W = np.zeros((dim, len(sizes)))
    idx = rng.permutation(dim)
    start = 0
    for k, s in enumerate(sizes):
        sel = np.sort(idx[start:start + s])
        W[sel, k] = rng.uniform(low, high, s) * rng.choice([-1.0, 1.0], s)
        start += s
    return W


@dataclass
class SimulationTruth:
    """Ground truth of a simulated study.

    ``z`` has shape (n, len(t), K); ``masks_x``/``masks_y`` (n, len(t)) are
    True where a measurement was removed.
    """

    t: np.ndarray
    w_x: np.ndarray
    w_y: np.ndarray
    z: np.ndarray
    psi_x: np.ndarray
    psi_y: np.ndarray
    masks_x: np.ndarray
    masks_y: np.ndarray
    theta: tuple = DEFAULT_THETA
    noise_sd: float = 0.25
    sine: str = "power"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def paths(self, grid=None) -> np.ndarray:
        """Deterministic paths on ``grid`` (default: the simulation grid)."""
        if grid is None:
            return deterministic_paths(self.t, self.theta, self.sine)
        # component 2 is normalised by max(t) of the simulation grid
        g = np.asarray(grid, dtype=float)
        full = deterministic_paths(np.r_[self.t, g], self.theta, self.sine)
        return full[len(self.t):]

    def component(self, k: int) -> "TrueComponent":
        """Component ``k`` (1-based) of the truth, shaped like an estimate."""
        return TrueComponent(self, k)

    def to_json(self) -> dict:
        return {
            "t": self.t.tolist(),
            "theta": list(self.theta),
            "noise_sd": self.noise_sd,
            "sine": self.sine,
            "seed": self.seed,
            "params": self.params,
            "w_x": {str(j + 1): self.w_x[j].tolist() for j in np.flatnonzero(self.w_x.any(1))},
            "w_y": {str(j + 1): self.w_y[j].tolist() for j in np.flatnonzero(self.w_y.any(1))},
            "psi": {"family": "ar1", "phi_x": self.params.get("phi_x"),
                    "phi_y": self.params.get("phi_y")},
            "removed_x": [[int(i + 1), float(self.t[k])] for i, k in zip(*np.nonzero(self.masks_x))],
            "removed_y": [[int(i + 1), float(self.t[k])] for i, k in zip(*np.nonzero(self.masks_y))],
        }


@dataclass
class TrueComponent:
    truth: SimulationTruth
    k: int

    @property
    def w_x(self):
        return self.truth.w_x[:, self.k - 1]

    @property
    def w_y(self):
        return self.truth.w_y[:, self.k - 1]

    def mean_curve(self, view, grid):
        return self.truth.paths(grid)[:, self.k - 1]


def _mask(n, m, frac, rng) -> np.ndarray:
    total = n * m
    k = int(round(frac * total))
    mask = np.zeros(total, dtype=bool)
    mask[rng.choice(total, size=k, replace=False)] = True
    return mask.reshape(n, m)


def _view(z, W, psi, noise_scale, keep, t, rng) -> LongView:
    n, m, _ = z.shape
    p = W.shape[0]
    mean = z @ W.T  # (n, m, p)
    if noise_scale > 0:
        L = np.linalg.cholesky(psi)
        noise = np.einsum("ab,nbp->nap", L, rng.standard_normal((n, m, p)))
        mean = mean + noise_scale * noise
    sids = np.repeat(np.arange(1, n + 1), m).reshape(n, m)
    times = np.broadcast_to(t, (n, m))
    return LongView(
        mean[keep], sids[keep].astype(str), times[keep], [f"f{j + 1}" for j in range(p)]
    )


def gen_views(
    truth: SimulationTruth, seed: int = 0, noise_scale: float = 1.0
) -> PairedStudy:
    """Draw both views from the truth and drop its masked measurements.

    Each row is ``z_i(t) W^T`` plus noise that is independent across features
    and correlated across the time points of a subject with covariance
    ``noise_scale**2 * psi``.
    """
    for psi in (truth.psi_x, truth.psi_y):
        if np.any(np.linalg.eigvalsh(psi) <= 0):
            raise ValueError("time covariance is not positive definite")
    rng = np.random.default_rng(seed)
    x = _view(truth.z, truth.w_x, truth.psi_x, noise_scale, ~truth.masks_x, truth.t, rng)
    y = _view(truth.z, truth.w_y, truth.psi_y, noise_scale, ~truth.masks_y, truth.t, rng)
    return PairedStudy(x, y)


def simulate_study(
    n: int = 100,
    p: int = 10000,
    q: int = 200,
    n_times: int = 10,
    theta=DEFAULT_THETA,
    noise_sd: float = 0.25,
    sine: str = "power",
    support_x=(10, 10),
    support_y=(20, 20),
    phi_x: float = 0.5,
    phi_y: float = 0.5,
    drop_x: float = 0.2,
    drop_y: float = 0.3,
    noise_scale: float = 1.0,
    seed: int = 0,
) -> tuple[PairedStudy, SimulationTruth]:
    """Simulate a study on the grid ``t = 1..n_times`` with two latent components."""
    ss = np.random.SeedSequence(seed)
    s_w, s_z, s_mask, s_view = ss.spawn(4)
    rng_w = np.random.default_rng(s_w)
    t = np.arange(1, n_times + 1, dtype=float)
    w_x = sparse_weights(p, support_x, rng_w)
    w_y = sparse_weights(q, support_y, rng_w)
    z = gen_latent_paths(t, n, theta, noise_sd, s_z, sine)
    rng_m = np.random.default_rng(s_mask)
    truth = SimulationTruth(
        t=t, w_x=w_x, w_y=w_y, z=z,
        psi_x=ar1_covariance(n_times, phi_x), psi_y=ar1_covariance(n_times, phi_y),
        masks_x=_mask(n, n_times, drop_x, rng_m), masks_y=_mask(n, n_times, drop_y, rng_m),
        theta=tuple(theta), noise_sd=noise_sd, sine=sine, seed=seed,
        params=dict(n=n, p=p, q=q, n_times=n_times, support_x=list(support_x),
                    support_y=list(support_y), phi_x=phi_x, phi_y=phi_y,
                    drop_x=drop_x, drop_y=drop_y, noise_scale=noise_scale),
    )
    return gen_views(truth, s_view, noise_scale), truth


# --------------------------------------------------------------------------
# recovery


def _support_scores(w_est, w_true):
    est = np.flatnonzero(w_est)
    true = np.flatnonzero(w_true)
    hits = [j for j in est if w_true[j] != 0 and np.sign(w_est[j]) == np.sign(w_true[j])]
    precision = len(hits) / len(est) if len(est) else 0.0
    recall = len(hits) / len(true) if len(true) else 0.0
    return precision, recall


def _abs_corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(abs(a @ b) / den) if den > 0 else 0.0


def score_recovery(result, truth: SimulationTruth, component: int | None = None,
                   grids=None) -> dict:
    """Compare one extracted component with a true component.

    ``result`` needs ``w_x``, ``w_y`` and ``mean_curve(view, grid)`` (a
    :class:`~tosccamm.mm.ComponentResult` or :meth:`SimulationTruth.component`).
    The sign of the estimate is aligned to the truth on the x weights before
    support precision/recall are counted; a feature counts as found only when
    its sign matches too. ``path_corr_x``/``path_corr_y`` are absolute
    correlations between the estimated mean trajectory and the true
    deterministic path over ``grids[view]`` (default: the simulation grid).
    With ``component=None`` the true component with the largest
    ``|cos(w_x)|`` is scored.
    """
    w_x, w_y = np.asarray(result.w_x), np.asarray(result.w_y)
    K = truth.w_x.shape[1]
    cos_x = [_cos(w_x, truth.w_x[:, k]) for k in range(K)]
    if component is None:
        component = int(np.argmax(np.abs(cos_x))) + 1
    k = component - 1
    tx, ty = truth.w_x[:, k], truth.w_y[:, k]
    sign = -1.0 if cos_x[k] < 0 else 1.0
    px, rx = _support_scores(sign * w_x, tx)
    py, ry = _support_scores(sign * w_y, ty)
    out = {
        "component": component,
        "precision_x": px, "recall_x": rx,
        "precision_y": py, "recall_y": ry,
        "cosine_x": abs(cos_x[k]), "cosine_y": abs(_cos(w_y, ty)),
    }
    grids = grids or {}
    for view in ("x", "y"):
        grid = np.asarray(grids.get(view, truth.t), dtype=float)
        est = result.mean_curve(view, grid)
        out[f"path_corr_{view}"] = _abs_corr(est, truth.paths(grid)[:, k])
    return out


def _cos(a, b):
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def false_positive_ratio(w_est, w_true) -> float:
    """Median |weight| off the true support over median |weight| on it."""
    w_est = np.asarray(w_est)
    on = np.abs(w_est[(w_true != 0) & (w_est != 0)])
    off = np.abs(w_est[(w_true == 0) & (w_est != 0)])
    if off.size == 0:
        return 0.0
    if on.size == 0:
        return np.inf
    return float(np.median(off) / np.median(on))
