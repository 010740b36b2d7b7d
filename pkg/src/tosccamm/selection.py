"""Subject-fold cross-validation of the sparsity counts (p_x, q_y)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data import PairedStudy, standardize, subject_folds
from .lme import fit_lme, predict_latent
from .mm import MmConfig, fit_component_mm
from .sparse_cca import canonical_correlation

TIE_TOL = 1e-12


@dataclass
class CvReport:
    """Held-out correlations per grid cell and fold."""

    grid: list[tuple[int, int]]
    scores: np.ndarray  # (cells, folds); nan where a fold failed
    folds: dict[str, int]
    selected: tuple[int, int]
    seed: int
    k_folds: int

    @property
    def mean(self) -> np.ndarray:
        out = np.full(len(self.grid), -np.inf)
        for c, row in enumerate(self.scores):
            ok = row[np.isfinite(row)]
            if ok.size:
                out[c] = ok.mean()
        return out

    @property
    def sd(self) -> np.ndarray:
        out = np.full(len(self.grid), np.nan)
        for c, row in enumerate(self.scores):
            ok = row[np.isfinite(row)]
            if ok.size > 1:
                out[c] = ok.std(ddof=1)
        return out

    def rows(self) -> list[dict]:
        return [
            {"p_x": px, "q_y": qy, "fold": f, "rho": float(self.scores[c, f])}
            for c, (px, qy) in enumerate(self.grid)
            for f in range(self.k_folds)
        ]

    def summary(self) -> dict:
        mean, sd = self.mean, self.sd
        return {
            "selected": {"p_x": self.selected[0], "q_y": self.selected[1]},
            "seed": self.seed,
            "k_folds": self.k_folds,
            "cells": [
                {"p_x": px, "q_y": qy,
                 "mean_rho": None if not math.isfinite(mean[c]) else float(mean[c]),
                 "sd_rho": None if not math.isfinite(sd[c]) else float(sd[c])}
                for c, (px, qy) in enumerate(self.grid)
            ],
        }


def select_cell(grid: Sequence[tuple[int, int]], mean: np.ndarray) -> tuple[int, int]:
    """Best mean score; near-ties go to the sparser cell (smaller p_x + q_y, then p_x)."""
    finite = np.isfinite(mean)
    if not finite.any():
        raise RuntimeError("every grid cell failed in every fold")
    best = np.max(mean[finite])
    cands = [grid[c] for c in range(len(grid)) if finite[c] and mean[c] >= best - TIE_TOL]
    return min(cands, key=lambda cell: (cell[0] + cell[1], cell[0]))


def heldout_rho(train: PairedStudy, test: PairedStudy, cfg: MmConfig, hook=None, tag=None) -> float:
    """Fit component 1 on ``train`` and score it on ``test``.

    The test views are scaled with training statistics and projected on the
    frozen weights; the y-latent is refitted on the test subjects and its
    prediction on the test x grid is correlated with the x-latent.
    """
    xs, xstats = standardize(train.x)
    ys, ystats = standardize(train.y)
    if hook is not None:
        hook({"tag": tag, "train_subjects": list(train.shared_subjects),
              "test_subjects": list(test.shared_subjects), "x_stats": xstats, "y_stats": ystats})
    px = None if cfg.p_x is None else min(cfg.p_x, xs.n_features)
    qy = None if cfg.q_y is None else min(cfg.q_y, ys.n_features)
    res = fit_component_mm(PairedStudy(xs, ys), replace(cfg, p_x=px, q_y=qy))
    if res.null:
        return math.nan
    xt, yt = xstats.apply(test.x), ystats.apply(test.y)
    eta = xt.values @ res.w_x
    gamma = yt.values @ res.w_y
    fy = fit_lme(gamma, yt.subject_ids, yt.times, cfg.basis_y, cfg.variance_ratio)
    gamma_on_tx = predict_latent(fy, xt.subject_ids, xt.times)
    return canonical_correlation(eta, gamma_on_tx)


def _cell_fold(study, folds, fold, cfg, hook, tag):
    train = [s for s, f in folds.items() if f != fold]
    test = [s for s, f in folds.items() if f == fold]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return heldout_rho(study.select_subjects(train), study.select_subjects(test), cfg,
                               hook, tag)
    except (ValueError, np.linalg.LinAlgError, RuntimeError):
        return math.nan


def default_grid(p: int, q: int) -> list[tuple[int, int]]:
    """5 x 5 grid of counts spread log-evenly up to a quarter of each view."""
    def ladder(n):
        top = max(1, n // 4)
        vals = np.unique(np.round(np.geomspace(1, top, 5)).astype(int)) if top > 1 else [1]
        return [int(v) for v in vals]
    return [(a, b) for a in ladder(p) for b in ladder(q)]


def cv_select(
    study: PairedStudy,
    grid: Sequence[tuple[int, int]],
    k_folds: int = 5,
    cfg: MmConfig | None = None,
    seed: int = 0,
    n_jobs: int = 1,
    hook: Callable[[dict], None] | None = None,
) -> CvReport:
    """Pick (p_x, q_y) by subject-fold cross-validation of the first component.

    ``study`` holds unscaled views; scaling is learned on the training
    subjects of every fold. ``hook`` (sequential runs only) receives the
    subjects and scaling statistics of every cell/fold for auditing.
    """
    grid = [(int(a), int(b)) for a, b in grid]
    if not grid:
        raise ValueError("empty grid")
    cfg = replace(cfg or MmConfig(), n_components=1)
    folds = subject_folds(study, k_folds, seed)
    tasks = [(c, f) for c in range(len(grid)) for f in range(k_folds)]

    def job(c, f):
        px, qy = grid[c]
        return _cell_fold(study, folds, f, replace(cfg, p_x=px, q_y=qy), hook, (grid[c], f))

    if n_jobs == 1 or hook is not None:
        vals = [job(c, f) for c, f in tasks]
    else:
        vals = Parallel(n_jobs=n_jobs)(delayed(job)(c, f) for c, f in tasks)
    scores = np.array(vals, dtype=float).reshape(len(grid), k_folds)
    report = CvReport(grid, scores, folds, grid[0], seed, k_folds)
    report.selected = select_cell(grid, report.mean)
    return report
