"""Sparse canonical correlation for paired longitudinal data, with latent
trajectories modelled by random-intercept mixed models."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    EventTable,
    IngestError,
    LongView,
    PairedStudy,
    Schema,
    align_to_event,
    export_long_csv,
    ingest_long_csv,
    standardize,
    subject_folds,
)
from .lme import MixedModelFit, TimeBasis, fit_lme, mean_trajectory, predict_latent  # noqa: E402
from .mm import ComponentResult, MmConfig, fit, fit_component_mm  # noqa: E402
from .selection import CvReport, cv_select  # noqa: E402
from .simulate import score_recovery, simulate_study  # noqa: E402
from .sparse_cca import nipals_pair, soft_threshold_topk  # noqa: E402

__all__ = [
    "ComponentResult", "CvReport", "EventTable", "IngestError", "LongView", "MixedModelFit",
    "MmConfig", "PairedStudy", "Schema", "TimeBasis", "align_to_event", "cv_select",
    "export_long_csv", "fit", "fit_component_mm", "fit_lme", "ingest_long_csv",
    "mean_trajectory", "nipals_pair", "predict_latent", "score_recovery", "simulate_study",
    "soft_threshold_topk", "standardize", "subject_folds",
]
