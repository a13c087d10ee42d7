"""Sensitivity analysis for two-arm trials with irregular assessment times.

Marginal outcome means are estimated by augmented inverse-intensity
weighting, with the unobserved-outcome distribution at unassessed times
tilted by ``exp(alpha * y)`` relative to the observed one.
"""
from .config import AnalysisConfig
from .data import Schema, TrialFrame, derive_counting_process, ingest_long_table
from .engine import (FullModel, ModelOptions, fit_arm, fit_full, jackknife, predict_mean,
                     restrict_alpha_range, treatment_effect)
from .simulate import SimConfig, compute_true_beta, simulate_trial
from .study import StudyConfig, run_simulation_study

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig", "FullModel", "ModelOptions", "Schema", "SimConfig", "StudyConfig", "TrialFrame",
    "compute_true_beta", "derive_counting_process", "fit_arm", "fit_full", "ingest_long_table", "jackknife",
    "predict_mean", "restrict_alpha_range", "run_simulation_study", "simulate_trial", "treatment_effect",
]
