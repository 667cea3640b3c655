"""Configured experiment pipelines and report writing."""

from frlinv.experiments.config import VARIANTS, ExperimentConfig, default_config
from frlinv.experiments.pipelines import (
    PIPELINES,
    run_ablation,
    run_attack,
    run_batch_sweep,
    run_defense_sweep,
    run_experiment,
    run_multistart,
    run_prior_bias,
    run_quantization,
    run_sensitivity,
    run_train,
    run_transition_study,
    variant_weights,
)
from frlinv.experiments.report import Report, emit_report, parse_csv, summarize

__all__ = [
    "ExperimentConfig", "default_config", "VARIANTS", "PIPELINES", "run_experiment", "run_ablation", "run_attack",
    "run_batch_sweep", "run_defense_sweep", "run_multistart", "run_prior_bias", "run_quantization",
    "run_sensitivity", "run_train", "run_transition_study", "variant_weights", "Report", "emit_report",
    "parse_csv", "summarize",
]
