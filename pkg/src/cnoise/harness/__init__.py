"""Seeded experiment harness: configs, paired runs, sweeps, CSV and plots."""

from .config import ExperimentConfig, ModelSpec, ScheduleSpec, format_config, load_config, parse_config
from .report import CSV_COLUMNS, aggregate_csv, emit_plots, read_csv, write_csv, write_manifest
from .runner import (
    ArmRecord,
    RunResult,
    StabilityResult,
    TrialFailure,
    aggregate_records,
    gamma_stability,
    paired_sign_test,
    run_experiment,
    run_sweep,
    trial_seed,
)

__all__ = [
    "ExperimentConfig", "ModelSpec", "ScheduleSpec", "format_config", "load_config", "parse_config",
    "CSV_COLUMNS", "aggregate_csv", "emit_plots", "read_csv", "write_csv", "write_manifest",
    "ArmRecord", "RunResult", "StabilityResult", "TrialFailure", "aggregate_records",
    "gamma_stability", "paired_sign_test", "run_experiment", "run_sweep", "trial_seed",
]
