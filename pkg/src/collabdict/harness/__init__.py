"""Experiment orchestration: synthetic data, configs, runs, reports and the CLI."""

from .config import ExperimentConfig, load_config
from .experiment import RunReport, export_report, load_data_dir, run_experiment, write_data_dir
from .metrics import auc
from .synthetic import SyntheticData, SyntheticSpec, generate_synthetic, train_test_split

__all__ = [
    "ExperimentConfig",
    "load_config",
    "RunReport",
    "run_experiment",
    "export_report",
    "load_data_dir",
    "write_data_dir",
    "auc",
    "SyntheticSpec",
    "SyntheticData",
    "generate_synthetic",
    "train_test_split",
]
