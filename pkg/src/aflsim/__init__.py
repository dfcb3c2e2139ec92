"""Desk-scale deterministic simulator of robust asynchronous federated learning."""

from .orchestrator import ExperimentConfig, MetricsLog, run_experiment, theory_probe

__all__ = ["ExperimentConfig", "MetricsLog", "run_experiment", "theory_probe"]
__version__ = "0.1.0"
