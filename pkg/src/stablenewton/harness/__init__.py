"""Experiment configuration, execution and command line."""

from .config import ExperimentConfig, list_presets, load_config, preset_path
from .runner import compare_experiments, probe_problem, run_experiment

__all__ = ["ExperimentConfig", "compare_experiments", "list_presets", "load_config",
           "preset_path", "probe_problem", "run_experiment"]
