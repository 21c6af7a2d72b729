"""Datasets, training and experiment templates."""

from hopattn.expt.config import ExperimentConfig, load_config
from hopattn.expt.experiments import (
    grad_check_suite, run_alpha_grid, run_collapse_sweep, run_depth_sweep, run_experiment,
)
from hopattn.expt.data import make_char_corpus, make_synthetic_vision
from hopattn.expt.train import train

__all__ = [
    "ExperimentConfig", "load_config", "grad_check_suite", "run_alpha_grid", "run_collapse_sweep",
    "run_depth_sweep", "run_experiment", "make_char_corpus", "make_synthetic_vision", "train",
]
