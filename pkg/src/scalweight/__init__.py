"""Scalarization, gradient-based MTO baselines, conflict profiling and PBT
weight search for multi-task and multi-domain training, on a small numpy
network."""
from .datasets import MultiSourceDataset, gen_multidomain, gen_multitask, load_csv
from .grad_mto import GradientSet, cagrad_combine, graddrop_combine, pcgrad_combine
from .kernels import BACKEND
from .nn_core import Capacity, Model, ModelSpec, OptimizerConfig, TaskSpec
from .pbt import PbtConfig, backtrack_policy, retrain_with_policy, run_pbt
from .training import TrainConfig, Trainer, WeightSchedule, train_run
from .weighting import WeightVector, scalarized_gradient, simplex_project

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Capacity",
    "GradientSet",
    "Model",
    "ModelSpec",
    "MultiSourceDataset",
    "OptimizerConfig",
    "PbtConfig",
    "TaskSpec",
    "TrainConfig",
    "Trainer",
    "WeightSchedule",
    "WeightVector",
    "backtrack_policy",
    "cagrad_combine",
    "gen_multidomain",
    "gen_multitask",
    "graddrop_combine",
    "load_csv",
    "pcgrad_combine",
    "retrain_with_policy",
    "run_pbt",
    "scalarized_gradient",
    "simplex_project",
    "train_run",
]
