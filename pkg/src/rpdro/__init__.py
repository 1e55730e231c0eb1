"""Distributionally robust training with parametric likelihood-ratio adversaries.

A small reverse-mode autodiff engine drives linear and MLP classifiers, an adversary
network reweights each mini-batch, and a min-max criterion picks checkpoints without
group labels.
"""

from .autodiff import AutodiffError, ParamSet, Tape, backward, finite_diff_check
from .data import Dataset, DataFormatError, gen_spurious, gen_two_domain, inject_label_noise, load_jsonl, save_jsonl, split
from .harness import ExperimentConfig, RunRecord, SweepGrid, run_experiment, run_seeds, run_sweep
from .metrics import GroupMetrics, evaluate_groups
from .models import ModelSpec, init_params, predict_logits
from .selection import CandidatePool, kl_filter, minmax_select, select_checkpoint
from .training import TrainConfig, TrainingError, train_run
from .weighting import StrategyConfig

__version__ = "0.1.0"

__all__ = [
    "AutodiffError", "ParamSet", "Tape", "backward", "finite_diff_check",
    "Dataset", "DataFormatError", "gen_spurious", "gen_two_domain", "inject_label_noise",
    "load_jsonl", "save_jsonl", "split",
    "ExperimentConfig", "RunRecord", "SweepGrid", "run_experiment", "run_seeds", "run_sweep",
    "GroupMetrics", "evaluate_groups",
    "ModelSpec", "init_params", "predict_logits",
    "CandidatePool", "kl_filter", "minmax_select", "select_checkpoint",
    "TrainConfig", "TrainingError", "train_run",
    "StrategyConfig",
]
