"""Rationale-invariance training toolkit.

Decomposes a bias-free linear classifier's decision into an element-wise
contribution matrix, tracks momentum-updated per-class mean matrices, and
regularizes each sample's deviation from its class mean during training,
alongside the feature-, logit-, and zero-target variants of the same idea.
Ships a minimal reverse-mode autodiff engine, synthetic multi-domain
datasets with controllable spurious correlations, a leave-one-domain-out
trial runner, and summary tooling.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, set_default_dtype
from .data import (DomainDataset, SplitPlan, SyntheticShiftConfig, generate,
                   leave_one_out_splits, load_csv, standardize_splits, write_csv)
from .model import LinearHead, FeatureExtractor, ModelConfig, init_model
from .rationale import (ClassMeanBank, build_rationale, invariance_loss, scd_trace,
                        total_loss)
from .report import MethodSummary, export_tables, interval_score, summarize
from .trainer import (ABLATION_METHODS, HpRanges, TrainConfig, TrialResult,
                      run_ablation, run_trials, train_one)

__all__ = [
    "__version__",
    "Tensor", "backward", "set_default_dtype",
    "DomainDataset", "SplitPlan", "SyntheticShiftConfig", "generate",
    "leave_one_out_splits", "load_csv", "standardize_splits", "write_csv",
    "LinearHead", "FeatureExtractor", "ModelConfig", "init_model",
    "ClassMeanBank", "build_rationale", "invariance_loss", "scd_trace", "total_loss",
    "MethodSummary", "export_tables", "interval_score", "summarize",
    "ABLATION_METHODS", "HpRanges", "TrainConfig", "TrialResult",
    "run_ablation", "run_trials", "train_one",
]
