"""Sequence-to-sequence sleep stage scoring from single-channel EEG.

Subpackages by concern:

- :mod:`sleepseq.edf` — EDF/EDF+ parsing, channel selection, hypnograms
- :mod:`sleepseq.pipeline` — epochs, sequences, folds, SMOTE, dataset files
- :mod:`sleepseq.autodiff` / :mod:`sleepseq.optim` — reverse-mode tensors,
  gradient checking, RMSProp
- :mod:`sleepseq.model` — CNN + BiLSTM encoder + attention decoder
- :mod:`sleepseq.losses` — MFE / MSFE / MSE and the L2 penalty
- :mod:`sleepseq.metrics` — confusion matrices, per-class and overall scores
- :mod:`sleepseq.training` / :mod:`sleepseq.cli` — training loop and commands
"""

from .autodiff import Tensor, backward, gradient_check
from .edf import EdfRecording, parse_edf, parse_hypnogram, select_channel
from .losses import l2_penalty, mfe, msfe, mse, per_class_error
from .metrics import MetricsReport, aggregate_folds, confusion, overall_metrics, per_class_metrics
from .model import ModelConfig, SleepScorer
from .optim import RMSProp
from .pipeline import (
    EOD,
    SOD,
    EpochSequence,
    FoldPlan,
    LabeledEpoch,
    make_sequences,
    normalize_epoch,
    segment_epochs,
    smote_oversample,
    split_folds,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "gradient_check",
    "EdfRecording", "parse_edf", "parse_hypnogram", "select_channel",
    "l2_penalty", "mfe", "msfe", "mse", "per_class_error",
    "MetricsReport", "aggregate_folds", "confusion", "overall_metrics", "per_class_metrics",
    "ModelConfig", "SleepScorer", "RMSProp",
    "EOD", "SOD", "EpochSequence", "FoldPlan", "LabeledEpoch",
    "make_sequences", "normalize_epoch", "segment_epochs", "smote_oversample", "split_folds",
    "__version__",
]
