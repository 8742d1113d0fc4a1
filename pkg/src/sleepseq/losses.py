"""Imbalance-aware losses over class probability outputs.

Plain MSE weights every sample equally, so majority classes dominate the
loss on skewed data.  The mean false error (MFE) instead averages the
squared error within each class first and sums those per-class means, so
each class contributes equally regardless of its sample count; the mean
squared false error (MSFE) sums the squares of the per-class means.  All
three are differentiable through the probability tensor, plus an L2
penalty over weight (non-bias) parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, tsum


@dataclass
class ClasswiseError:
    """Per-class mean squared error terms and the sample counts behind them."""

    per_class: dict[int, Tensor]
    counts: dict[int, int]
    n_outputs: int


def _per_sample_error(probs: Tensor, targets_onehot: np.ndarray) -> Tensor:
    diff = probs - Tensor(np.asarray(targets_onehot, dtype=probs.dtype))
    # mean over the output dimensions of the squared difference
    return tsum(diff * diff, axis=1) * (1.0 / probs.shape[1])


def per_class_error(probs: Tensor, targets_onehot: np.ndarray,
                    class_of_sample: np.ndarray) -> ClasswiseError:
    """Group per-sample squared errors by true class and average within each.

    ``probs`` is (samples, C) probability rows; ``targets_onehot`` the
    matching one-hot matrix; ``class_of_sample`` assigns each row to the
    class whose mean it contributes to.  Classes absent from the batch
    simply have no term (they contribute 0 to MFE/MSFE).
    """
    probs_shape = probs.shape
    targets_onehot = np.asarray(targets_onehot)
    class_of_sample = np.asarray(class_of_sample)
    if targets_onehot.shape != probs_shape:
        raise ValueError(f"targets shape {targets_onehot.shape} != probs shape {probs_shape}")
    if class_of_sample.shape != (probs_shape[0],):
        raise ValueError("class_of_sample must assign exactly one class per sample")

    errors = _per_sample_error(probs, targets_onehot)
    per_class: dict[int, Tensor] = {}
    counts: dict[int, int] = {}
    for cls in np.unique(class_of_sample):
        mask = (class_of_sample == cls).astype(errors.dtype)
        count = int(mask.sum())
        per_class[int(cls)] = tsum(errors * Tensor(mask)) * (1.0 / count)
        counts[int(cls)] = count
    return ClasswiseError(per_class=per_class, counts=counts, n_outputs=probs_shape[1])


def mfe(errors: ClasswiseError) -> Tensor:
    """Sum of per-class mean errors."""
    total = None
    for cls in sorted(errors.per_class):
        term = errors.per_class[cls]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no classes in batch")
    return total


def msfe(errors: ClasswiseError) -> Tensor:
    """Sum of squared per-class mean errors."""
    total = None
    for cls in sorted(errors.per_class):
        term = errors.per_class[cls]
        sq = term * term
        total = sq if total is None else total + sq
    if total is None:
        raise ValueError("no classes in batch")
    return total


def mse(probs: Tensor, targets_onehot: np.ndarray) -> Tensor:
    """Batch mean of per-sample errors (the count-weighted average of the
    per-class means)."""
    errors = _per_sample_error(probs, targets_onehot)
    return tsum(errors) * (1.0 / probs.shape[0])


def l2_penalty(params: dict[str, Tensor], beta: float) -> Tensor:
    """beta * sum of squared weight entries; bias parameters (names ending
    in ``.b``) are excluded."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    total = None
    for name in sorted(params):
        if name.endswith(".b"):
            continue
        p = params[name]
        term = tsum(p * p)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.asarray(0.0))
    return total * beta


LOSS_NAMES = ("mfe", "msfe", "mse")


def sequence_loss(probs: Tensor, targets: np.ndarray, loss_name: str = "mfe",
                  eod_class: int | None = None, include_eod_class: bool = True) -> Tensor:
    """Loss over flattened decoder outputs.

    ``targets`` holds integer symbol indices per row (stage classes plus
    the end-of-decoding symbol).  End-of-decoding rows are kept out of the
    five stage groupings; with ``include_eod_class`` they form their own
    class term, otherwise they are dropped from the loss.
    """
    targets = np.asarray(targets).reshape(-1)
    n_out = probs.shape[1]
    onehot = np.zeros((targets.size, n_out), dtype=probs.dtype)
    onehot[np.arange(targets.size), targets] = 1.0

    if loss_name == "mse":
        return mse(probs, onehot)

    class_of_sample = targets.copy()
    if eod_class is not None and not include_eod_class:
        keep = targets != eod_class
        if not keep.all():
            idx = np.flatnonzero(keep)
            probs = _select_rows(probs, idx)
            onehot = onehot[idx]
            class_of_sample = class_of_sample[idx]

    errors = per_class_error(probs, onehot, class_of_sample)
    if loss_name == "mfe":
        return mfe(errors)
    if loss_name == "msfe":
        return msfe(errors)
    raise ValueError(f"unknown loss {loss_name!r}; choose from {LOSS_NAMES}")


def _select_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Differentiable row gather via a 0/1 selection matrix."""
    sel = np.zeros((idx.size, x.shape[0]), dtype=x.dtype)
    sel[np.arange(idx.size), idx] = 1.0
    return Tensor(sel) @ x
