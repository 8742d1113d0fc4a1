"""Parameter checkpoints: named arrays in the deterministic container format.

A checkpoint maps parameter name -> shape + raw values and carries a
format-version field plus arbitrary JSON metadata (step counter, rng state,
optimizer accumulators under the ``opt.acc.`` prefix).  Identical
parameters always serialize to identical bytes.
"""

from __future__ import annotations

import numpy as np

from .array_store import StoreError, load_arrays, save_arrays
from .autodiff import Tensor

CHECKPOINT_FORMAT = "sleepseq-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    arrays = {name: p.values for name, p in params.items()}
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise ValueError(f"extra array names collide with parameters: {sorted(overlap)}")
        arrays.update(extra_arrays)
    full_meta = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION}
    full_meta.update(meta or {})
    save_arrays(path, arrays, full_meta)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, meta = load_arrays(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise StoreError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return arrays, meta


def restore_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into existing parameter tensors, shape-checked."""
    for name, p in params.items():
        if name not in arrays:
            raise StoreError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.values.shape:
            raise StoreError(
                f"parameter {name!r}: checkpoint shape {arrays[name].shape} != model {p.values.shape}"
            )
        p.values = arrays[name].astype(p.values.dtype, copy=True)
