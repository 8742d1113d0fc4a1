"""Teacher-forced training loop and inference-mode evaluation helpers.

Batches epoch sequences, runs the model forward with the target labels as
decoder inputs, minimizes the configured loss (MFE by default) plus an L2
weight penalty with RMSProp, and logs per-step losses.  Persisted train
logs carry only deterministic columns (step, loss); wall-clock timing goes
to the logging stream so that seed-fixed reruns stay byte-identical.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .autodiff import NumericError, backward, concat, softmax
from .losses import l2_penalty, sequence_loss
from .model import SleepScorer
from .optim import RMSProp
from .pipeline import EOD, EpochSequence

logger = logging.getLogger(__name__)


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)  # step, loss, wall_s
    epochs: list[tuple[int, float]] = field(default_factory=list)  # epoch, mean loss

    def log_step(self, step: int, loss: float, wall_s: float) -> None:
        self.steps.append((step, loss, wall_s))

    def log_epoch(self, epoch: int, mean_loss: float) -> None:
        self.epochs.append((epoch, mean_loss))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step\tloss\n")
            for step, loss, _ in self.steps:
                fh.write(f"{step}\t{loss:.8f}\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                step, loss = line.strip().split("\t")
                log.steps.append((int(step), float(loss), 0.0))
        return log


def sequences_to_arrays(sequences: list[EpochSequence], dtype=np.float32):
    """Stack sequences into (X, teacher symbols, targets) arrays."""
    x = np.stack([[e.samples for e in s.inputs] for s in sequences]).astype(dtype)
    teacher = np.stack([s.teacher_symbols for s in sequences])
    targets = np.stack([s.targets for s in sequences])
    return x, teacher, targets


class Trainer:
    def __init__(self, model: SleepScorer, lr: float = 1e-4, l2_beta: float = 1e-3,
                 loss_name: str = "mfe", batch_size: int = 20, seed: int = 0,
                 include_eod_class: bool = True, decay: float = 0.9, eps: float = 1e-10):
        self.model = model
        self.loss_name = loss_name
        self.l2_beta = l2_beta
        self.batch_size = batch_size
        self.include_eod_class = include_eod_class
        self.optimizer = RMSProp(model.params, lr=lr, decay=decay, eps=eps)
        self.rng = np.random.default_rng(seed)
        self.step = 0

    def compute_loss(self, x: np.ndarray, teacher: np.ndarray, targets: np.ndarray,
                     training: bool = True):
        logits_seq, _ = self.model.forward_sequences(x, teacher, training=training,
                                                     rng=self.rng if training else None)
        stacked = concat(logits_seq, axis=0)  # time-major rows
        flat_targets = targets.T.reshape(-1)
        probs = softmax(stacked, axis=1)
        loss = sequence_loss(probs, flat_targets, self.loss_name,
                             eod_class=EOD, include_eod_class=self.include_eod_class)
        if self.l2_beta > 0:
            loss = loss + l2_penalty(self.model.params, self.l2_beta)
        return loss, logits_seq

    def train_step(self, x: np.ndarray, teacher: np.ndarray, targets: np.ndarray) -> float:
        loss, _ = self.compute_loss(x, teacher, targets, training=True)
        value = float(loss.values)
        if not np.isfinite(value):
            raise NumericError(f"loss became non-finite at step {self.step}")
        self.optimizer.zero_grad()
        backward(loss)
        self.optimizer.step()
        self.step += 1
        return value

    def train(self, sequences: list[EpochSequence], max_steps: int | None = None,
              max_epochs: int | None = None, log: TrainLog | None = None,
              log_every: int = 50, checkpoint_every: int | None = None,
              checkpoint_dir=None) -> TrainLog:
        """Iterate over shuffled mini-batches until a step or epoch budget.

        At least one of ``max_steps``/``max_epochs`` must be set.
        """
        if max_steps is None and max_epochs is None:
            raise ValueError("need max_steps or max_epochs")
        log = log if log is not None else TrainLog()
        x_all, teacher_all, targets_all = sequences_to_arrays(sequences, self.model.dtype)
        n = len(sequences)
        start = time.monotonic()
        epoch = 0
        while True:
            if max_epochs is not None and epoch >= max_epochs:
                break
            order = self.rng.permutation(n)
            epoch_losses = []
            for lo in range(0, n, self.batch_size):
                if max_steps is not None and self.step >= max_steps:
                    break
                idx = order[lo : lo + self.batch_size]
                value = self.train_step(x_all[idx], teacher_all[idx], targets_all[idx])
                epoch_losses.append(value)
                wall = time.monotonic() - start
                log.log_step(self.step, value, wall)
                if self.step % log_every == 0:
                    logger.info("step %d  loss %.6f  (%.1fs)", self.step, value, wall)
                if checkpoint_every and checkpoint_dir and self.step % checkpoint_every == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"step_{self.step:07d}.ckpt")
            if epoch_losses:
                log.log_epoch(epoch, float(np.mean(epoch_losses)))
            epoch += 1
            if max_steps is not None and self.step >= max_steps:
                break
        return log

    def teacher_forced_predictions(self, x: np.ndarray, teacher: np.ndarray) -> np.ndarray:
        """Argmax stage predictions at the label steps (EOD step excluded)."""
        logits_seq, _ = self.model.forward_sequences(x, teacher, training=False)
        steps = x.shape[1]
        preds = np.stack([lg.values.argmax(axis=1) for lg in logits_seq[:steps]], axis=1)
        return preds

    def save_checkpoint(self, path) -> None:
        meta = {
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "loss": self.loss_name,
            "model_config": self.model.config.to_json(),
        }
        ckpt.save_checkpoint(path, self.model.params,
                             extra_arrays=self.optimizer.state_arrays(), meta=meta)

    def load_checkpoint(self, path) -> dict:
        arrays, meta = ckpt.load_checkpoint(path)
        ckpt.restore_params(self.model.params, arrays)
        self.optimizer.load_state_arrays(arrays)
        self.step = int(meta.get("step", 0))
        if "rng_state" in meta:
            self.rng.bit_generator.state = meta["rng_state"]
        return meta


def predict_sequences(model: SleepScorer, sequences: list[EpochSequence],
                      batch_size: int = 64):
    """Greedy inference over sequences: (predictions, truths), each (N, maxtime)."""
    preds, truths = [], []
    for lo in range(0, len(sequences), batch_size):
        chunk = sequences[lo : lo + batch_size]
        x, _, targets = sequences_to_arrays(chunk, model.dtype)
        states = model.encode_epochs(x, training=False)
        labels, _ = model.decode_inference(states)
        preds.append(labels)
        truths.append(targets[:, :-1])
    return np.concatenate(preds), np.concatenate(truths)


def accuracy(preds: np.ndarray, truths: np.ndarray) -> float:
    preds = np.asarray(preds).reshape(-1)
    truths = np.asarray(truths).reshape(-1)
    return float((preds == truths).mean())
