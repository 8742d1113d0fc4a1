"""Epoch pipeline: segmentation, normalization, sequence framing, folds, SMOTE.

Turns a (signal, hypnogram) pair into normalized 30-s labeled epochs under
the 5-class AASM scheme (stage 4 merged into N3, movement/unscored windows
dropped), frames consecutive epochs into fixed-length sequences with
start/end control symbols for the decoder, splits subjects into
cross-validation folds, and oversamples minority classes by interpolating
between same-class nearest neighbours.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .array_store import load_arrays, save_arrays
from .edf import StageAnnotation

logger = logging.getLogger(__name__)

EPOCH_S = 30.0
NORM_EPS = 1e-8

# Scoreable classes; 5 and 6 are decoder control symbols, never metric targets.
W, N1, N2, N3, REM = range(5)
EOD = 5
SOD = 6
N_CLASSES = 5
N_DECODER_OUTPUTS = N_CLASSES + 1  # five stages + EOD
N_DECODER_SYMBOLS = N_CLASSES + 2  # embedding vocabulary adds SOD

CLASS_NAMES = ("W", "N1", "N2", "N3", "REM")

# Raw hypnogram labels -> class index.  Stage 4 folds into N3; M and ? are
# excluded from scoring entirely.
RAW_TO_CLASS = {"W": W, "1": N1, "2": N2, "3": N3, "4": N3, "R": REM}
EXCLUDED_RAW = {"M", "?"}


class PipelineError(Exception):
    pass


@dataclass
class LabeledEpoch:
    """One 30-s window of samples with its stage class."""

    samples: np.ndarray
    label: int
    subject_id: str = ""
    position: int = 0  # 30-s slot index within the recording
    synthetic: bool = False


@dataclass
class EpochSequence:
    """maxtime consecutive epochs framed for the sequence decoder.

    ``decoder_inputs`` is [SOD, label_1, ..., label_{maxtime-1}]; ``targets``
    is [label_1, ..., label_maxtime, EOD], i.e. the inputs are the targets
    shifted right by one with SOD prepended and EOD dropped.
    """

    inputs: list[LabeledEpoch]
    decoder_inputs: np.ndarray
    targets: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.targets[:-1]

    @property
    def teacher_symbols(self) -> np.ndarray:
        """[SOD, label_1, ..., label_maxtime]: inputs for every target step."""
        return np.concatenate([self.decoder_inputs, self.targets[-2:-1]])


@dataclass
class FoldPlan:
    """Subject-level fold assignment for cross-validation."""

    k: int
    assignment: dict[str, int] = field(default_factory=dict)

    def subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# k={self.k}\n")
            for subject in sorted(self.assignment):
                fh.write(f"{subject}\t{self.assignment[subject]}\n")

    @classmethod
    def load(cls, path) -> "FoldPlan":
        k = None
        assignment = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if "k=" in line:
                        k = int(line.split("k=")[1])
                    continue
                subject, fold = line.split("\t")
                assignment[subject] = int(fold)
        if k is None:
            k = max(assignment.values()) + 1 if assignment else 0
        return cls(k=k, assignment=assignment)


def segment_epochs(
    signal: np.ndarray,
    sampling_rate: float,
    annotations: list[StageAnnotation],
    subject_id: str = "",
    strict: bool = False,
) -> list[LabeledEpoch]:
    """Cut the signal into labeled 30-s epochs.

    Movement and unscored windows are excluded and stage 4 is merged into
    N3.  Annotation windows that run past the end of the signal are dropped
    with a logged count (the hypnogram/signal mismatch is truncated to the
    shorter of the two); with ``strict=True`` they raise instead.
    """
    spe_f = sampling_rate * EPOCH_S
    spe = int(round(spe_f))
    if abs(spe_f - spe) > 1e-9 or spe < 1:
        raise PipelineError(f"sampling_rate {sampling_rate} Hz gives non-integer samples per epoch")

    epochs: list[LabeledEpoch] = []
    dropped = 0
    for ann in sorted(annotations, key=lambda a: a.onset_s):
        n_blocks = int(ann.duration_s // EPOCH_S)
        if ann.duration_s % EPOCH_S != 0:
            logger.warning(
                "annotation %s@%gs: duration %gs is not a 30-s multiple, flooring",
                ann.label, ann.onset_s, ann.duration_s,
            )
        for block in range(n_blocks):
            onset = ann.onset_s + block * EPOCH_S
            start = int(round(onset * sampling_rate))
            end = start + spe
            if end > len(signal):
                if strict:
                    raise PipelineError(
                        f"annotation window at {onset}s exceeds signal length "
                        f"({len(signal)} samples at {sampling_rate} Hz)"
                    )
                dropped += 1
                continue
            if ann.label in EXCLUDED_RAW:
                continue
            try:
                label = RAW_TO_CLASS[ann.label]
            except KeyError:
                raise PipelineError(f"unknown stage label {ann.label!r}") from None
            epochs.append(
                LabeledEpoch(
                    samples=signal[start:end],
                    label=label,
                    subject_id=subject_id,
                    position=int(onset // EPOCH_S),
                )
            )
    if dropped:
        logger.warning("dropped %d epochs whose annotation extends beyond the signal", dropped)
    return epochs


def normalize_samples(x: np.ndarray) -> np.ndarray:
    """Shift/scale to zero mean and unit variance (population std, eps guard)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean()
    return centered / max(centered.std(), NORM_EPS)


def normalize_epoch(epoch: LabeledEpoch) -> LabeledEpoch:
    return replace(epoch, samples=normalize_samples(epoch.samples))


def trim_wake(epochs: list[LabeledEpoch], margin_epochs: int = 60) -> list[LabeledEpoch]:
    """Keep at most ``margin_epochs`` of wake before the first and after the
    last non-wake epoch.  Returns the input unchanged if nothing is asleep."""
    sleep_idx = [i for i, e in enumerate(epochs) if e.label != W]
    if not sleep_idx:
        return list(epochs)
    lo = max(0, sleep_idx[0] - margin_epochs)
    hi = min(len(epochs), sleep_idx[-1] + 1 + margin_epochs)
    return epochs[lo:hi]


def make_sequences(epochs: list[LabeledEpoch], maxtime: int) -> list[EpochSequence]:
    """Frame consecutive epochs into non-overlapping maxtime-long sequences.

    A final window shorter than maxtime is dropped.
    """
    if maxtime < 1:
        raise PipelineError(f"maxtime must be >= 1, got {maxtime}")
    sequences = []
    for start in range(0, len(epochs) - maxtime + 1, maxtime):
        window = epochs[start : start + maxtime]
        labels = np.array([e.label for e in window], dtype=np.int64)
        sequences.append(
            EpochSequence(
                inputs=window,
                decoder_inputs=np.concatenate([[SOD], labels[:-1]]),
                targets=np.concatenate([labels, [EOD]]),
            )
        )
    return sequences


def split_folds(subject_ids: list[str], k: int, seed: int = 0) -> FoldPlan:
    """Assign each subject to one of k folds, sizes differing by at most one."""
    subjects = sorted(set(subject_ids))
    if k < 1 or k > len(subjects):
        raise PipelineError(f"k={k} must be in [1, {len(subjects)}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    assignment = {subjects[j]: i % k for i, j in enumerate(order)}
    return FoldPlan(k=k, assignment=assignment)


def class_counts(epochs: list[LabeledEpoch]) -> dict[int, int]:
    counts = dict.fromkeys(range(N_CLASSES), 0)
    for e in epochs:
        counts[e.label] += 1
    return counts


def smote_interpolate(x: np.ndarray, x_nn: np.ndarray, u: float) -> np.ndarray:
    """Point on the segment between a sample and its neighbour: x + u*(x_nn - x)."""
    return x + u * (x_nn - x)


def smote_oversample(
    epochs: list[LabeledEpoch],
    target_count_per_class: int | dict[int, int] | None = None,
    k_neighbors: int = 5,
    seed: int = 0,
) -> list[LabeledEpoch]:
    """Oversample minority classes by segment interpolation (SMOTE).

    Each synthetic epoch is x + u * (x_nn - x) for a uniform u in [0, 1]
    and x_nn one of the k nearest same-class neighbours of x under
    Euclidean distance.  Originals are always retained; per-class counts
    are raised exactly to the target (default: the majority-class count).
    A class with a single member cannot be interpolated and is duplicated
    with a warning.
    """
    if k_neighbors < 1:
        raise PipelineError(f"k_neighbors must be >= 1, got {k_neighbors}")
    counts = class_counts(epochs)
    present = {c: n for c, n in counts.items() if n > 0}
    if target_count_per_class is None:
        target_count_per_class = max(present.values(), default=0)
    if isinstance(target_count_per_class, int):
        targets = {c: target_count_per_class for c in present}
    else:
        targets = dict(target_count_per_class)

    rng = np.random.default_rng(seed)
    out = list(epochs)
    for cls in sorted(targets):
        need = targets[cls] - counts.get(cls, 0)
        if need <= 0:
            continue
        members = [e for e in epochs if e.label == cls]
        if not members:
            raise PipelineError(f"cannot oversample class {cls}: no members")
        if len(members) < 2:
            logger.warning("class %d has a single member; duplicating instead of interpolating", cls)
            parent = members[0]
            for _ in range(need):
                out.append(replace(parent, samples=parent.samples.copy(), synthetic=True))
            continue
        x = np.stack([np.asarray(e.samples, dtype=np.float64) for e in members])
        # Pairwise distances; k nearest same-class neighbours excluding self.
        d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        kk = min(k_neighbors, len(members) - 1)
        nn_idx = np.argsort(d2, axis=1)[:, :kk]
        for j in range(need):
            i = j % len(members)
            nb = nn_idx[i, rng.integers(kk)]
            synth = smote_interpolate(x[i], x[nb], rng.uniform(0.0, 1.0))
            out.append(
                LabeledEpoch(
                    samples=synth,
                    label=cls,
                    subject_id=members[i].subject_id,
                    position=members[i].position,
                    synthetic=True,
                )
            )
    return out


def synthetic_sequences(synthetic_epochs: list[LabeledEpoch], maxtime: int) -> list[EpochSequence]:
    """Frame synthetic epochs into their own sequences, grouped by class.

    Synthetic epochs are never spliced into real recordings; they form
    homogeneous sequences so oversampling cannot corrupt real temporal
    context.
    """
    sequences = []
    for cls in range(N_CLASSES):
        group = [e for e in synthetic_epochs if e.label == cls]
        sequences.extend(make_sequences(group, maxtime))
    return sequences


# Preprocessed dataset files: one container per recording holding the epoch
# matrix, labels, slot positions, and identifying metadata.
EPOCH_FILE_FORMAT = "sleepseq-epochs"
EPOCH_FILE_VERSION = 1


def write_epoch_file(path, epochs: list[LabeledEpoch], subject_id: str, sampling_rate: float,
                     channel: str = "", recording: str = "") -> None:
    if not epochs:
        raise PipelineError("refusing to write an empty epoch file")
    arrays = {
        "samples": np.stack([e.samples for e in epochs]).astype(np.float32),
        "labels": np.array([e.label for e in epochs], dtype=np.int8),
        "positions": np.array([e.position for e in epochs], dtype=np.int32),
        "synthetic": np.array([e.synthetic for e in epochs], dtype=np.uint8),
    }
    meta = {
        "format": EPOCH_FILE_FORMAT,
        "format_version": EPOCH_FILE_VERSION,
        "subject_id": subject_id,
        "sampling_rate": sampling_rate,
        "channel": channel,
        "recording": recording,
        "epoch_s": EPOCH_S,
    }
    save_arrays(path, arrays, meta)


def read_epoch_file(path) -> tuple[list[LabeledEpoch], dict]:
    arrays, meta = load_arrays(path)
    if meta.get("format") != EPOCH_FILE_FORMAT:
        raise PipelineError(f"{path}: not a {EPOCH_FILE_FORMAT} file")
    epochs = [
        LabeledEpoch(
            samples=arrays["samples"][i],
            label=int(arrays["labels"][i]),
            subject_id=meta["subject_id"],
            position=int(arrays["positions"][i]),
            synthetic=bool(arrays["synthetic"][i]),
        )
        for i in range(len(arrays["labels"]))
    ]
    return epochs, meta
