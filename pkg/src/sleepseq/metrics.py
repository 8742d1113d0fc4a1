"""Scoring metrics: confusion matrix, per-class and overall performance.

Rows of the confusion matrix are the expert (actual) stages, columns the
predicted stages.  Per-class precision/recall/specificity/F1 are reported
in percent; overall metrics are accuracy, macro-averaged F1 (the
unweighted mean of the five class F1 values), and Cohen's kappa.
Undefined ratios (0/0) are reported as explicit n/a markers, never as
silent zeros.  Cross-validation folds aggregate by pooling predictions
into one global matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .pipeline import CLASS_NAMES, N_CLASSES


class MetricsError(Exception):
    pass


def confusion(pred, truth, n_classes: int = N_CLASSES) -> np.ndarray:
    """Count matrix with cell [actual, predicted]."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricsError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= n_classes):
        raise MetricsError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def per_class_metrics(cm: np.ndarray) -> dict[str, dict[str, float | None]]:
    """Precision, recall (sensitivity), specificity, and F1 per class, in
    percent; a metric whose denominator is empty comes back as None."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    out = {}
    for i, name in enumerate(CLASS_NAMES[: cm.shape[0]]):
        tp = cm[i, i]
        fn = cm[i].sum() - tp
        fp = cm[:, i].sum() - tp
        tn = total - tp - fn - fp
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        specificity = _ratio(tn, tn + fp)
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        out[name] = {
            "precision": None if precision is None else 100 * precision,
            "recall": None if recall is None else 100 * recall,
            "specificity": None if specificity is None else 100 * specificity,
            "f1": None if f1 is None else 100 * f1,
        }
    return out


def overall_metrics(cm: np.ndarray) -> dict[str, float | None]:
    """Accuracy and MF1 in percent, Cohen's kappa in [-1, 1]."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    accuracy = 100.0 * np.trace(cm) / total

    f1s = [m["f1"] for m in per_class_metrics(cm).values()]
    mf1 = None if any(f is None for f in f1s) else float(np.mean(f1s))

    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / (total * total)
    kappa = None if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return {"accuracy": accuracy, "mf1": mf1, "kappa": kappa}


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class: dict[str, dict[str, float | None]]
    accuracy: float
    mf1: float | None
    kappa: float | None

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "MetricsReport":
        overall = overall_metrics(cm)
        return cls(
            confusion=np.asarray(cm, dtype=np.int64),
            per_class=per_class_metrics(cm),
            accuracy=overall["accuracy"],
            mf1=overall["mf1"],
            kappa=overall["kappa"],
        )

    def to_json(self) -> str:
        def fmt(v):
            return None if v is None else round(v, 4)

        payload = {
            "schema": "sleepseq-report/1",
            "confusion": self.confusion.tolist(),
            "classes": list(CLASS_NAMES),
            "per_class": {
                name: {k: fmt(v) for k, v in vals.items()}
                for name, vals in self.per_class.items()
            },
            "overall": {
                "accuracy": fmt(self.accuracy),
                "mf1": fmt(self.mf1),
                "kappa": fmt(self.kappa),
                "total": int(self.confusion.sum()),
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def format_text(self) -> str:
        """Confusion matrix with per-class columns, two-decimal percents."""

        def cell(v, width=8):
            return ("n/a" if v is None else f"{v:.2f}").rjust(width)

        lines = []
        header = "Actual".ljust(8) + "".join(n.rjust(8) for n in CLASS_NAMES)
        header += "Pre".rjust(9) + "Rec".rjust(8) + "Spe".rjust(8) + "F1".rjust(8)
        lines.append(header)
        for i, name in enumerate(CLASS_NAMES):
            row = name.ljust(8) + "".join(str(int(c)).rjust(8) for c in self.confusion[i])
            m = self.per_class[name]
            row += " " + cell(m["precision"]) + cell(m["recall"])
            row += cell(m["specificity"]) + cell(m["f1"])
            lines.append(row)
        kappa = "n/a" if self.kappa is None else f"{self.kappa:.2f}"
        mf1 = "n/a" if self.mf1 is None else f"{self.mf1:.2f}"
        lines.append(f"accuracy {self.accuracy:.2f}%  MF1 {mf1}  kappa {kappa}  "
                     f"total {int(self.confusion.sum())}")
        return "\n".join(lines)


def aggregate_folds(fold_results: list[tuple], n_classes: int = N_CLASSES
                    ) -> tuple[np.ndarray, MetricsReport]:
    """Pool per-fold (pred, truth[, subjects]) into one global matrix.

    Folds must be disjoint by subject when subject lists are supplied.
    """
    seen: set[str] = set()
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for result in fold_results:
        pred, truth = result[0], result[1]
        subjects = result[2] if len(result) > 2 else None
        if subjects is not None:
            dup = seen & set(subjects)
            if dup:
                raise MetricsError(f"subjects appear in more than one fold: {sorted(dup)}")
            seen |= set(subjects)
        cm += confusion(pred, truth, n_classes)
    return cm, MetricsReport.from_confusion(cm)
