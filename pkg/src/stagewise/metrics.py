"""Confusion matrix and per-class screening metrics.

Metrics are percentages computed in 64-bit (accuracy exactly, as a
rational) and rounded half-to-even to two decimals.  A class with an empty
row or column yields an explicit ``None`` ("undefined") rather than zero:
with a handful of positive cases in the rare class, an empty slice must
not silently read as failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .data import CLASS_NAMES, BatchStream
from .errors import ContractError

Metric = Optional[float]  # None marks an undefined (0/0) metric


def _round2(x: float) -> float:
    return float(round(x, 2))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                    # (K, K) int64, rows = true class
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ContractError(
                f"confusion matrix shape {self.counts.shape} != ({k}, {k})")
        if (self.counts < 0).any():
            raise ContractError("confusion matrix entries must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def k(self) -> int:
        return len(self.class_names)


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int],
                     k: int = len(CLASS_NAMES),
                     class_names: tuple[str, ...] = CLASS_NAMES) -> ConfusionMatrix:
    """Tally cm[true][predicted] over paired predictions and labels."""
    if len(predictions) != len(labels):
        raise ContractError(
            f"{len(predictions)} predictions vs {len(labels)} labels")
    counts = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(predictions, labels):
        if not (0 <= p < k and 0 <= t < k):
            raise ContractError(f"class index out of range: pred={p} true={t}")
        counts[t, p] += 1
    return ConfusionMatrix(counts, class_names)


def per_class_metrics(cm: ConfusionMatrix) -> dict[str, dict[str, Metric]]:
    """Recall, PPV, and F1 per class, as 2-decimal percentages or None."""
    out: dict[str, dict[str, Metric]] = {}
    rows = cm.counts.sum(axis=1)
    cols = cm.counts.sum(axis=0)
    for i, name in enumerate(cm.class_names):
        diag = float(cm.counts[i, i])
        recall = diag / rows[i] * 100.0 if rows[i] > 0 else None
        ppv = diag / cols[i] * 100.0 if cols[i] > 0 else None
        if recall is not None and ppv is not None and (recall + ppv) > 0:
            f1 = 2.0 * ppv * recall / (ppv + recall)
        elif recall is not None and ppv is not None:
            f1 = 0.0
        else:
            f1 = None
        out[name] = {
            "recall": _round2(recall) if recall is not None else None,
            "ppv": _round2(ppv) if ppv is not None else None,
            "f1": _round2(f1) if f1 is not None else None,
        }
    return out


def accuracy(cm: ConfusionMatrix) -> float:
    """100 * trace / total, rounded half-to-even after exact arithmetic."""
    if cm.total == 0:
        raise ContractError("accuracy of an empty confusion matrix")
    exact = Fraction(100 * int(np.trace(cm.counts)), cm.total)
    return float(round(exact, 2))


@dataclass
class EvalReport:
    cm: ConfusionMatrix
    per_class: dict[str, dict[str, Metric]]
    accuracy: float
    n: int

    def to_json_dict(self) -> dict:
        return {
            "classes": list(self.cm.class_names),
            "confusion": self.cm.counts.tolist(),
            "per_class": self.per_class,
            "accuracy": self.accuracy,
            "n": self.n,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "EvalReport":
        cm = ConfusionMatrix(np.asarray(d["confusion"]),
                             tuple(d["classes"]))
        return EvalReport(cm=cm, per_class=d["per_class"],
                          accuracy=d["accuracy"], n=d["n"])


def report_from_cm(cm: ConfusionMatrix) -> EvalReport:
    return EvalReport(cm=cm, per_class=per_class_metrics(cm),
                      accuracy=accuracy(cm), n=cm.total)


def evaluate(model, stream: BatchStream) -> EvalReport:
    """Argmax predictions over the ordered test split, in eval mode.

    Ties break toward the lowest class index; no augmentation runs, so two
    calls on the same weights produce identical reports.
    """
    if stream.split_name == "train":
        raise ContractError("evaluate expects a test stream")
    preds: list[int] = []
    labels: list[int] = []
    for batch in stream.epoch(0):
        logits = model.forward(batch.images, training=False)
        preds.extend(int(i) for i in np.argmax(logits.data, axis=1))
        labels.extend(batch.labels)
    if not labels:
        raise ContractError("empty test split")
    cm = confusion_matrix(preds, labels, k=len(stream.manifest.class_names),
                          class_names=tuple(stream.manifest.class_names))
    return report_from_cm(cm)


# ---------------------------------------------------------------------------
# plain-text table
# ---------------------------------------------------------------------------

_ROW_TITLES = (
    ("recall", "Recall (Sensitivity) %"),
    ("ppv", "Positive Predictive Value (Precision) %"),
    ("f1", "F-1 score %"),
)


def format_table(report: EvalReport) -> str:
    """Text table with one column per class and the three metric rows."""
    names = report.cm.class_names
    title_w = max(len(t) for _, t in _ROW_TITLES)
    col_w = max(max(len(n) for n in names), 9)

    def fmt(value: Metric) -> str:
        return "undef" if value is None else f"{value:.2f}"

    lines = [
        " " * title_w + "  " + "  ".join(f"{n:>{col_w}}" for n in names),
    ]
    for key, title in _ROW_TITLES:
        cells = "  ".join(
            f"{fmt(report.per_class[n][key]):>{col_w}}" for n in names)
        lines.append(f"{title:<{title_w}}  {cells}")
    lines.append(f"Accuracy: {report.accuracy:.2f}%  ({report.n} samples)")
    return "\n".join(lines)
