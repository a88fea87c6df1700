"""Confusion matrices and support-weighted precision/recall/F1 reporting.

Support-weighted averaging is the scheme that reproduces the published attack
sweep tables; macro averaging does not (checked in tests). 0/0 metric cells
are defined as 0 so degenerate matrices (a class never predicted) stay valid.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

__all__ = ["ConfusionMatrix", "MetricRow", "confusion", "weighted_prf", "emit_table"]

CSV_COLUMNS = ["TN", "FP", "FN", "TP", "Precision", "Recall", "F1", "AvgRuntimeSeconds"]
MARKDOWN_HEADERS = [
    "True Negative",
    "False Positive",
    "False Negative",
    "True Positive",
    "Precision",
    "Recall",
    "F-1 Score",
    "Average Run Time (s)",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total


@dataclass(frozen=True)
class MetricRow:
    precision: float
    recall: float
    f1: float
    support_negative: int
    support_positive: int

    def rounded(self, digits: int = 2) -> tuple[float, float, float]:
        return (round(self.precision, digits), round(self.recall, digits), round(self.f1, digits))


def confusion(labels, predictions) -> ConfusionMatrix:
    """2x2 counts with building (1) as the positive class."""
    labels = np.asarray(labels, dtype=int)
    predictions = np.asarray(predictions, dtype=int)
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape} vs {predictions.shape}")
    if not (np.isin(labels, (0, 1)).all() and np.isin(predictions, (0, 1)).all()):
        raise ValueError("labels and predictions must be 0/1")
    return ConfusionMatrix(
        tn=int(((labels == 0) & (predictions == 0)).sum()),
        fp=int(((labels == 0) & (predictions == 1)).sum()),
        fn=int(((labels == 1) & (predictions == 0)).sum()),
        tp=int(((labels == 1) & (predictions == 1)).sum()),
    )


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def weighted_prf(cm: ConfusionMatrix) -> MetricRow:
    """Per-class precision/recall/F1 combined by class-support weights."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    support0 = cm.tn + cm.fp
    support1 = cm.tp + cm.fn
    p1 = _safe_div(cm.tp, cm.tp + cm.fp)
    r1 = _safe_div(cm.tp, support1)
    f1_1 = _safe_div(2 * p1 * r1, p1 + r1)
    p0 = _safe_div(cm.tn, cm.tn + cm.fn)
    r0 = _safe_div(cm.tn, support0)
    f1_0 = _safe_div(2 * p0 * r0, p0 + r0)
    total = cm.total
    return MetricRow(
        precision=(support0 * p0 + support1 * p1) / total,
        recall=(support0 * r0 + support1 * r1) / total,
        f1=(support0 * f1_0 + support1 * f1_1) / total,
        support_negative=support0,
        support_positive=support1,
    )


def _row_values(label: str, cm: ConfusionMatrix, metric: MetricRow, runtime: float | None):
    rt = "" if runtime is None else f"{runtime:.4f}"
    return [
        label,
        str(cm.tn),
        str(cm.fp),
        str(cm.fn),
        str(cm.tp),
        f"{metric.precision:.2f}",
        f"{metric.recall:.2f}",
        f"{metric.f1:.2f}",
        rt,
    ]


def emit_table(rows, fmt: str = "csv") -> bytes:
    """Render (label, ConfusionMatrix, MetricRow, runtime|None) rows.

    Column order is fixed, floats are formatted to a fixed width, so output
    bytes are deterministic.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to emit")
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(",".join(["Label"] + CSV_COLUMNS) + "\n")
        for label, cm, metric, runtime in rows:
            buf.write(",".join(_row_values(label, cm, metric, runtime)) + "\n")
        return buf.getvalue().encode()
    if fmt == "json":
        payload = []
        for label, cm, metric, runtime in rows:
            payload.append(
                {
                    "label": label,
                    "tn": cm.tn,
                    "fp": cm.fp,
                    "fn": cm.fn,
                    "tp": cm.tp,
                    "precision": round(metric.precision, 6),
                    "recall": round(metric.recall, 6),
                    "f1": round(metric.f1, 6),
                    "avg_runtime_seconds": runtime,
                }
            )
        return json.dumps(payload, indent=2, sort_keys=True).encode()
    if fmt == "markdown":
        header = "| " + " | ".join([""] + MARKDOWN_HEADERS) + " |"
        sep = "|" + "---|" * (len(MARKDOWN_HEADERS) + 1)
        lines = [header, sep]
        for label, cm, metric, runtime in rows:
            lines.append("| " + " | ".join(_row_values(label, cm, metric, runtime)) + " |")
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown table format '{fmt}'")


def rows_from_json(blob: bytes):
    """Inverse of the json emitter, for round-trips and the report command."""
    rows = []
    for item in json.loads(blob.decode()):
        cm = ConfusionMatrix(tn=item["tn"], fp=item["fp"], fn=item["fn"], tp=item["tp"])
        rows.append((item["label"], cm, weighted_prf(cm), item["avg_runtime_seconds"]))
    return rows
