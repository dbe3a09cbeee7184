"""Confusion-matrix metrics and their text/json/csv reports.

DDoS (label 1) is the positive class.  Ratios whose denominator is zero are
reported as 0 rather than NaN.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatrix, LengthMismatch

REPORT_VERSION = 1
CSV_HEADER = ("tp", "fp", "tn", "fn", "precision", "recall", "f1", "accuracy",
              "inference_seconds", "samples")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def flipped(self):
        """The same matrix with benign treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    cm: ConfusionMatrix
    inference_seconds: float = 0.0

    @property
    def samples(self):
        return self.cm.total


def confusion_matrix(predicted, truth):
    predicted = np.asarray(predicted, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if predicted.shape != truth.shape:
        raise LengthMismatch(f"{predicted.size} predictions vs {truth.size} labels")
    return ConfusionMatrix(
        tp=int(np.count_nonzero((predicted == 1) & (truth == 1))),
        fp=int(np.count_nonzero((predicted == 1) & (truth == 0))),
        tn=int(np.count_nonzero((predicted == 0) & (truth == 0))),
        fn=int(np.count_nonzero((predicted == 0) & (truth == 1))),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def f1_score(precision, recall):
    """Harmonic mean of precision and recall (0 when both are 0)."""
    return _ratio(2 * precision * recall, precision + recall)


def compute_metrics(cm, elapsed=0.0):
    if cm.total == 0:
        raise EmptyMatrix("no evaluated samples")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    return Metrics(precision, recall, f1_score(precision, recall),
                   (cm.tp + cm.tn) / cm.total, cm, float(elapsed))


def to_dict(m):
    return {
        "version": REPORT_VERSION,
        "counts": {"tp": m.cm.tp, "fp": m.cm.fp, "tn": m.cm.tn, "fn": m.cm.fn},
        "metrics": {"precision": m.precision, "recall": m.recall, "f1": m.f1,
                    "accuracy": m.accuracy},
        "inference_seconds": m.inference_seconds,
        "samples": m.samples,
    }


def from_dict(doc):
    if doc.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {doc.get('version')!r}")
    c, k = doc["counts"], doc["metrics"]
    cm = ConfusionMatrix(int(c["tp"]), int(c["fp"]), int(c["tn"]), int(c["fn"]))
    return Metrics(k["precision"], k["recall"], k["f1"], k["accuracy"], cm,
                   doc["inference_seconds"])


def report(m, fmt="text"):
    if fmt == "json":
        return json.dumps(to_dict(m), indent=1) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerow([m.cm.tp, m.cm.fp, m.cm.tn, m.cm.fn, repr(m.precision), repr(m.recall),
                    repr(m.f1), repr(m.accuracy), repr(m.inference_seconds), m.samples])
        return buf.getvalue()
    if fmt == "text":
        lines = [
            f"Precision  {m.precision:.4f}",
            f"Recall     {m.recall:.4f}",
            f"F1 Score   {m.f1:.4f}",
            f"Accuracy   {m.accuracy:.4f}",
            f"TP {m.cm.tp}  FP {m.cm.fp}  TN {m.cm.tn}  FN {m.cm.fn}",
            f"{m.samples} samples classified in {m.inference_seconds:.3f} s",
        ]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
