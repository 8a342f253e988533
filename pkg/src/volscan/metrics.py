"""ROC analysis for binary scores: AUC, the Youden operating point and
confusion-matrix summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .fileio import csv_text, fmt

REPORT_HEADER = ("model", "auc", "threshold", "sensitivity", "specificity", "f1", "n_pos", "n_neg")
ROC_HEADER = ("fpr", "tpr", "threshold")


def _inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise MetricError(f"ROC needs both classes; got {int(y.sum())} positives and {int((~y).sum())} negatives")
    return s, y


@dataclass
class RocCurve:
    """Points ordered by decreasing threshold; index 0 is the (0, 0) corner
    with threshold +inf."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    n_pos: int
    n_neg: int


def roc_curve(scores, labels) -> RocCurve:
    s, y = _inputs(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # one point per distinct score: tied scores enter together
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    p, n = int(y.sum()), int((~y).sum())
    return RocCurve(np.r_[np.inf, s[last]], np.r_[0, tp] / p, np.r_[0, fp] / n, p, n)


def auc_from_roc(roc: RocCurve) -> float:
    return float(np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) / 2))


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC (ties count one half, as Mann-Whitney)."""
    return auc_from_roc(roc_curve(scores, labels))


def auc_oracle(scores, labels) -> float:
    """Brute-force pair count over every positive/negative pair."""
    s, y = _inputs(scores, labels)
    pos, neg = s[y], s[~y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (pos.size * neg.size)


@dataclass
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    f1: float
    youden: float


def youden_point(roc: RocCurve, scores=None, labels=None) -> OperatingPoint:
    """Threshold maximising TPR - FPR; ties go to the higher threshold.

    A volume is called positive when its score is >= the threshold. F1 is
    filled in when the scores and labels behind ``roc`` are supplied.
    """
    j = roc.tpr - roc.fpr
    # J values equal up to rounding (0.8 - 0.3 vs 0.6 - 0.1) count as tied;
    # the first of them has the highest threshold
    k = int(np.nonzero(j >= j.max() - 1e-12)[0][0])
    thr = float(roc.thresholds[k])
    f1 = confusion_metrics(scores, labels, thr)["f1"] if scores is not None else float("nan")
    return OperatingPoint(thr, float(roc.tpr[k]), float(1 - roc.fpr[k]), f1, float(j[k]))


def confusion_counts(scores, labels, threshold):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pred = s >= threshold
    return (int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & y)), int(np.sum(~pred & ~y)))


def rates(tp, fp, fn, tn):
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * prec * sens / (prec + sens) if prec + sens else 0.0
    return {"sensitivity": sens, "specificity": spec, "precision": prec, "f1": f1}


def confusion_metrics(scores, labels, threshold):
    """Sensitivity, specificity, precision and F1 with ``score >= threshold``
    called positive."""
    return rates(*confusion_counts(scores, labels, threshold))


@dataclass
class EvalReport:
    model: str
    auc: float
    threshold: float
    sensitivity: float
    specificity: float
    f1: float
    n_pos: int
    n_neg: int

    def row(self):
        return [self.model] + [fmt(float(v)) for v in (self.auc, self.threshold, self.sensitivity,
                                                        self.specificity, self.f1)] + [self.n_pos, self.n_neg]


def evaluate_scores(model_name, scores, labels, threshold) -> EvalReport:
    """AUC of ``scores`` plus confusion metrics at a threshold fixed elsewhere
    (normally the validation Youden point)."""
    s, y = _inputs(scores, labels)
    m = confusion_metrics(s, y, threshold)
    return EvalReport(model_name, auc(s, y), float(threshold), m["sensitivity"], m["specificity"], m["f1"],
                      int(y.sum()), int((~y).sum()))


def report_csv(reports) -> str:
    return csv_text(REPORT_HEADER, [r.row() for r in reports])


def roc_csv(roc: RocCurve) -> str:
    return csv_text(ROC_HEADER, [(fmt(float(f)), fmt(float(t)), fmt(float(h)))
                                 for f, t, h in zip(roc.fpr, roc.tpr, roc.thresholds)])
