"""Confusion matrices and classification metrics: precision/recall/F-beta,
macro/weighted/micro aggregation, ROC curves and trapezoidal AUC.

0/0 cases follow the "0 with warning" convention; every report records it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UndefinedMetricError

ZERO_DIV_NOTE = "0/0 metric values reported as 0 by convention"


@dataclass
class ConfusionMatrix:
    classes: list[str]
    counts: np.ndarray        # counts[actual][predicted]

    @classmethod
    def from_labels(cls, actual, predicted,
                    classes: Optional[Sequence[str]] = None) -> "ConfusionMatrix":
        actual = [str(v) for v in actual]
        predicted = [str(v) for v in predicted]
        if len(actual) != len(predicted):
            raise ShapeError(f"{len(actual)} actual vs "
                             f"{len(predicted)} predicted labels")
        if len(actual) == 0:
            raise ShapeError("need at least one labeled sample")
        if classes is None:
            classes = sorted(set(actual) | set(predicted))
        index = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for a, p in zip(actual, predicted):
            counts[index[a], index[p]] += 1
        return cls(classes=list(classes), counts=counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self, cls_name: str) -> int:
        return int(self.counts[self.classes.index(cls_name)].sum())

    def one_vs_rest(self, cls_name: str) -> tuple[int, int, int, int]:
        """(TP, FP, FN, TN) reducing this class against the rest."""
        i = self.classes.index(cls_name)
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


def _safe_div(num: float, den: float) -> float:
    return num / den if den != 0 else 0.0


def accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts)) / cm.total


def binary_metrics(cm: ConfusionMatrix, positive: str,
                   beta: float = 1.0) -> dict:
    tp, fp, fn, tn = cm.one_vs_rest(positive)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    b2 = beta * beta
    fbeta = _safe_div((1 + b2) * precision * recall, b2 * precision + recall)
    return {
        "precision": precision,
        "recall": recall,
        "fbeta": fbeta,
        "accuracy": _safe_div(tp + tn, tp + fp + fn + tn),
        "fpr": _safe_div(fp, fp + tn),
        "support": tp + fn,
    }


def aggregate(cm: ConfusionMatrix, metric: str = "fbeta",
              mode: str = "macro", beta: float = 1.0) -> float:
    """One-vs-rest per class, then macro/weighted/micro combine."""
    if mode == "micro":
        tp = fp = fn = 0
        for c in cm.classes:
            t, f, n, _ = cm.one_vs_rest(c)
            tp, fp, fn = tp + t, fp + f, fn + n
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        if metric == "precision":
            return precision
        if metric == "recall":
            return recall
        if precision == recall:
            return precision  # F-beta collapses to the common value
        b2 = beta * beta
        return _safe_div((1 + b2) * precision * recall,
                         b2 * precision + recall)
    per_class = [binary_metrics(cm, c, beta)[metric] for c in cm.classes]
    if mode == "macro":
        return float(np.mean(per_class))
    if mode == "weighted":
        weights = np.asarray([cm.support(c) for c in cm.classes], dtype=float)
        return float(np.dot(per_class, weights) / weights.sum())
    raise UndefinedMetricError(f"unknown aggregation mode {mode!r}")


def roc_auc(scores, actual, positive=1) -> tuple[list[tuple], float]:
    """ROC curve over all distinct thresholds (descending) plus trapezoid AUC.

    Curve points are (threshold, fpr, tpr) from (inf,0,0) to (min,1,1);
    tied scores produce one point per distinct score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray([1 if str(a) == str(positive) else 0 for a in actual])
    if len(scores) != len(truth):
        raise ShapeError("scores and labels length mismatch")
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    auc = 0.0
    prev_fpr, prev_tpr = 0.0, 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            tp += t[j]
            fp += 1 - t[j]
            j += 1
        fpr = fp / n_neg
        tpr = tp / n_pos
        points.append((float(s[i]), fpr, tpr))
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        prev_fpr, prev_tpr = fpr, tpr
        i = j
    return points, float(auc)


@dataclass
class MetricReport:
    beta: float
    accuracy: float
    per_class: dict[str, dict]
    macro: dict[str, float]
    weighted: dict[str, float]
    micro: dict[str, float]
    top_misclassified: list[tuple[str, str, int]]
    notes: list[str] = field(default_factory=lambda: [ZERO_DIV_NOTE])

    def as_dict(self) -> dict:
        return {
            "beta": self.beta,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "macro": self.macro,
            "weighted": self.weighted,
            "micro": self.micro,
            "top_misclassified": [list(t) for t in self.top_misclassified],
            "notes": self.notes,
        }


def report(cm: ConfusionMatrix, beta: float = 1.0,
           top_n: int = 10) -> MetricReport:
    per_class = {c: binary_metrics(cm, c, beta) for c in cm.classes}
    agg = {}
    for mode in ("macro", "weighted", "micro"):
        agg[mode] = {m: aggregate(cm, m, mode, beta)
                     for m in ("precision", "recall", "fbeta")}
    pairs = []
    for i, a in enumerate(cm.classes):
        for j, p in enumerate(cm.classes):
            if i != j and cm.counts[i, j] > 0:
                pairs.append((a, p, int(cm.counts[i, j])))
    pairs.sort(key=lambda t: (-t[2], t[0], t[1]))
    return MetricReport(beta=beta, accuracy=accuracy(cm),
                        per_class=per_class, macro=agg["macro"],
                        weighted=agg["weighted"], micro=agg["micro"],
                        top_misclassified=pairs[:top_n])


def render_text(rep: MetricReport, cm: ConfusionMatrix) -> str:
    out = io.StringIO()
    out.write(f"accuracy: {rep.accuracy:.6f}\n")
    out.write(f"beta: {rep.beta}\n\n")
    out.write("class               precision  recall     f-beta     support\n")
    for c in cm.classes:
        m = rep.per_class[c]
        out.write(f"{c:<18}  {m['precision']:<9.6f}  {m['recall']:<9.6f}  "
                  f"{m['fbeta']:<9.6f}  {m['support']}\n")
    for mode in ("macro", "weighted", "micro"):
        m = getattr(rep, mode)
        out.write(f"{mode:<18}  {m['precision']:<9.6f}  {m['recall']:<9.6f}  "
                  f"{m['fbeta']:<9.6f}  {cm.total}\n")
    if rep.top_misclassified:
        out.write("\ntop misclassifications (actual -> predicted: count)\n")
        for a, p, n in rep.top_misclassified:
            out.write(f"  {a} -> {p}: {n}\n")
    for note in rep.notes:
        out.write(f"\nnote: {note}\n")
    return out.getvalue()


def write_report_csv(rep: MetricReport, cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scope", "class", "precision", "recall", "fbeta",
                    "support"])
        for c in cm.classes:
            m = rep.per_class[c]
            w.writerow(["class", c, repr(m["precision"]), repr(m["recall"]),
                        repr(m["fbeta"]), m["support"]])
        for mode in ("macro", "weighted", "micro"):
            m = getattr(rep, mode)
            w.writerow([mode, "", repr(m["precision"]), repr(m["recall"]),
                        repr(m["fbeta"]), cm.total])
        w.writerow(["accuracy", "", repr(rep.accuracy), "", "", cm.total])


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            w.writerow([repr(thr), repr(fpr), repr(tpr)])


# metric registry: name -> fn(actual labels, predicted labels) -> float

def _metric(agg_metric: str, mode: str):
    def fn(actual, predicted):
        cm = ConfusionMatrix.from_labels(actual, predicted)
        return aggregate(cm, agg_metric, mode)
    return fn


METRICS = {
    "accuracy": lambda a, p: accuracy(ConfusionMatrix.from_labels(a, p)),
    "macro_f1": _metric("fbeta", "macro"),
    "weighted_f1": _metric("fbeta", "weighted"),
    "micro_f1": _metric("fbeta", "micro"),
    "macro_precision": _metric("precision", "macro"),
    "macro_recall": _metric("recall", "macro"),
}
