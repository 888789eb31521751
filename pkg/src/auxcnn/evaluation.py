"""Confusion-matrix metrics, ROC/AUC, run aggregation and the unpaired t-test.

Per-class metrics are one-vs-rest; the headline numbers are unweighted
macro-averages (per-class values are kept alongside). Degenerate 0/0 ratios
resolve to 0 with a warning. AUC is the rank-based (Mann-Whitney) statistic
with half credit for score ties. The t-test is Welch's, one-sided for
mean(a) > mean(b).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import stdtr

from .errors import ShapeError

log = logging.getLogger(__name__)

METRIC_NAMES = ("precision", "sensitivity", "specificity", "f1")


def confusion_matrix(predictions, labels, class_count: int) -> np.ndarray:
    """K x K counts; rows are ground truth, columns are predictions."""
    preds = np.asarray(predictions, dtype=np.int64)
    gts = np.asarray(labels, dtype=np.int64)
    if preds.shape != gts.shape or preds.ndim != 1:
        raise ShapeError("predictions and labels must be equal-length 1-D")
    if preds.size and (preds.min() < 0 or preds.max() >= class_count
                       or gts.min() < 0 or gts.max() >= class_count):
        raise ShapeError("label or prediction out of range")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (gts, preds), 1)
    return cm


def _ratio(num, den, what):
    if den == 0:
        log.warning("0/0 in %s resolved to 0 by convention", what)
        return 0.0
    return num / den


@dataclass
class MetricsReport:
    class_count: int
    sample_count: int
    accuracy: float
    per_class: dict[str, list[float]]   # metric name -> per-class values
    macro: dict[str, float]
    auc: float | None = None

    def as_dict(self) -> dict:
        out = {
            "class_count": self.class_count,
            "sample_count": self.sample_count,
            "accuracy": self.accuracy,
            "macro": dict(self.macro),
            "per_class": {k: list(v) for k, v in self.per_class.items()},
        }
        if self.auc is not None:
            out["auc"] = self.auc
        return out

    def flat(self) -> dict[str, float]:
        """One row of scalar metrics (macro values plus accuracy and AUC)."""
        row = {"accuracy": self.accuracy}
        row.update({f"macro_{k}": v for k, v in self.macro.items()})
        if self.auc is not None:
            row["auc"] = self.auc
        return row

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            class_count=data["class_count"],
            sample_count=data["sample_count"],
            accuracy=data["accuracy"],
            per_class={k: list(v) for k, v in data["per_class"].items()},
            macro=dict(data["macro"]),
            auc=data.get("auc"),
        )


def classification_metrics(cm, auc: float | None = None) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError("confusion matrix must be square")
    total = int(cm.sum())
    if total <= 0:
        raise ShapeError("confusion matrix is empty")
    k = cm.shape[0]
    per = {m: [] for m in METRIC_NAMES}
    for c in range(k):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        precision = _ratio(tp, tp + fp, f"precision[{c}]")
        sensitivity = _ratio(tp, tp + fn, f"sensitivity[{c}]")
        specificity = _ratio(tn, tn + fp, f"specificity[{c}]")
        f1 = _ratio(2 * precision * sensitivity, precision + sensitivity, f"f1[{c}]")
        per["precision"].append(precision)
        per["sensitivity"].append(sensitivity)
        per["specificity"].append(specificity)
        per["f1"].append(f1)
    macro = {m: float(np.mean(v)) for m, v in per.items()}
    return MetricsReport(k, total, float(np.trace(cm) / total), per, macro, auc)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC of positive-class scores with tie half-credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be equal-length 1-D")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ShapeError("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr, threshold) triples swept over descending unique scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ShapeError("roc_curve needs both classes present")
    points = [(0.0, 0.0, float("inf"))]
    for thr in np.unique(scores)[::-1]:
        called = scores >= thr
        tpr = (called & pos).sum() / n_pos
        fpr = (called & ~pos).sum() / n_neg
        points.append((float(fpr), float(tpr), float(thr)))
    return points


def welch_ttest_one_sided(sample_a, sample_b):
    """Welch statistic and one-sided p for mean(a) > mean(b).

    With both variances zero: p = 0.5 on equal means (continuity convention),
    otherwise 0 or 1 by the sign of the difference.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ShapeError("each sample needs at least 2 observations")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    diff = a.mean() - b.mean()
    se2 = va / a.size + vb / b.size
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 0.5
        return float(np.copysign(np.inf, diff)), 0.0 if diff > 0 else 1.0
    t = diff / np.sqrt(se2)
    df = se2 ** 2 / ((va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1))
    p = float(stdtr(df, -t))  # P(T >= t)
    return float(t), p


@dataclass
class RunAggregate:
    run_count: int
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)   # population std

    def as_dict(self):
        return {"run_count": self.run_count, "mean": dict(self.mean), "std": dict(self.std)}


def aggregate_runs(reports: list[MetricsReport]) -> RunAggregate:
    if not reports:
        raise ShapeError("aggregate_runs needs at least one report")
    k = reports[0].class_count
    if any(r.class_count != k for r in reports):
        raise ShapeError("reports disagree on class count")
    keys = reports[0].flat().keys()
    agg = RunAggregate(run_count=len(reports))
    for key in keys:
        vals = np.array([r.flat()[key] for r in reports], dtype=np.float64)
        agg.mean[key] = float(vals.mean())
        agg.std[key] = float(vals.std())
    return agg


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_metrics_files(report: MetricsReport, out_dir, stem="metrics") -> None:
    """JSON mirror plus a long-format CSV (metric,class,value)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "class", "value"])
        writer.writerow(["accuracy", "", repr(report.accuracy)])
        for m in METRIC_NAMES:
            for c, v in enumerate(report.per_class[m]):
                writer.writerow([m, c, repr(v)])
            writer.writerow([f"macro_{m}", "", repr(report.macro[m])])
        if report.auc is not None:
            writer.writerow(["auc", "", repr(report.auc)])
        writer.writerow(["count", "", report.sample_count])


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            writer.writerow([repr(fpr), repr(tpr), repr(thr)])
