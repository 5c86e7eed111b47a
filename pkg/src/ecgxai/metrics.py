"""Confusion matrix, per-class precision/sensitivity/F1, and one-vs-rest ROC/AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ClassMetrics:
    precision: float
    sensitivity: float
    f1: float
    support: int
    degenerate: bool = False   # a zero denominator was reported as 0


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    degenerate: bool = False   # single-class ground truth, AUC undefined


@dataclass
class EvalReport:
    class_index: dict[str, int]
    confusion: np.ndarray                      # rows = true, columns = predicted
    per_class: dict[str, ClassMetrics]
    macro_avg: tuple[float, float, float]
    weighted_avg: tuple[float, float, float]
    accuracy: float
    roc: dict[str, RocCurve] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def _encode(labels, class_index: dict[str, int]) -> np.ndarray:
    out = np.empty(len(labels), dtype=np.int64)
    for i, label in enumerate(labels):
        if isinstance(label, str):
            if label not in class_index:
                raise ValueError(f"unknown label {label!r}")
            out[i] = class_index[label]
        else:
            value = int(label)
            if not 0 <= value < len(class_index):
                raise ValueError(f"label index {value} outside class_index")
            out[i] = value
    return out


def classification_report(true_labels, predicted_labels,
                          class_index: dict[str, int]) -> EvalReport:
    """Table-2-style report. Zero-denominator metrics are reported as 0 and flagged."""
    if len(true_labels) != len(predicted_labels):
        raise ValueError("label sequences must have equal length")
    y_true = _encode(true_labels, class_index)
    y_pred = _encode(predicted_labels, class_index)
    K = len(class_index)
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)

    per_class: dict[str, ClassMetrics] = {}
    for label, k in sorted(class_index.items(), key=lambda kv: kv[1]):
        tp = confusion[k, k]
        fp = confusion[:, k].sum() - tp
        fn = confusion[k, :].sum() - tp
        degenerate = False
        if tp + fp == 0:
            precision, degenerate = 0.0, True
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            sensitivity, degenerate = 0.0, True
        else:
            sensitivity = tp / (tp + fn)
        if precision + sensitivity == 0.0:
            f1, degenerate = 0.0, True
        else:
            f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
        per_class[label] = ClassMetrics(precision, sensitivity, f1,
                                        int(tp + fn), degenerate)

    metrics = np.array([[m.precision, m.sensitivity, m.f1] for m in per_class.values()])
    supports = np.array([m.support for m in per_class.values()], dtype=np.float64)
    macro = tuple(metrics.mean(axis=0))
    total = supports.sum()
    weighted = tuple((metrics * supports[:, None]).sum(axis=0) / total) if total else (0.0,) * 3
    accuracy = float(np.trace(confusion)) / len(y_true)
    return EvalReport(dict(class_index), confusion, per_class, macro, weighted, accuracy)


def roc_curve_binary(y_true: np.ndarray, scores: np.ndarray) -> RocCurve:
    """One curve from descending score thresholds; tied scores share a point."""
    y_true = np.asarray(y_true, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(y_true.sum())
    n_neg = len(y_true) - n_pos
    if n_pos == 0 or n_neg == 0:
        return RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]),
                        float("nan"), degenerate=True)
    order = np.argsort(-scores, kind="stable")
    sorted_true = y_true[order]
    sorted_scores = scores[order]
    tps = np.cumsum(sorted_true)
    fps = np.cumsum(~sorted_true)
    # keep only the last index of each tied-score run
    last_of_run = np.flatnonzero(np.diff(sorted_scores, append=np.nan) != 0.0)
    tpr = np.concatenate([[0.0], tps[last_of_run] / n_pos])
    fpr = np.concatenate([[0.0], fps[last_of_run] / n_neg])
    auc = float(np.trapz(tpr, fpr))
    return RocCurve(fpr, tpr, auc)


def roc_auc(true_labels, score_matrix, class_index: dict[str, int]) -> dict[str, RocCurve]:
    """One-vs-rest ROC per class from per-sample probability vectors."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    y_true = _encode(true_labels, class_index)
    if scores.ndim != 2 or scores.shape != (len(y_true), len(class_index)):
        raise ValueError(f"score matrix must be (n_samples, {len(class_index)})")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    return {label: roc_curve_binary(y_true == k, scores[:, k])
            for label, k in sorted(class_index.items(), key=lambda kv: kv[1])}


def evaluate(true_labels, predicted_labels, score_matrix,
             class_index: dict[str, int]) -> EvalReport:
    report = classification_report(true_labels, predicted_labels, class_index)
    report.roc = roc_auc(true_labels, score_matrix, class_index)
    return report


# --- export -------------------------------------------------------------------


def report_to_text(report: EvalReport) -> str:
    """Aligned table mirroring the per-class / macro / weighted / accuracy layout."""
    names = list(report.per_class)
    width = max(len("weighted avg"), *(len(n) for n in names)) + 2
    header = f"{'':{width}}Precision  Sensitivity  F1-score  Number of samples"
    rows = [header]
    for name, m in report.per_class.items():
        rows.append(f"{name:{width}}{m.precision:9.2f}  {m.sensitivity:11.2f}  "
                    f"{m.f1:8.2f}  {m.support:17d}")
    mp, ms, mf = report.macro_avg
    wp, ws, wf = report.weighted_avg
    rows.append(f"{'macro avg':{width}}{mp:9.2f}  {ms:11.2f}  {mf:8.2f}  {report.total:17d}")
    rows.append(f"{'weighted avg':{width}}{wp:9.2f}  {ws:11.2f}  {wf:8.2f}  {report.total:17d}")
    rows.append(f"{'accuracy':{width}}{report.accuracy:9.2f}  {'':11}  {'':8}  {report.total:17d}")
    return "\n".join(rows) + "\n"


def report_to_json(report: EvalReport) -> str:
    payload = {
        "class_index": report.class_index,
        "confusion": report.confusion.tolist(),
        "per_class": {
            name: {"precision": m.precision, "sensitivity": m.sensitivity,
                   "f1": m.f1, "support": m.support, "degenerate": m.degenerate}
            for name, m in report.per_class.items()
        },
        "macro_avg": list(report.macro_avg),
        "weighted_avg": list(report.weighted_avg),
        "accuracy": report.accuracy,
        "roc_auc": {name: (None if np.isnan(c.auc) else c.auc)
                    for name, c in report.roc.items()},
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def roc_points_to_csv(curve: RocCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("fpr,tpr\n")
        for f, t in zip(curve.fpr, curve.tpr):
            fh.write(f"{f:.10g},{t:.10g}\n")
