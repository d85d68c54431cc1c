"""Classification metrics: confusion matrix, macro scores and one-vs-rest ROC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REPORT_SCHEMA = "vsfusion.report/1"


def confusion(preds, labels, n_classes: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds and labels differ in length: {preds.shape} vs {labels.shape}")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise IndexError(f"{name} index out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def macro_metrics(cm: np.ndarray) -> dict:
    """Accuracy plus per-class and unweighted-mean precision, recall and F1.

    A class with no true samples scores recall 0 and is listed under
    ``empty_classes``; a class never predicted scores precision 0.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(float)
    rows = cm.sum(axis=1).astype(float)
    cols = cm.sum(axis=0).astype(float)
    recall = np.divide(tp, rows, out=np.zeros_like(tp), where=rows > 0)
    precision = np.divide(tp, cols, out=np.zeros_like(tp), where=cols > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {
        "accuracy": float(tp.sum() / total),
        "macro_recall": float(recall.mean()),
        "macro_precision": float(precision.mean()),
        "macro_f1": float(f1.mean()),
        "per_class": [{"precision": float(p), "recall": float(r), "f1": float(f), "support": int(n)}
                      for p, r, f, n in zip(precision, recall, f1, rows)],
        "empty_classes": [int(c) for c in np.flatnonzero(rows == 0)],
    }


@dataclass
class RocCurve:
    fpr: list[float]
    tpr: list[float]
    thresholds: list[float]
    auc: float | None
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"fpr": self.fpr, "tpr": self.tpr, "thresholds": self.thresholds,
                "auc": self.auc, "degenerate": self.degenerate}


def roc_curve(scores, positive) -> RocCurve:
    """ROC points for a binary problem, sweeping every distinct score.

    Tied scores enter together, so the trapezoid area counts ties as half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return RocCurve([], [], [], None, True)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(p)[ends]
    fp = np.cumsum(~p)[ends]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr.tolist(), tpr.tolist(), s[ends].tolist(), auc)


def roc_ovr(scores: np.ndarray, labels) -> list[RocCurve]:
    """One-vs-rest ROC per class, using column c of ``scores`` for class c."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return [roc_curve(scores[:, c], labels == c) for c in range(scores.shape[1])]


@dataclass
class EvalReport:
    accuracy: float
    macro_recall: float
    macro_f1: float
    per_class: list[dict]
    confusion: list[list[int]]
    roc: list[RocCurve]
    n_samples: int
    param_count: int = 0
    param_mb: float = 0.0
    fold: int | None = None
    seed: int | None = None
    config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "accuracy": self.accuracy,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "roc": [r.to_dict() for r in self.roc],
            "n_samples": self.n_samples,
            "param_count": self.param_count,
            "param_mb": self.param_mb,
            "fold": self.fold,
            "seed": self.seed,
            "config": self.config,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["accuracy"], d["macro_recall"], d["macro_f1"], d["per_class"], d["confusion"],
                   [RocCurve(**r) for r in d["roc"]], d["n_samples"], d["param_count"],
                   d["param_mb"], d["fold"], d["seed"], d["config"], d["warnings"])

    def auc(self, c: int) -> float | None:
        return self.roc[c].auc


def evaluate(probs: np.ndarray, labels, n_classes: int, **meta) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    cm = confusion(np.argmax(probs, axis=1), labels, n_classes)
    m = macro_metrics(cm)
    curves = roc_ovr(probs, labels)
    warnings = [f"class {c} has no samples" for c in m["empty_classes"]]
    warnings += [f"class {c}: ROC undefined (single-class problem)"
                 for c, r in enumerate(curves) if r.degenerate]
    return EvalReport(m["accuracy"], m["macro_recall"], m["macro_f1"], m["per_class"],
                      cm.tolist(), curves, int(labels.size), warnings=warnings, **meta)
