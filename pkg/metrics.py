"""
Threshold-group metrics for imbalanced binary detection.

Scores are ranked in descending order and equal scores form one bucket
that crosses the threshold together, so AP, AUC-ROC and both curves are
invariant to the order of tied items.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd

from utils.errors import ParameterError, UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredPredictions:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ParameterError(f"scores {self.scores.shape} and labels {self.labels.shape} must be equal-length vectors")
        if not np.isin(self.labels, (0, 1)).all():
            raise ParameterError("labels must be 0 or 1")

    @classmethod
    def from_arrays(cls, scores, labels) -> "ScoredPredictions":
        return cls(np.asarray(scores, dtype=np.float64).ravel(), np.asarray(labels).astype(np.int64).ravel())

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(len(self.labels) - self.labels.sum())


@dataclass(frozen=True)
class ScalarMetrics:
    """None marks a metric whose denominator is zero"""
    accuracy: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class EvalReport:
    ap: float
    auc_roc: float
    accuracy: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    threshold: float
    n_pos: int
    n_neg: int
    pr_curve: pd.DataFrame
    roc_curve: pd.DataFrame

    def to_dict(self) -> Dict[str, object]:
        return {
            "ap": self.ap,
            "auc_roc": self.auc_roc,
            "accuracy": self.accuracy,
            "recall": self.recall,
            "specificity": self.specificity,
            "precision": self.precision,
            "threshold": self.threshold,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def _threshold_groups(preds: ScoredPredictions):
    """Per distinct score (descending): threshold, cumulative TP and FP"""
    order = np.argsort(-preds.scores, kind="mergesort")
    scores = preds.scores[order]
    labels = preds.labels[order]
    last_in_group = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    tps = np.cumsum(labels)[last_in_group]
    fps = (last_in_group + 1) - tps
    return scores[last_in_group], tps.astype(np.float64), fps.astype(np.float64)


def ap_score(preds: ScoredPredictions) -> float:
    """sum over thresholds of (R_k - R_{k-1}) * P_k, with R_0 = 0"""
    if preds.n_pos == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")
    _, tps, fps = _threshold_groups(preds)
    precision = tps / (tps + fps)
    recall = tps / preds.n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_curve(preds: ScoredPredictions) -> pd.DataFrame:
    """(threshold, precision, recall) at every distinct score, thresholds descending"""
    if preds.n_pos == 0:
        raise UndefinedMetricError("precision-recall curve is undefined without positive labels")
    thresholds, tps, fps = _threshold_groups(preds)
    return pd.DataFrame({"threshold": thresholds, "precision": tps / (tps + fps), "recall": tps / preds.n_pos})


def roc_auc(preds: ScoredPredictions):
    """Trapezoidal AUC over (FPR, TPR) points plus the curve, starting at (0, 0)"""
    if preds.n_pos == 0 or preds.n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both classes")
    thresholds, tps, fps = _threshold_groups(preds)
    tpr = np.r_[0.0, tps / preds.n_pos]
    fpr = np.r_[0.0, fps / preds.n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    curve = pd.DataFrame({"threshold": np.r_[np.inf, thresholds], "fpr": fpr, "tpr": tpr})
    return auc, curve


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def scalar_metrics(preds: ScoredPredictions, threshold: float = 0.0) -> ScalarMetrics:
    """Confusion counts with score > threshold predicted positive"""
    if len(preds.scores) == 0:
        raise ParameterError("cannot compute metrics over zero predictions")
    predicted = preds.scores > threshold
    actual = preds.labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    return ScalarMetrics(
        accuracy=_ratio(tp + tn, tp + fp + tn + fn),
        recall=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        precision=_ratio(tp, tp + fp),
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


def evaluate(scores, labels, threshold: float = 0.0) -> EvalReport:
    preds = ScoredPredictions.from_arrays(scores, labels)
    scalars = scalar_metrics(preds, threshold)
    auc, roc = roc_auc(preds)
    return EvalReport(
        ap=ap_score(preds),
        auc_roc=auc,
        accuracy=scalars.accuracy,
        recall=scalars.recall,
        specificity=scalars.specificity,
        precision=scalars.precision,
        threshold=threshold,
        n_pos=preds.n_pos,
        n_neg=preds.n_neg,
        pr_curve=pr_curve(preds),
        roc_curve=roc,
    )


def write_eval_report(report: EvalReport, directory: str, prefix: str) -> Dict[str, str]:
    """<prefix>_eval.json plus <prefix>_pr_curve.csv and <prefix>_roc_curve.csv"""
    os.makedirs(directory, exist_ok=True)
    paths = {
        "report": os.path.join(directory, f"{prefix}_eval.json"),
        "pr_curve": os.path.join(directory, f"{prefix}_pr_curve.csv"),
        "roc_curve": os.path.join(directory, f"{prefix}_roc_curve.csv"),
    }
    with open(paths["report"], "w", encoding="utf-8") as handle:
        json.dump(report.to_dict(), handle, sort_keys=True, indent=2)
        handle.write("\n")
    report.pr_curve.to_csv(paths["pr_curve"], index=False, float_format="%.10g")
    report.roc_curve.to_csv(paths["roc_curve"], index=False, float_format="%.10g")
    logger.info(f"📊 {prefix}: AP {report.ap:.4f}, AUC-ROC {report.auc_roc:.4f}")
    return paths
