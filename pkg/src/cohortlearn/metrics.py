"""Binary classification metrics: AUPRC plus thresholded counts.

AUPRC integrates the precision-recall curve built by sweeping a descending
score threshold with tied scores grouped (each distinct score contributes one
curve point), accumulating recall-step * precision-at-step areas. Accuracy,
precision, recall, and F1 are computed at a fixed probability threshold
(prediction = score >= threshold).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class MetricsReport:
    auprc: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "auprc": self.auprc,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "threshold": self.threshold,
            "n_samples": self.n_samples,
        }


def auprc_score(scores, labels) -> float:
    """Area under the precision-recall curve (step-wise, ties grouped)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    total_pos = int(labels.sum())
    if total_pos == 0:
        raise ValidationError("AUPRC is undefined without positive labels")

    area = 0.0
    prev_recall = 0.0
    tp = 0
    seen = 0
    n = len(scores)
    k = 0
    while k < n:
        # Group all samples tied at this score into one curve point.
        j = k
        while j < n and sorted_scores[j] == sorted_scores[k]:
            tp += int(sorted_labels[j])
            seen += 1
            j += 1
        recall = tp / total_pos
        precision = tp / seen
        area += (recall - prev_recall) * precision
        prev_recall = recall
        k = j
    return area


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Full metric set; scores are probabilities in [0, 1], labels in {0, 1}."""
    scores = np.asarray(scores, dtype=np.float64)
    labels_arr = np.asarray(labels)
    if scores.ndim != 1 or labels_arr.ndim != 1:
        raise ValidationError("scores and labels must be 1-D")
    if len(scores) != len(labels_arr):
        raise ValidationError(
            f"scores ({len(scores)}) and labels ({len(labels_arr)}) differ in length"
        )
    if len(scores) == 0:
        raise ValidationError("need at least one sample")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores contain non-finite values")
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        raise ValidationError("scores must lie in [0, 1]")
    if not np.all(np.isin(labels_arr, (0, 1))):
        raise ValidationError("labels must be 0 or 1")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    labels_arr = labels_arr.astype(np.int64)

    auprc = auprc_score(scores, labels_arr)

    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels_arr == 1)))
    fp = int(np.sum(predicted & (labels_arr == 0)))
    fn = int(np.sum(~predicted & (labels_arr == 1)))
    tn = int(np.sum(~predicted & (labels_arr == 0)))
    accuracy = (tp + tn) / len(scores)
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return MetricsReport(
        auprc=float(auprc),
        accuracy=float(accuracy),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        threshold=float(threshold),
        n_samples=len(scores),
    )
