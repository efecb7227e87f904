"""Segmentation scores and continual-learning summaries of an R matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

THRESHOLD = 0.5
METRIC_NAMES = ("miou", "mf1", "mmae")


def seg_metrics(pred_mask, gt_mask, pred_prob):
    """Dataset-mean IoU, F1 and MAE over rows (one row per sample).

    A sample where both masks are empty scores IoU = F1 = 1.
    """
    P = np.asarray(pred_mask) > 0.5
    G = np.asarray(gt_mask) > 0.5
    prob = np.asarray(pred_prob, dtype=np.float64)
    if P.shape != G.shape or prob.shape != G.shape:
        raise ValueError(f"shape mismatch: {P.shape}, {G.shape}, {prob.shape}")
    P, G, prob = np.atleast_2d(P), np.atleast_2d(G), np.atleast_2d(prob)
    if P.shape[0] == 0:
        raise ValueError("no samples to score")
    inter = np.sum(P & G, axis=1).astype(np.float64)
    union = np.sum(P | G, axis=1).astype(np.float64)
    sizes = np.sum(P, axis=1) + np.sum(G, axis=1).astype(np.float64)
    both_empty = union == 0
    iou = np.where(both_empty, 1.0, inter / np.where(both_empty, 1.0, union))
    f1 = np.where(both_empty, 1.0, 2.0 * inter / np.where(both_empty, 1.0, sizes))
    mae = np.mean(np.abs(prob - G), axis=1)
    return float(np.mean(iou)), float(np.mean(f1)), float(np.mean(mae))


def score_probabilities(prob, gt_mask, threshold=THRESHOLD):
    iou, f1, mae = seg_metrics(prob > threshold, gt_mask, prob)
    return {"miou": iou, "mf1": f1, "mmae": mae}


@dataclass
class ResultMatrix:
    """``R[i, j]``: metric on task ``j`` after training step ``i``."""

    R: np.ndarray
    metric_name: str
    task_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.R.ndim != 2 or self.R.shape[0] != self.R.shape[1]:
            raise ValueError(f"R must be square, got {self.R.shape}")
        if self.task_ids and len(self.task_ids) != self.R.shape[0]:
            raise ValueError("task_ids length does not match R")

    @property
    def T(self):
        return self.R.shape[0]


@dataclass(frozen=True)
class ContinualMetrics:
    acc: float
    bwt: float
    fwt: float
    per_metric: dict = field(default_factory=dict)


def _as_R(R):
    return R.R if isinstance(R, ResultMatrix) else np.asarray(R, dtype=np.float64)


def average_accuracy(R):
    R = _as_R(R)
    return float(np.mean(R[-1]))


def backward_transfer(R):
    R = _as_R(R)
    T = R.shape[0]
    if T < 2:
        raise ValueError("backward transfer needs at least two tasks")
    return float(sum(R[T - 1, i] - R[i, i] for i in range(T - 1)) / (T - 1))


def forward_transfer(R):
    """Mean of ``R[i, i+1]``: score on the next task before training on it.

    Raw scores, with no random-initialisation baseline subtracted.
    """
    R = _as_R(R)
    T = R.shape[0]
    if T < 2:
        raise ValueError("forward transfer needs at least two tasks")
    return float(sum(R[i, i + 1] for i in range(T - 1)) / (T - 1))


def continual_metrics(R):
    """ACC, BWT and FWT of one result matrix.

    The same formulas apply to error-type metrics such as MAE, where lower
    is better and a positive BWT means forgetting.
    """
    return ContinualMetrics(average_accuracy(R), backward_transfer(R), forward_transfer(R))


def summarize(results, headline="miou"):
    """Combine per-metric result matrices into one ContinualMetrics."""
    per = {name: continual_metrics(rm) for name, rm in results.items()}
    head = per[headline]
    return ContinualMetrics(
        head.acc,
        head.bwt,
        head.fwt,
        {name: {"acc": m.acc, "bwt": m.bwt, "fwt": m.fwt} for name, m in per.items()},
    )
