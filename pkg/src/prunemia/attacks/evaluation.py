from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class AttackResult:
    accuracy: float
    auc: float
    predictions: np.ndarray
    scores: np.ndarray | None = None

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "auc": self.auc}


def roc_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Mann-Whitney AUC with mid-ranks for ties; 0.5 if one class is absent."""
    truth = np.asarray(truth, dtype=bool)
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[truth].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_attack(predictions, membership_truth, scores=None) -> AttackResult:
    predictions = np.asarray(predictions, dtype=bool)
    truth = np.asarray(membership_truth, dtype=bool)
    if predictions.shape != truth.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {truth.shape[0]} samples")
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != truth.shape:
            raise ValueError("scores must align with predictions")
    accuracy = float(np.mean(predictions == truth)) if len(truth) else float("nan")
    auc = roc_auc(scores if scores is not None else predictions.astype(float), truth)
    return AttackResult(accuracy, auc, predictions, scores)


def attack_accuracy_loss(acc_known: float, acc_unknown: float) -> float:
    """Relative accuracy drop when the adversary guesses the pruning setup wrong."""
    if acc_known == 0:
        raise ValueError("acc_known must be non-zero")
    return (acc_known - acc_unknown) / acc_known
