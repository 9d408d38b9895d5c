"""Metric-threshold attacks (Conf, Xent, Mentr, Top1Conf).

Thresholds and their direction are learned from shadow rows by sweeping
every midpoint between consecutive distinct metric values (plus +/-inf)
and keeping the one with the best balanced accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import AttackResult, evaluate_attack
from .features import AttackDataset

THRESHOLD_KINDS = ("Conf", "Xent", "Mentr", "Top1Conf")

_CLAMP = 1e-12

GE, LE = ">=", "<="


def _check_label(posterior: np.ndarray, y: int) -> None:
    if not 0 <= y < len(posterior):
        raise ValueError(f"label {y} out of range for {len(posterior)} classes")


def xent(posterior, y: int) -> float:
    """-log p_y with p clamped to [1e-12, 1 - 1e-12]."""
    p = np.asarray(posterior, dtype=np.float64)
    _check_label(p, y)
    return float(-np.log(np.clip(p[y], _CLAMP, 1 - _CLAMP)))


def mentr(posterior, y: int) -> float:
    """-(1-p_y) log p_y - sum_{t != y} p_t log(1 - p_t), with clamping."""
    p = np.clip(np.asarray(posterior, dtype=np.float64), _CLAMP, 1 - _CLAMP)
    _check_label(p, y)
    others = np.delete(p, y)
    return float(-(1 - p[y]) * np.log(p[y]) - np.sum(others * np.log(1 - others)))


def metric_values(kind: str, data: AttackDataset) -> np.ndarray:
    """Vectorised metric per row."""
    n = len(data)
    rows = np.arange(n)
    if kind == "Conf":
        return data.posteriors[rows, data.labels].copy()
    if kind == "Top1Conf":
        return data.posteriors.max(axis=1)
    p = np.clip(data.posteriors, _CLAMP, 1 - _CLAMP)
    py = p[rows, data.labels]
    if kind == "Xent":
        return -np.log(py)
    if kind == "Mentr":
        terms = p * np.log(1 - p)
        terms[rows, data.labels] = 0.0
        return -(1 - py) * np.log(py) - terms.sum(axis=1)
    raise ValueError(f"unknown threshold attack {kind!r}")


@dataclass(frozen=True)
class ThresholdEntry:
    threshold: float
    direction: str
    balanced_accuracy: float


@dataclass
class ThresholdTable:
    metric: str
    num_classes: int
    global_entry: ThresholdEntry
    per_class: dict[int, ThresholdEntry] = field(default_factory=dict)

    def entry(self, label: int) -> ThresholdEntry:
        return self.per_class.get(int(label), self.global_entry)


def balanced_accuracy(tp, tn, n_members, n_non_members):
    """(TPR + TNR) / 2 as a single correctly rounded division."""
    return (tp * n_non_members + tn * n_members) / (2 * n_members * n_non_members)


def candidate_thresholds(values: np.ndarray) -> np.ndarray:
    distinct = np.unique(values)
    mids = (distinct[:-1] + distinct[1:]) / 2
    return np.concatenate([[-np.inf], mids, [np.inf]])


def best_threshold(values: np.ndarray, is_member: np.ndarray) -> ThresholdEntry:
    """Optimal (threshold, direction) by balanced accuracy.

    Ties go to the smaller threshold, then to the ``>=`` direction.
    """
    values = np.asarray(values, dtype=np.float64)
    is_member = np.asarray(is_member, dtype=bool)
    m = int(is_member.sum())
    n = len(values) - m
    if m == 0 or n == 0:
        raise ValueError("need both members and non-members to learn a threshold")
    distinct = np.unique(values)
    if len(distinct) < 2:
        return ThresholdEntry(float(distinct[0]), GE, 0.5)

    # members / non-members with value <= each distinct value
    pos = np.searchsorted(distinct, values)
    mem_le = np.cumsum(np.bincount(pos[is_member], minlength=len(distinct)))
    non_le = np.cumsum(np.bincount(pos[~is_member], minlength=len(distinct)))
    # cut j predicts "value > distinct[j-1]" for j = 0..len(distinct)
    mem_below = np.concatenate([[0], mem_le])
    non_below = np.concatenate([[0], non_le])
    thresholds = candidate_thresholds(values)
    ge_acc = balanced_accuracy(m - mem_below, non_below, m, n)
    le_acc = balanced_accuracy(mem_below, n - non_below, m, n)

    accs = np.concatenate([ge_acc, le_acc])
    ths = np.concatenate([thresholds, thresholds])
    dirs = np.concatenate([np.zeros(len(thresholds)), np.ones(len(thresholds))])
    best = np.lexsort((dirs, ths, -accs))[0]
    return ThresholdEntry(float(ths[best]), GE if dirs[best] == 0 else LE, float(accs[best]))


def learn_thresholds(
    values: np.ndarray,
    labels: np.ndarray,
    is_member: np.ndarray,
    num_classes: int,
    metric: str = "metric",
    per_class: bool = True,
) -> ThresholdTable:
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    is_member = np.asarray(is_member, dtype=bool)
    table = ThresholdTable(metric, num_classes, best_threshold(values, is_member))
    if not per_class:
        return table
    for c in range(num_classes):
        sel = labels == c
        if sel.sum() < 2 or is_member[sel].all() or not is_member[sel].any():
            continue
        table.per_class[c] = best_threshold(values[sel], is_member[sel])
    return table


def apply_thresholds(table: ThresholdTable, values: np.ndarray, labels: np.ndarray):
    entries = [table.entry(y) for y in labels]
    zeta = np.array([e.threshold for e in entries])
    sign = np.array([1.0 if e.direction == GE else -1.0 for e in entries])
    with np.errstate(invalid="ignore"):
        predictions = np.where(sign > 0, values >= zeta, values <= zeta)
    return predictions, sign * values


def fit_threshold_attack(kind: str, shadow: AttackDataset) -> ThresholdTable:
    if kind not in THRESHOLD_KINDS:
        raise ValueError(f"unknown threshold attack {kind!r}")
    return learn_thresholds(
        metric_values(kind, shadow), shadow.labels, shadow.is_member, shadow.num_classes,
        metric=kind, per_class=kind != "Top1Conf",
    )


def threshold_attack(kind: str, table: ThresholdTable, target: AttackDataset) -> AttackResult:
    if table.num_classes != target.num_classes:
        raise ValueError(
            f"threshold table has {table.num_classes} classes, target rows have {target.num_classes}"
        )
    if table.metric not in (kind, "metric"):
        raise ValueError(f"table was learned for {table.metric}, not {kind}")
    predictions, scores = apply_thresholds(table, metric_values(kind, target), target.labels)
    return evaluate_attack(predictions, target.is_member, scores)
