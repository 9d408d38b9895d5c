"""Membership-inference attacks against (pruned) classifiers."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..nets import AttentionAttackSpec
from ..rng import substream
from .blindmi import blindmi_attack, blindmi_partition, mmd2
from .evaluation import AttackResult, attack_accuracy_loss, evaluate_attack, roc_auc
from .features import AttackDataset, extract_features, membership_rows, read_attack_csv, write_attack_csv
from .neural import NN_KINDS, AttackTraining, fit_nn_attack, fit_samia, nn_attack, samia_attack
from .shadow import Shadow, ShadowEnsemble, build_shadow_ensemble
from .threshold import (
    THRESHOLD_KINDS,
    ThresholdTable,
    fit_threshold_attack,
    learn_thresholds,
    mentr,
    threshold_attack,
    xent,
)

ATTACK_KINDS = THRESHOLD_KINDS + NN_KINDS + ("BlindMI", "SAMIA")


def run_attacks(
    kinds,
    shadow: AttackDataset,
    target: AttackDataset,
    model: Callable[[np.ndarray], np.ndarray],
    feature_range: tuple[np.ndarray, np.ndarray],
    seed: int,
    label: str = "attacks",
    probe_budget: int = 200,
) -> dict[str, AttackResult]:
    """Run each requested attack; shadow rows train, target rows are scored."""
    results = {}
    for kind in kinds:
        settings = AttackTraining(seed=seed)
        if kind in THRESHOLD_KINDS:
            results[kind] = threshold_attack(kind, fit_threshold_attack(kind, shadow), target)
        elif kind in NN_KINDS:
            results[kind] = nn_attack(kind, shadow, target, settings)
        elif kind == "SAMIA":
            results[kind] = samia_attack(shadow, target, AttentionAttackSpec(target.num_classes), settings)
        elif kind == "BlindMI":
            results[kind] = blindmi_attack(
                model, target, *feature_range, substream(seed, label, "blindmi-probes"), probe_budget
            )
        else:
            raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACK_KINDS}")
    return results


__all__ = [
    "ATTACK_KINDS",
    "AttackDataset",
    "AttackResult",
    "AttackTraining",
    "NN_KINDS",
    "Shadow",
    "ShadowEnsemble",
    "THRESHOLD_KINDS",
    "ThresholdTable",
    "attack_accuracy_loss",
    "blindmi_attack",
    "blindmi_partition",
    "build_shadow_ensemble",
    "evaluate_attack",
    "extract_features",
    "fit_nn_attack",
    "fit_samia",
    "fit_threshold_attack",
    "learn_thresholds",
    "membership_rows",
    "mentr",
    "mmd2",
    "nn_attack",
    "read_attack_csv",
    "roc_auc",
    "run_attacks",
    "samia_attack",
    "threshold_attack",
    "write_attack_csv",
    "xent",
]
