"""Magnitude-based pruning masks and masked fine-tuning.

Only hidden layers are pruned; the output layer is left intact. Structured
methods treat a hidden neuron (its incoming weight row and bias) as the
unit that is removed, ranked separately within each hidden layer.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import Dataset
from .defenses import DefenseConfig
from .nets import MLP
from .training import TrainConfig, TrainLog, apply_mask_inplace, train_classifier

PRUNE_METHODS = ("L1Unstructured", "L1Structured", "L2Structured", "Slimming")
SPARSITY_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)

Mask = dict[str, np.ndarray]


class PruningError(ValueError):
    pass


def round_half_up(x: float) -> int:
    # counts are non-negative, so half-up is half-away-from-zero
    return int(math.floor(x + 0.5))


def hidden_layers(params: Mapping[str, np.ndarray]) -> list[str]:
    indices = sorted(
        int(m.group(1)) for k in params if (m := re.fullmatch(r"fc(\d+)\.weight", k))
    )
    return [f"fc{i}" for i in indices[:-1]]


def prunable_counts(params: Mapping[str, np.ndarray], method: str) -> list[int]:
    """Size of each ranking pool: one global pool of weights, or neurons per layer."""
    layers = hidden_layers(params)
    if method == "L1Unstructured":
        return [sum(np.asarray(params[f"{l}.weight"]).size for l in layers)]
    return [np.asarray(params[f"{l}.weight"]).shape[0] for l in layers]


def expected_zeros(params: Mapping[str, np.ndarray], method: str, gamma: float) -> list[int]:
    return [round_half_up(gamma * n) for n in prunable_counts(params, method)]


def _bottom_k(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort: equal scores remove the lower flat index first
    return np.argsort(scores, kind="stable")[:k]


def compute_mask(params: Mapping[str, np.ndarray], method: str, gamma: float) -> Mask:
    """Binary keep(1)/remove(0) mask for every parameter in ``params``."""
    if method not in PRUNE_METHODS:
        raise PruningError(f"unknown pruning method {method!r}")
    if not 0.0 <= gamma < 1.0:
        raise PruningError(f"sparsity must lie in [0, 1), got {gamma}")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise PruningError(f"parameter {name} is not finite")
    mask = {k: np.ones_like(v) for k, v in params.items()}
    layers = hidden_layers(params)

    if method == "L1Unstructured":
        weights = [params[f"{l}.weight"] for l in layers]
        flat = np.concatenate([np.abs(w).ravel() for w in weights])
        k = round_half_up(gamma * flat.size)
        keep = np.ones(flat.size)
        keep[_bottom_k(flat, k)] = 0.0
        offset = 0
        for layer, w in zip(layers, weights):
            mask[f"{layer}.weight"] = keep[offset:offset + w.size].reshape(w.shape)
            offset += w.size
        return mask

    for layer in layers:
        w = params[f"{layer}.weight"]
        if method == "L1Structured":
            scores = np.abs(w).sum(axis=1)
        elif method == "L2Structured":
            scores = np.sqrt((w * w).sum(axis=1))
        else:
            scale = params.get(f"{layer}.scale")
            if scale is None:
                raise PruningError(f"Slimming needs scale factors; {layer}.scale is missing")
            scores = np.abs(scale)
        removed = _bottom_k(scores, round_half_up(gamma * w.shape[0]))
        mask[f"{layer}.weight"][removed, :] = 0.0
        mask[f"{layer}.bias"][removed] = 0.0
        if f"{layer}.scale" in mask:
            mask[f"{layer}.scale"][removed] = 0.0
    return mask


def apply_mask(params: Mapping[str, np.ndarray], mask: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        m = mask.get(name)
        if m is None:
            out[name] = value.copy()
            continue
        if m.shape != value.shape:
            raise PruningError(f"mask for {name} has shape {m.shape}, parameter {value.shape}")
        out[name] = value * m
    return out


def count_pruned(mask: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray], method: str) -> list[int]:
    """Removed units per ranking pool, mirroring ``prunable_counts``."""
    layers = hidden_layers(params)
    if method == "L1Unstructured":
        return [int(sum(np.sum(mask[f"{l}.weight"] == 0) for l in layers))]
    return [int(np.sum(np.all(mask[f"{l}.weight"] == 0, axis=1))) for l in layers]


@dataclass
class PrunedModel:
    model: MLP
    mask: Mask
    method: str
    gamma: float
    stages: list[dict] = field(default_factory=list)

    def check_invariant(self) -> bool:
        return all(
            np.all(self.model.params[name].data[m == 0] == 0) for name, m in self.mask.items()
        )

    def sparsity(self) -> float:
        layers = hidden_layers(self.mask)
        total = sum(self.mask[f"{l}.weight"].size for l in layers)
        zeros = sum(np.sum(self.mask[f"{l}.weight"] == 0) for l in layers)
        return float(zeros) / total if total else 0.0


def fine_tune(
    pruned: PrunedModel,
    train: Dataset,
    val: Dataset | None,
    config: TrainConfig,
    defense: DefenseConfig,
    seed: int,
    label: str = "finetune",
    reference: Dataset | None = None,
) -> PrunedModel:
    """Retrain the surviving parameters; masked entries stay exactly zero."""
    if len(train) == 0:
        raise ValueError("empty training set")
    log: TrainLog = train_classifier(
        pruned.model, train, val, config, defense, seed, label, mask=pruned.mask, reference=reference
    )
    pruned.stages.append({"stage": "fine_tune", "defense": defense.label, **log.to_dict()})
    return pruned


def prune_pipeline(
    original: MLP,
    method: str,
    gamma: float,
    train: Dataset,
    val: Dataset | None,
    config: TrainConfig,
    defense: DefenseConfig,
    seed: int,
    label: str = "prune",
    reference: Dataset | None = None,
) -> PrunedModel:
    """compute_mask -> apply_mask -> fine_tune on a copy of ``original``."""
    state = original.state_dict()
    mask = compute_mask(state, method, gamma)
    model = MLP(original.spec, apply_mask(state, mask))
    pruned = PrunedModel(model, mask, method, gamma)
    pruned.stages.append({"stage": "mask", "method": method, "gamma": gamma,
                          "removed": count_pruned(mask, state, method)})
    return fine_tune(pruned, train, val, config, defense, seed, f"{label}/finetune", reference)


__all__ = [
    "PRUNE_METHODS",
    "SPARSITY_GRID",
    "PruningError",
    "PrunedModel",
    "apply_mask",
    "apply_mask_inplace",
    "compute_mask",
    "count_pruned",
    "expected_zeros",
    "fine_tune",
    "hidden_layers",
    "prunable_counts",
    "prune_pipeline",
    "round_half_up",
]
