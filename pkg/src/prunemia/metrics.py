"""Prediction confidence / sensitivity and the member vs non-member gaps."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .data import Dataset
from .rng import substream

Model = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SensitivityConfig:
    n: int = 10
    epsilon: float = 1e-3
    label: str = "ps-noise"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("query budget n must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def noise_vectors(cfg: SensitivityConfig, sample_id: int, dim: int) -> np.ndarray:
    """The ``n`` standard-normal directions used for one sample."""
    return substream(cfg.seed, cfg.label, int(sample_id)).standard_normal((cfg.n, dim))


def prediction_sensitivity(
    model: Model,
    x: np.ndarray,
    cfg: SensitivityConfig = SensitivityConfig(),
    sample_ids: np.ndarray | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Mean absolute output change per unit of Gaussian input noise, per class.

    ``PS_c(x) = (1/n) sum_i |f(x + eps*d_i)_c - f(x)_c| / eps`` with fresh
    noise per sample, drawn from the substream of that sample's id.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if sample_ids is None:
        sample_ids = np.arange(len(x))
    sample_ids = np.asarray(sample_ids)
    if sample_ids.shape != (len(x),):
        raise ValueError("sample_ids must have one entry per row of x")
    out = []
    for start in range(0, len(x), chunk):
        xs = x[start:start + chunk]
        ids = sample_ids[start:start + chunk]
        noise = np.stack([noise_vectors(cfg, i, x.shape[1]) for i in ids])  # (b, n, d)
        base = model(xs)
        perturbed = model((xs[:, None, :] + cfg.epsilon * noise).reshape(-1, x.shape[1]))
        perturbed = perturbed.reshape(len(xs), cfg.n, -1)
        out.append(np.abs(perturbed - base[:, None, :]).sum(axis=1) / cfg.n / cfg.epsilon)
    return np.concatenate(out)


def _require_nonempty(*sets: Dataset) -> None:
    for s in sets:
        if len(s) == 0:
            raise ValueError("member and non-member sets must be non-empty")


def _per_class_gap(values_in, labels_in, values_out, labels_out, num_classes) -> np.ndarray:
    gap = np.zeros(num_classes)
    for c in range(num_classes):
        a = values_in[labels_in == c]
        b = values_out[labels_out == c]
        if len(a) and len(b):
            gap[c] = a.mean() - b.mean()
    return gap


def ground_truth_confidence(model: Model, data: Dataset) -> np.ndarray:
    post = model(data.features)
    return post[np.arange(len(data)), data.labels]


def confidence_gap(model: Model, members: Dataset, non_members: Dataset) -> tuple[float, np.ndarray]:
    """Mean ground-truth confidence of members minus that of non-members."""
    _require_nonempty(members, non_members)
    a = ground_truth_confidence(model, members)
    b = ground_truth_confidence(model, non_members)
    k = max(members.num_classes, non_members.num_classes)
    return float(a.mean() - b.mean()), _per_class_gap(a, members.labels, b, non_members.labels, k)


def ground_truth_sensitivity(model: Model, data: Dataset, cfg: SensitivityConfig) -> np.ndarray:
    ps = prediction_sensitivity(model, data.features, cfg, data.ids)
    return ps[np.arange(len(data)), data.labels]


def sensitivity_gap(
    model: Model, members: Dataset, non_members: Dataset, cfg: SensitivityConfig = SensitivityConfig()
) -> tuple[float, np.ndarray]:
    _require_nonempty(members, non_members)
    a = ground_truth_sensitivity(model, members, cfg)
    b = ground_truth_sensitivity(model, non_members, cfg)
    k = max(members.num_classes, non_members.num_classes)
    return float(a.mean() - b.mean()), _per_class_gap(a, members.labels, b, non_members.labels, k)


def accuracy(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(model(data.features).argmax(axis=1) == data.labels))


def generalization_gap(model: Model, train: Dataset, test: Dataset) -> float:
    """Train accuracy minus test accuracy."""
    return accuracy(model, train) - accuracy(model, test)


@dataclass
class GapReport:
    confidence_gap: float
    sensitivity_gap: float
    generalization_gap: float
    per_class_confidence_gap: list[float]
    per_class_sensitivity_gap: list[float]
    train_accuracy: float
    test_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def gap_report(model: Model, train: Dataset, test: Dataset, cfg: SensitivityConfig) -> GapReport:
    cg, cg_cls = confidence_gap(model, train, test)
    sg, sg_cls = sensitivity_gap(model, train, test, cfg)
    train_acc, test_acc = accuracy(model, train), accuracy(model, test)
    return GapReport(cg, sg, train_acc - test_acc, cg_cls.tolist(), sg_cls.tolist(), train_acc, test_acc)
