"""Attack feature rows and their CSV exchange format."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..data import Dataset
from ..metrics import SensitivityConfig, prediction_sensitivity

Model = Callable[[np.ndarray], np.ndarray]


@dataclass
class AttackDataset:
    """Per-sample (posterior, sensitivity, label, is_member) rows."""

    posteriors: np.ndarray
    labels: np.ndarray
    is_member: np.ndarray
    sensitivity: np.ndarray | None = None

    def __post_init__(self):
        self.posteriors = np.atleast_2d(np.asarray(self.posteriors, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_member = np.asarray(self.is_member, dtype=bool)
        n, k = self.posteriors.shape
        if self.labels.shape != (n,) or self.is_member.shape != (n,):
            raise ValueError("labels / is_member must have one entry per posterior row")
        if self.sensitivity is not None:
            self.sensitivity = np.asarray(self.sensitivity, dtype=np.float64)
            if self.sensitivity.shape != (n, k):
                raise ValueError(f"sensitivity shape {self.sensitivity.shape} != {(n, k)}")
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError("labels outside [0, K)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.posteriors.shape[1]

    @property
    def onehot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def subset(self, index) -> "AttackDataset":
        index = np.asarray(index)
        sens = None if self.sensitivity is None else self.sensitivity[index]
        return AttackDataset(self.posteriors[index], self.labels[index], self.is_member[index], sens)

    def balanced(self, rng: np.random.Generator) -> "AttackDataset":
        """Downsample the larger side so members and non-members are equal in number."""
        members = np.flatnonzero(self.is_member)
        others = np.flatnonzero(~self.is_member)
        n = min(len(members), len(others))
        if len(members) > n:
            members = np.sort(rng.choice(members, n, replace=False))
        if len(others) > n:
            others = np.sort(rng.choice(others, n, replace=False))
        return self.subset(np.concatenate([members, others]))

    @staticmethod
    def concat(parts: list["AttackDataset"]) -> "AttackDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        has_sens = all(p.sensitivity is not None for p in parts)
        return AttackDataset(
            np.concatenate([p.posteriors for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.is_member for p in parts]),
            np.concatenate([p.sensitivity for p in parts]) if has_sens else None,
        )


def extract_features(
    model: Model,
    samples: Dataset,
    is_member: bool | np.ndarray,
    cfg: SensitivityConfig | None = SensitivityConfig(),
) -> AttackDataset:
    """Query ``model`` on ``samples``; ``cfg=None`` skips the sensitivity column."""
    post = model(samples.features)
    sens = None if cfg is None else prediction_sensitivity(model, samples.features, cfg, samples.ids)
    flags = np.broadcast_to(np.asarray(is_member, dtype=bool), (len(samples),))
    return AttackDataset(post, samples.labels, flags.copy(), sens)


def membership_rows(
    model: Model, members: Dataset, non_members: Dataset, cfg: SensitivityConfig | None
) -> AttackDataset:
    return AttackDataset.concat(
        [extract_features(model, members, True, cfg), extract_features(model, non_members, False, cfg)]
    )


def write_attack_csv(data: AttackDataset, path: str | Path) -> None:
    """Header ``is_member,label,p_0..p_{K-1},s_0..s_{K-1}``."""
    k = data.num_classes
    sens = data.sensitivity if data.sensitivity is not None else np.full((len(data), k), np.nan)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["is_member", "label"] + [f"p_{i}" for i in range(k)] + [f"s_{i}" for i in range(k)])
        for m, y, p, s in zip(data.is_member, data.labels, data.posteriors, sens):
            writer.writerow([int(m), int(y)] + [repr(float(v)) for v in p] + [repr(float(v)) for v in s])


def read_attack_csv(path: str | Path) -> AttackDataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["is_member", "label"] or (len(header) - 2) % 2:
            raise ValueError(f"{path}: bad attack-dataset header")
        k = (len(header) - 2) // 2
        expected = ["is_member", "label"] + [f"p_{i}" for i in range(k)] + [f"s_{i}" for i in range(k)]
        if header != expected:
            raise ValueError(f"{path}: bad attack-dataset header")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} fields")
            rows.append([float(v) for v in row])
    arr = np.array(rows).reshape(-1, len(header))
    sens = arr[:, 2 + k:]
    return AttackDataset(
        arr[:, 2:2 + k],
        arr[:, 1].astype(np.int64),
        arr[:, 0] != 0,
        None if np.all(np.isnan(sens)) else sens,
    )
