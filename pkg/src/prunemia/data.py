"""Tabular datasets, the synthetic benchmark, and the target/shadow split."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int | None = None
    # global row ids; keep noise draws and membership bookkeeping stable under subsetting
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError(
                f"features {self.features.shape} and labels {self.labels.shape} do not align"
            )
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.features[index],
            self.labels[index],
            name or self.name,
            self.num_classes,
            self.ids[index],
        )

    def concat(self, other: "Dataset", name: str | None = None) -> "Dataset":
        return Dataset(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            name or self.name,
            max(self.num_classes, other.num_classes),
            np.concatenate([self.ids, other.ids]),
        )


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read a ``label,f0,...,f{d-1}`` CSV file."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file, expected header 'label,f0,...'")
        expected = ["label"] + [f"f{i}" for i in range(len(header) - 1)]
        if [h.strip() for h in header] != expected or len(header) < 2:
            raise DataError(f"{path}:1: header must be 'label,f0,...,f{{d-1}}'")
        labels, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                label = float(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-numeric field") from None
            if label != int(label):
                raise DataError(f"{path}:{line_no}: label {row[0]!r} is not an integer")
            labels.append(int(label))
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), path.stem, num_classes)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    d = dataset.num_features
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(d)])
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class SyntheticSpec:
    """Class prototypes with independent bit flips.

    Defaults mimic Location (30 classes, 446 binary features); use
    ``num_classes=100, num_features=600`` for a Purchase-shaped benchmark.
    """

    num_classes: int = 30
    num_features: int = 446
    samples_per_class: int = 150
    flip_probability: float = 0.15

    def __post_init__(self):
        # 0.5 is allowed as the no-signal control
        if not 0.0 <= self.flip_probability <= 0.5:
            raise ValueError("flip_probability must lie in [0, 0.5]")
        if min(self.num_classes, self.num_features, self.samples_per_class) <= 0:
            raise ValueError("sizes must be positive")


def synth_generate(spec: SyntheticSpec, seed: int) -> Dataset:
    rng = substream(seed, "synth")
    k, d, n = spec.num_classes, spec.num_features, spec.samples_per_class
    prototypes = rng.integers(0, 2, size=(k, d))
    labels = np.repeat(np.arange(k), n)
    flips = rng.random((k * n, d)) < spec.flip_probability
    features = np.where(flips, 1 - prototypes[labels], prototypes[labels])
    order = rng.permutation(k * n)
    return Dataset(features[order].astype(np.float64), labels[order], "synthetic", k)


@dataclass(frozen=True)
class SplitSpec:
    target_fraction: float = 0.5
    train_fraction: float = 0.45
    val_fraction: float = 0.10
    test_fraction: float = 0.45
    seed: int = 0

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"train/val/test fractions sum to {total}, not 1")
        if not 0.0 < self.target_fraction < 1.0:
            raise ValueError("target_fraction must lie in (0, 1)")


@dataclass
class Part:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class Split:
    target: Part
    shadow: Part
    # every row of the shadow half; shadows re-draw their own splits from it
    shadow_pool: Dataset = field(repr=False, default=None)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_part(data: Dataset, spec: SplitSpec, rng: np.random.Generator) -> Part:
    n = len(data)
    order = rng.permutation(n)
    n_val = _round_half_up(spec.val_fraction * n)
    n_test = _round_half_up(spec.test_fraction * n)
    n_train = n - n_val - n_test
    return Part(
        data.subset(order[:n_train]),
        data.subset(order[n_train:n_train + n_val]),
        data.subset(order[n_train + n_val:]),
    )


def split(data: Dataset, spec: SplitSpec = SplitSpec()) -> Split:
    """Disjoint target/shadow halves, each split train/val/test."""
    n = len(data)
    if n < 20:
        raise DataError(f"need at least 20 samples to split, got {n}")
    order = substream(spec.seed, "split", "halves").permutation(n)
    n_target = _round_half_up(spec.target_fraction * n)
    target = data.subset(order[:n_target])
    shadow = data.subset(order[n_target:])
    return Split(
        split_part(target, spec, substream(spec.seed, "split", "target")),
        split_part(shadow, spec, substream(spec.seed, "split", "shadow")),
        shadow,
    )
