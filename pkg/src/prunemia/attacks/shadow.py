"""Shadow models that imitate the target's training and pruning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset, SplitSpec, split_part
from ..defenses import DefenseConfig
from ..metrics import SensitivityConfig
from ..nets import MLP, MlpSpec
from ..pruning import PrunedModel, prune_pipeline
from ..rng import substream
from ..training import TrainConfig, train_original
from .features import AttackDataset, membership_rows

# smallest shadow half that still gives every split a handful of rows
MIN_POOL = 20


@dataclass
class Shadow:
    original: MLP
    pruned: PrunedModel | None
    members: Dataset
    non_members: Dataset

    def model(self, variant: str) -> MLP:
        if variant == "pruned" and self.pruned is not None:
            return self.pruned.model
        if variant not in ("pruned", "original"):
            raise ValueError(f"unknown model variant {variant!r}")
        return self.original


@dataclass
class ShadowEnsemble:
    shadows: list[Shadow]
    method: str
    gamma: float
    defense: DefenseConfig

    def __len__(self) -> int:
        return len(self.shadows)

    def attack_rows(self, variant: str, cfg: SensitivityConfig | None, seed: int) -> AttackDataset:
        """Balanced rows from every shadow, concatenated."""
        parts = []
        for i, s in enumerate(self.shadows):
            rows = membership_rows(s.model(variant), s.members, s.non_members, cfg)
            parts.append(rows.balanced(substream(seed, "shadow", i, "balance", variant)))
        return AttackDataset.concat(parts)


def build_shadow_ensemble(
    pool: Dataset,
    spec: MlpSpec,
    method: str,
    gamma: float,
    defense: DefenseConfig,
    train_config: TrainConfig,
    seed: int,
    size: int = 5,
    fractions: SplitSpec = SplitSpec(),
    target_ids: np.ndarray | None = None,
) -> ShadowEnsemble:
    """Train ``size`` shadow originals (Basic defense) and prune each with the
    adversary's assumed method, sparsity and fine-tuning defense.

    Each shadow re-draws its own train/val/test split from ``pool``, so rows
    recur across shadows but never straddle members and non-members within one.
    """
    if size < 1:
        raise ValueError("ensemble size must be at least 1")
    if len(pool) < MIN_POOL:
        raise ValueError(f"shadow pool has {len(pool)} rows; need at least {MIN_POOL}")
    if target_ids is not None and np.intersect1d(pool.ids, target_ids).size:
        raise ValueError("shadow pool overlaps the target half")
    shadows = []
    for i in range(size):
        part = split_part(pool, fractions, substream(seed, "shadow", i, "split"))
        label = f"shadow{i}"
        original, _ = train_original(spec, part.train, part.val, train_config, seed, f"{label}/original")
        pruned = None
        if gamma > 0:
            pruned = prune_pipeline(
                original, method, gamma, part.train, part.val, train_config, defense, seed,
                f"{label}/prune", reference=part.val,
            )
        shadows.append(Shadow(original, pruned, part.train, part.test))
    return ShadowEnsemble(shadows, method, gamma, defense)
