"""Membership-inference defenses applied while training or fine-tuning.

* ``Basic``: early stopping on validation loss plus an L2 penalty. Every
  other defense keeps these on.
* ``DP``: per-sample clipping plus Gaussian noise (DP-SGD update rule only,
  no privacy accounting).
* ``ADV``: min-max alternation against a surrogate membership classifier.
* ``PPB``: KL divergence between the sorted posteriors of random pairs in
  each mini-batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .nets import MLP, MlpSpec
from .tensor import Adam, Tensor, concat, cross_entropy, take_along_axis

DEFENSE_KINDS = ("Basic", "DP", "ADV", "PPB")

PPB_GRID = (1.0, 2.0, 4.0, 8.0, 16.0)
DP_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
ADV_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0)

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "Basic"
    lam: float = 4.0  # PPB weight
    sigma: float = 1.0  # DP noise multiplier
    clip_norm: float = 1.0  # DP per-sample clip
    dp_lr: float = 0.1  # DP plain-SGD step size
    alpha: float = 1.0  # ADV balance
    weight_decay: float = 5e-4
    patience: int = 5
    max_epochs: int = 100

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if self.lam < 0 or self.sigma < 0 or self.alpha < 0:
            raise ValueError("lam, sigma and alpha must be non-negative")
        if self.clip_norm <= 0 or self.dp_lr <= 0:
            raise ValueError("clip_norm and dp_lr must be positive")
        if self.patience < 1 or self.max_epochs < 0 or self.weight_decay < 0:
            raise ValueError("invalid early-stopping / weight-decay settings")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "DefenseConfig":
        return cls(**dict(data))

    @property
    def label(self) -> str:
        if self.kind == "PPB":
            return f"PPB(lam={self.lam:g})"
        if self.kind == "DP":
            return f"DP(sigma={self.sigma:g})"
        if self.kind == "ADV":
            return f"ADV(alpha={self.alpha:g})"
        return "Basic"


def defense_grid(kind: str, base: DefenseConfig | None = None) -> list[DefenseConfig]:
    """The hyper-parameter sweep evaluated for ``kind``."""
    base = base or DefenseConfig()
    fields = dict(base.to_dict(), kind=kind)
    if kind == "PPB":
        return [DefenseConfig(**dict(fields, lam=v)) for v in PPB_GRID]
    if kind == "DP":
        return [DefenseConfig(**dict(fields, sigma=v)) for v in DP_GRID]
    if kind == "ADV":
        return [DefenseConfig(**dict(fields, alpha=v)) for v in ADV_GRID]
    return [DefenseConfig(**fields)]


# ---------------------------------------------------------------------------
# Early stopping


@dataclass
class EarlyStopState:
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0
    best_params: dict[str, np.ndarray] | None = field(default=None, repr=False)
    best_epoch: int = -1
    epoch: int = 0


def early_stopping_update(
    state: EarlyStopState, val_loss: float, params: Mapping[str, np.ndarray], patience: int
) -> tuple[EarlyStopState, bool]:
    """Record one epoch's validation loss.

    Only a strictly lower loss counts as an improvement. Returns
    ``should_stop`` once ``patience`` consecutive epochs failed to improve.
    """
    if not np.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    state.epoch += 1
    if val_loss < state.best_val_loss:
        state.best_val_loss = float(val_loss)
        state.epochs_since_improvement = 0
        state.best_params = {k: np.array(v, copy=True) for k, v in params.items()}
        state.best_epoch = state.epoch
    else:
        state.epochs_since_improvement += 1
    return state, state.epochs_since_improvement >= patience


# ---------------------------------------------------------------------------
# PPB


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum_x p(x) log(p(x)/q(x)); q floored at 1e-12, zero-p terms dropped."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(np.maximum(q[nz], KL_FLOOR)))))


def sort_descending(posteriors: Tensor) -> Tensor:
    """Sort each row in decreasing order; ties keep the lower class index first."""
    order = np.argsort(-posteriors.data, axis=-1, kind="stable")
    return take_along_axis(posteriors, order, axis=-1)


def ppb_pairs(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 2:
        raise ValueError(f"ppb_loss needs a batch of at least 2, got {batch_size}")
    perm = rng.permutation(batch_size)
    return perm[: 2 * (batch_size // 2)].reshape(-1, 2)


def ppb_loss(posteriors: Tensor, lam: float, rng: np.random.Generator) -> Tensor:
    """lam * sum over random disjoint pairs of KL(sorted p_j, sorted p_k)."""
    pairs = ppb_pairs(posteriors.shape[0], rng)
    ranked = sort_descending(posteriors)
    p = ranked[pairs[:, 0]]
    q = ranked[pairs[:, 1]]
    kl = p * (p.clip_min(1e-300).log() - q.clip_min(KL_FLOOR).log())
    return kl.sum() * lam


# ---------------------------------------------------------------------------
# DP-SGD


def clip_gradient(grads: Sequence[np.ndarray], clip_norm: float) -> list[np.ndarray]:
    """Rescale one sample's gradient (all tensors jointly) to norm <= clip_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= clip_norm:
        return [np.array(g, copy=True) for g in grads]
    factor = clip_norm / norm
    return [g * factor for g in grads]


def privatize_gradients(
    per_sample_grads: Sequence[Sequence[np.ndarray]],
    clip_norm: float,
    sigma: float,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Clip each sample, average, add N(0, (sigma*clip_norm/B)^2) per coordinate."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    batch = len(per_sample_grads)
    if batch == 0:
        raise ValueError("no per-sample gradients")
    clipped = [clip_gradient(g, clip_norm) for g in per_sample_grads]
    averaged = [np.mean(np.stack(parts), axis=0) for parts in zip(*clipped)]
    if sigma > 0:
        std = sigma * clip_norm / batch
        averaged = [a + rng.normal(0.0, std, size=a.shape) for a in averaged]
    return averaged


def dp_sgd_step(
    per_sample_grads: Sequence[Sequence[np.ndarray]],
    clip_norm: float,
    sigma: float,
    lr: float,
    params: Sequence[np.ndarray],
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Privatise the gradients and apply a plain SGD update in place."""
    noisy = privatize_gradients(per_sample_grads, clip_norm, sigma, rng)
    for p, g in zip(params, noisy):
        if p.shape != g.shape:
            raise ValueError(f"dp_sgd_step: parameter {p.shape} vs gradient {g.shape}")
        p -= lr * g
    return noisy


def per_sample_gradients(model: MLP, x: np.ndarray, y: np.ndarray) -> list[list[np.ndarray]]:
    """Cross-entropy gradients one sample at a time."""
    params = list(model.params.values())
    out = []
    for i in range(len(y)):
        for p in params:
            p.grad = None
        cross_entropy(model.logits(x[i:i + 1]), y[i:i + 1]).backward()
        out.append([p.grad if p.grad is not None else np.zeros_like(p.data) for p in params])
    return out


# ---------------------------------------------------------------------------
# Adversarial regularisation


def membership_features(posteriors: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    onehot = np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]
    return concat([posteriors, Tensor(onehot)], axis=1)


class AdversarialRegularizer:
    """Surrogate attack (posterior + one-hot -> 64 -> 2) and its optimiser."""

    def __init__(self, num_classes: int, reference_x: np.ndarray, reference_y: np.ndarray,
                 rng: np.random.Generator, lr: float = 1e-3):
        if reference_x is None or len(reference_x) == 0:
            raise ValueError("ADV needs a non-empty reference non-member pool")
        self.num_classes = num_classes
        self.reference_x = np.asarray(reference_x, dtype=np.float64)
        self.reference_y = np.asarray(reference_y, dtype=np.int64)
        self.surrogate = MLP.initialise(MlpSpec(2 * num_classes, 2, hidden=(64,)), rng)
        self.optimizer = Adam(list(self.surrogate.params.values()), lr=lr)


def adv_fine_tune_step(
    model: MLP,
    optimizer: Adam,
    x: np.ndarray,
    y: np.ndarray,
    adv: AdversarialRegularizer,
    alpha: float,
    weight_decay: float,
    rng: np.random.Generator,
) -> float:
    """One surrogate step, then one defender step on ``L_pred - alpha * L_surrogate``."""
    k = adv.num_classes
    # (a) surrogate: current batch as members, a reference draw as non-members
    ref = rng.choice(len(adv.reference_y), size=len(y), replace=len(y) > len(adv.reference_y))
    member_post = model.predict_proba(x)
    ref_post = model.predict_proba(adv.reference_x[ref])
    feats = np.concatenate([
        membership_features(Tensor(member_post), y, k).data,
        membership_features(Tensor(ref_post), adv.reference_y[ref], k).data,
    ])
    targets = np.concatenate([np.ones(len(y), dtype=np.int64), np.zeros(len(ref), dtype=np.int64)])
    adv.optimizer.zero_grad()
    cross_entropy(adv.surrogate.logits(feats), targets).backward()
    adv.optimizer.step()

    # (b) defender: maximise the surrogate's loss on members, surrogate frozen
    optimizer.zero_grad()
    logits = model.logits(x)
    loss = cross_entropy(logits, y) + l2_penalty(model.params, weight_decay)
    if alpha:
        member_feats = membership_features(logits.softmax(), y, k)
        surrogate_loss = cross_entropy(adv.surrogate.logits(member_feats), np.ones(len(y), dtype=np.int64))
        loss = loss - surrogate_loss * alpha
    loss.backward()
    adv.optimizer.zero_grad()
    optimizer.step()
    return loss.item()


def l2_penalty(params: Mapping[str, Tensor], weight_decay: float) -> Tensor | float:
    """(weight_decay / 2) * sum of squared parameters, so the gradient is weight_decay * w."""
    if not weight_decay:
        return 0.0
    total = None
    for p in params.values():
        term = (p * p).sum()
        total = term if total is None else total + term
    return total * (0.5 * weight_decay)
