"""Mini-batch training loop shared by original training and fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import Dataset
from .defenses import (
    AdversarialRegularizer,
    DefenseConfig,
    EarlyStopState,
    adv_fine_tune_step,
    dp_sgd_step,
    early_stopping_update,
    l2_penalty,
    per_sample_gradients,
    ppb_loss,
)
from .nets import MLP, MlpSpec
from .rng import substream
from .tensor import Adam, Tensor, cross_entropy, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    # None defers to DefenseConfig.max_epochs
    max_epochs: int | None = None
    slimming_l1: float = 1e-4


@dataclass
class TrainLog:
    epochs_run: int = 0
    best_val_loss: float = float("nan")
    best_epoch: int = -1
    stopped_early: bool = False
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epochs_run": self.epochs_run,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


def mean_loss(model: MLP, data: Dataset) -> float:
    with no_grad():
        return cross_entropy(model.logits(data.features), data.labels).item()


def apply_mask_inplace(model: MLP, mask: Mapping[str, np.ndarray] | None) -> None:
    if mask is None:
        return
    for name, m in mask.items():
        model.params[name].data *= m


def _slimming_penalty(model: MLP, coeff: float):
    if not coeff:
        return 0.0
    total = 0.0
    for name, p in model.params.items():
        if name.endswith(".scale"):
            total = p.abs().sum() * coeff + total
    return total


def train_classifier(
    model: MLP,
    train: Dataset,
    val: Dataset | None,
    config: TrainConfig,
    defense: DefenseConfig,
    seed: int,
    label: str,
    mask: Mapping[str, np.ndarray] | None = None,
    reference: Dataset | None = None,
) -> TrainLog:
    """Train ``model`` in place and return a log.

    The mask (if any) is re-applied after every update so pruned entries stay
    exactly zero. With a validation set, training stops after
    ``defense.patience`` epochs without improvement and the best snapshot is
    restored.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    max_epochs = defense.max_epochs if config.max_epochs is None else config.max_epochs
    log = TrainLog()
    if max_epochs == 0:
        return log

    shuffle_rng = substream(seed, label, "shuffle")
    defense_rng = substream(seed, label, "defense", defense.kind)
    optimizer = Adam(list(model.params.values()), lr=config.lr)
    slim = config.slimming_l1 if model.spec.use_scales else 0.0
    adv = None
    if defense.kind == "ADV":
        if reference is None:
            raise ValueError("ADV defense needs a reference non-member pool")
        adv = AdversarialRegularizer(
            model.spec.num_classes, reference.features, reference.labels,
            substream(seed, label, "adv-init"),
        )

    state = EarlyStopState()
    x_all, y_all = train.features, train.labels
    n = len(train)
    apply_mask_inplace(model, mask)
    for epoch in range(max_epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = x_all[idx], y_all[idx]
            if defense.kind == "ADV":
                batch_loss = adv_fine_tune_step(
                    model, optimizer, x, y, adv, defense.alpha, defense.weight_decay, defense_rng
                )
            elif defense.kind == "DP":
                batch_loss = _dp_batch(model, x, y, defense, slim, defense_rng)
            else:
                optimizer.zero_grad()
                logits = model.logits(x)
                loss = cross_entropy(logits, y) + l2_penalty(model.params, defense.weight_decay)
                loss = loss + _slimming_penalty(model, slim)
                if defense.kind == "PPB" and len(y) >= 2 and defense.lam > 0:
                    # the pair sum is normalised by the batch like the cross-entropy sum
                    loss = loss + ppb_loss(logits.softmax(), defense.lam, defense_rng) * (1.0 / len(y))
                loss.backward()
                optimizer.step()
                batch_loss = loss.item()
            apply_mask_inplace(model, mask)
            epoch_loss += batch_loss * len(idx)
        log.train_losses.append(epoch_loss / n)
        log.epochs_run = epoch + 1
        if val is None or len(val) == 0:
            continue
        val_loss = mean_loss(model, val)
        log.val_losses.append(val_loss)
        state, stop = early_stopping_update(state, val_loss, model.state_dict(), defense.patience)
        if stop:
            log.stopped_early = True
            break
    if state.best_params is not None:
        model.load_state_dict(state.best_params)
        log.best_val_loss = state.best_val_loss
        log.best_epoch = state.best_epoch
    logger.debug("%s: %d epochs, best val %.4f at %d", label, log.epochs_run,
                 log.best_val_loss, log.best_epoch)
    return log


def _dp_batch(model: MLP, x, y, defense: DefenseConfig, slim: float, rng) -> float:
    grads = per_sample_gradients(model, x, y)
    params = list(model.params.values())
    arrays = [p.data for p in params]
    dp_sgd_step(grads, defense.clip_norm, defense.sigma, defense.dp_lr, arrays, rng)
    # data-independent regularisers are applied outside the privatised gradient
    for name, p in model.params.items():
        reg = defense.weight_decay * p.data
        if slim and name.endswith(".scale"):
            reg = reg + slim * np.sign(p.data)
        p.data -= defense.dp_lr * reg
    return mean_loss(model, Dataset(x, y, num_classes=model.spec.num_classes))


def train_original(
    spec: MlpSpec,
    train: Dataset,
    val: Dataset | None,
    config: TrainConfig,
    seed: int,
    label: str = "original",
    defense: DefenseConfig | None = None,
) -> tuple[MLP, TrainLog]:
    """Initialise and train a classifier; originals always get the Basic defense."""
    model = MLP.initialise(spec, substream(seed, label, "init"))
    log = train_classifier(model, train, val, config, defense or DefenseConfig("Basic"), seed, label)
    return model, log
