"""Learned attacks: NN / Top3NN / NNCls baselines and the self-attention attack.

Inputs are log-scaled and standardised with shadow statistics before they
reach either network. Posteriors of a well-fit model sit within 1e-3 of 0
or 1, and the membership signal lives in those last digits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nets import MLP, AttentionAttackSpec, MlpSpec, SamiaNet
from ..rng import substream
from ..tensor import SGD, cross_entropy, step_lr
from .evaluation import AttackResult, evaluate_attack
from .features import AttackDataset

NN_KINDS = ("NN", "Top3NN", "NNCls")

_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackTraining:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0


class Standardizer:
    """Column-wise z-score fitted on shadow rows."""

    def __init__(self, x: np.ndarray):
        self.mean = x.mean(axis=0)
        self.std = np.maximum(x.std(axis=0), 1e-8)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def log_scale(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, _LOG_FLOOR))


def feature_map(kind: str, data: AttackDataset) -> np.ndarray:
    """Raw (un-scaled) feature matrix for an NN-family attack."""
    if kind == "NN":
        return data.posteriors.copy()
    if kind == "Top3NN":
        return -np.sort(-data.posteriors, axis=1)[:, :3]
    if kind == "NNCls":
        return np.concatenate([data.posteriors, data.onehot], axis=1)
    raise ValueError(f"unknown NN attack {kind!r}")


def _scaled_features(kind: str, data: AttackDataset) -> np.ndarray:
    raw = feature_map(kind, data)
    if kind == "NNCls":
        k = data.num_classes
        return np.concatenate([log_scale(raw[:, :k]), raw[:, k:]], axis=1)
    return log_scale(raw)


def train_binary(forward, params, inputs: list[np.ndarray], targets: np.ndarray,
                 settings: AttackTraining, label: str) -> None:
    """Mini-batch SGD with the step schedule on a two-class cross-entropy."""
    n = len(targets)
    if n == 0:
        raise ValueError("no shadow rows to train on")
    opt = SGD(params, lr=settings.lr, momentum=settings.momentum)
    shuffle_rng = substream(settings.seed, label, "shuffle")
    dropout_rng = substream(settings.seed, label, "dropout")
    for epoch in range(settings.epochs):
        opt.lr = step_lr(epoch, settings.lr, settings.epochs)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            opt.zero_grad()
            logits = forward(*[x[idx] for x in inputs], training=True, rng=dropout_rng)
            cross_entropy(logits, targets[idx]).backward()
            opt.step()


@dataclass
class NNAttack:
    kind: str
    net: MLP
    scaler: Standardizer

    def member_probability(self, data: AttackDataset) -> np.ndarray:
        x = self.scaler(_scaled_features(self.kind, data))
        if x.shape[1] != self.net.spec.input_dim:
            raise ValueError(f"{self.kind}: feature dim {x.shape[1]} != {self.net.spec.input_dim}")
        return self.net.predict_proba(x)[:, 1]


def fit_nn_attack(kind: str, shadow: AttackDataset, settings: AttackTraining = AttackTraining()) -> NNAttack:
    if kind not in NN_KINDS:
        raise ValueError(f"unknown NN attack {kind!r}")
    raw = _scaled_features(kind, shadow)
    scaler = Standardizer(raw)
    x = scaler(raw)
    spec = MlpSpec(x.shape[1], 2, hidden=(128, 64), dropout=0.2)
    net = MLP.initialise(spec, substream(settings.seed, "attack", kind, "init"))
    train_binary(net.logits, list(net.params.values()), [x],
                 shadow.is_member.astype(np.int64), settings, f"attack/{kind}")
    return NNAttack(kind, net, scaler)


def nn_attack(kind: str, shadow: AttackDataset, target: AttackDataset,
              settings: AttackTraining = AttackTraining()) -> AttackResult:
    attack = fit_nn_attack(kind, shadow, settings)
    scores = attack.member_probability(target)
    return evaluate_attack(scores > 0.5, target.is_member, scores)


@dataclass
class SamiaAttack:
    net: SamiaNet
    posterior_scaler: Standardizer
    sensitivity_scaler: Standardizer

    def inputs(self, data: AttackDataset) -> list[np.ndarray]:
        if data.sensitivity is None:
            raise ValueError("SAMIA needs the sensitivity column")
        if data.num_classes != self.net.spec.num_classes:
            raise ValueError(
                f"SAMIA was built for {self.net.spec.num_classes} classes, rows have {data.num_classes}"
            )
        return [
            self.posterior_scaler(log_scale(data.posteriors)),
            self.sensitivity_scaler(log_scale(data.sensitivity)),
            data.onehot,
        ]

    def member_probability(self, data: AttackDataset) -> np.ndarray:
        return self.net.predict_proba(*self.inputs(data))[:, 1]


def fit_samia(shadow: AttackDataset, spec: AttentionAttackSpec | None = None,
              settings: AttackTraining = AttackTraining()) -> SamiaAttack:
    if shadow.sensitivity is None:
        raise ValueError("SAMIA needs the sensitivity column")
    spec = spec or AttentionAttackSpec(shadow.num_classes)
    attack = SamiaAttack(
        SamiaNet.initialise(spec, substream(settings.seed, "attack", "SAMIA", "init")),
        Standardizer(log_scale(shadow.posteriors)),
        Standardizer(log_scale(shadow.sensitivity)),
    )
    train_binary(attack.net.logits, list(attack.net.params.values()), attack.inputs(shadow),
                 shadow.is_member.astype(np.int64), settings, "attack/SAMIA")
    return attack


def samia_attack(shadow: AttackDataset, target: AttackDataset,
                 spec: AttentionAttackSpec | None = None,
                 settings: AttackTraining = AttackTraining()) -> AttackResult:
    attack = fit_samia(shadow, spec, settings)
    scores = attack.member_probability(target)
    return evaluate_attack(scores > 0.5, target.is_member, scores)
