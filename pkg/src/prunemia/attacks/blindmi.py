"""BlindMI-style differential comparison with a Gaussian-kernel MMD.

Candidates start in the member set. The non-member side is seeded with the
target's posteriors on random probe inputs. Each round asks, for every
candidate and against the partition fixed at the start of the round,
whether placing it on the non-member side gives a larger MMD than leaving
it with the members. All decisions are applied together and the process
repeats until no label changes or the round budget runs out.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .evaluation import AttackResult, evaluate_attack
from .features import AttackDataset

MAX_ROUNDS = 20


def median_bandwidth(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance, or 1.0 when every point coincides."""
    if len(points) < 2:
        return 1.0
    h = float(np.median(pdist(points)))
    return h if h > 0 else 1.0


def gaussian_kernel(x: np.ndarray, y: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * bandwidth**2))


def mmd2(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    """Biased squared MMD between two point sets."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return float(
        gaussian_kernel(x, x, bandwidth).mean()
        + gaussian_kernel(y, y, bandwidth).mean()
        - 2 * gaussian_kernel(x, y, bandwidth).mean()
    )


def _placement_mmd(kernel: np.ndarray, in_member: np.ndarray, n_cand: int):
    """MMD^2 with each candidate placed on the member side vs the non-member side.

    ``kernel`` covers candidates followed by reference points; ``in_member``
    flags the candidates that currently sit on the member side.
    """
    side_a = np.zeros(len(kernel), dtype=bool)
    side_a[:n_cand] = in_member
    side_b = ~side_a
    diag = np.diag(kernel)[:n_cand]

    r_a = kernel[:n_cand][:, side_a].sum(axis=1)
    r_b = kernel[:n_cand][:, side_b].sum(axis=1)
    s_aa = kernel[np.ix_(side_a, side_a)].sum()
    s_bb = kernel[np.ix_(side_b, side_b)].sum()
    s_ab = kernel[np.ix_(side_a, side_b)].sum()

    # remove each candidate from whichever side it is on
    own_a = in_member.astype(np.float64)
    own_b = 1.0 - own_a
    a0 = side_a.sum() - own_a
    b0 = side_b.sum() - own_b
    ra0 = r_a - own_a * diag
    rb0 = r_b - own_b * diag
    saa0 = s_aa - own_a * (2 * r_a - diag)
    sbb0 = s_bb - own_b * (2 * r_b - diag)
    sab0 = s_ab - own_a * r_b - own_b * r_a

    with np.errstate(divide="ignore", invalid="ignore"):
        in_a = (saa0 + 2 * ra0 + diag) / (a0 + 1) ** 2 + sbb0 / b0**2 - 2 * (sab0 + rb0) / ((a0 + 1) * b0)
        in_b = saa0 / a0**2 + (sbb0 + 2 * rb0 + diag) / (b0 + 1) ** 2 - 2 * (sab0 + ra0) / (a0 * (b0 + 1))
    # the member side may not be emptied, and the reference keeps side b non-empty
    in_b = np.where(a0 > 0, in_b, -np.inf)
    return in_a, in_b


@dataclass
class BlindMiOutcome:
    is_member: np.ndarray
    scores: np.ndarray
    rounds: int
    converged: bool


def blindmi_partition(
    candidates: np.ndarray,
    reference: np.ndarray,
    bandwidth: float | None = None,
    max_rounds: int = MAX_ROUNDS,
    initial: np.ndarray | None = None,
) -> BlindMiOutcome:
    """Iterate the move-to-non-member test to a fixed point.

    A candidate is labelled non-member when the MMD with it on the
    non-member side is at least the MMD with it on the member side.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if len(reference) == 0:
        raise ValueError("BlindMI needs at least one reference non-member")
    points = np.concatenate([candidates, reference])
    h = median_bandwidth(points) if bandwidth is None else bandwidth
    kernel = gaussian_kernel(points, points, h)
    n = len(candidates)
    labels = np.ones(n, dtype=bool) if initial is None else np.asarray(initial, dtype=bool).copy()
    scores = np.zeros(n)
    for rounds in range(1, max_rounds + 1):
        in_a, in_b = _placement_mmd(kernel, labels, n)
        new = in_b < in_a
        scores = in_a - in_b
        if np.array_equal(new, labels):
            return BlindMiOutcome(labels, scores, rounds, True)
        labels = new
    return BlindMiOutcome(labels, scores, max_rounds, False)


def make_probes(low: np.ndarray, high: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random inputs inside the observed per-feature range."""
    low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    if count < 1:
        raise ValueError("probe budget must be positive")
    if low.shape != high.shape or np.any(high < low):
        raise ValueError("invalid probe range")
    return rng.uniform(low, high, size=(count, len(low)))


def blindmi_attack(
    model: Callable[[np.ndarray], np.ndarray],
    target: AttackDataset,
    feature_low: np.ndarray,
    feature_high: np.ndarray,
    rng: np.random.Generator,
    probe_budget: int = 200,
    max_rounds: int = MAX_ROUNDS,
) -> AttackResult:
    probes = make_probes(feature_low, feature_high, probe_budget, rng)
    reference = np.asarray(model(probes), dtype=np.float64)
    if reference.shape != (probe_budget, target.num_classes) or not np.all(np.isfinite(reference)):
        raise ValueError("probe queries returned unusable posteriors")
    outcome = blindmi_partition(
        -np.sort(-target.posteriors, axis=1), -np.sort(-reference, axis=1), max_rounds=max_rounds
    )
    return evaluate_attack(outcome.is_member, target.is_member, outcome.scores)
