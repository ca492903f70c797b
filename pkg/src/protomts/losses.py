"""Training objectives: prototype regularizers and the contrastive pair loss.

The diversity term uses ``1 / log(1 + dbar + delta)`` rather than the bare
``1 / log(dbar)``, which is undefined at ``dbar = 1`` and negative below it.
The repaired form stays positive and decreases as prototypes spread out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    clamp_max,
    euclidean_distance,
    log,
    mean,
    min_along,
    mul,
    pairwise_distance,
    reciprocal,
    relu,
    square,
    sub,
    take,
    total,
)

DIVERSITY_DELTA = 1e-6
DIVERSITY_CAP = 1e6


@dataclass(frozen=True)
class RegularizerWeights:
    diversity: float = 0.001
    similarity: float = 0.001
    coverage: float = 0.001
    margin: float = 1.0

    def __post_init__(self):
        for name in ("diversity", "similarity", "coverage"):
            if getattr(self, name) < 0:
                raise ConfigError(f"regularizer weight {name} must be nonnegative")
        if self.margin <= 0:
            raise ConfigError("contrastive margin must be positive")


def mean_nearest_later_distance(prototypes: Tensor) -> Tensor:
    """(1/(m-1)) * sum_{j<m} min_{i>j} ||p_i - p_j||."""
    m = prototypes.shape[0]
    if m < 2:
        raise ContractError("diversity needs at least two prototypes")
    dist = pairwise_distance(prototypes, prototypes)
    masked = dist.data + np.tril(np.full((m, m), np.inf))  # keep i > j only
    rows = np.arange(m - 1)
    cols = np.argmin(masked[: m - 1], axis=1)
    return mean(take(dist, (rows, cols)))


def diversity_loss(prototypes: Tensor) -> Tensor:
    dbar = mean_nearest_later_distance(prototypes)
    return clamp_max(reciprocal(log(add(dbar, 1.0 + DIVERSITY_DELTA))), DIVERSITY_CAP)


def _check_pair(prototypes: Tensor, encodings: Tensor) -> None:
    if prototypes.data.ndim != 2 or encodings.data.ndim != 2 or prototypes.shape[1] != encodings.shape[1]:
        raise DimensionError(f"prototypes {prototypes.shape} and encodings {encodings.shape} are incompatible")


def similarity_loss(prototypes: Tensor, encodings: Tensor) -> Tensor:
    """Sum over prototypes of the distance to the nearest encoding."""
    _check_pair(prototypes, encodings)
    if encodings.shape[0] == 0:
        raise ContractError("similarity loss needs at least one encoding")
    return total(min_along(pairwise_distance(prototypes, encodings), axis=1))


def coverage_loss(prototypes: Tensor, encodings: Tensor) -> Tensor:
    """Sum over encodings of the distance to the nearest prototype."""
    _check_pair(prototypes, encodings)
    if prototypes.shape[0] == 0:
        raise ContractError("coverage loss needs at least one prototype")
    return total(min_along(pairwise_distance(prototypes, encodings), axis=0))


def contrastive_loss(enc_a: Tensor, enc_b: Tensor, dissimilar: int, margin: float = 1.0) -> Tensor:
    """(1-y) D^2 / 2 + y max(0, margin - D)^2 / 2 for one pair."""
    if margin <= 0:
        raise ConfigError("contrastive margin must be positive")
    dist = euclidean_distance(enc_a, enc_b)
    if dissimilar:
        return mul(square(relu(sub(margin, dist))), 0.5)
    return mul(square(dist), 0.5)


def contrastive_batch(enc_a: Tensor, enc_b: Tensor, dissimilar, margin: float = 1.0) -> Tensor:
    """Mean contrastive loss over row-aligned pairs of encodings."""
    if margin <= 0:
        raise ConfigError("contrastive margin must be positive")
    if enc_a.shape != enc_b.shape or enc_a.data.ndim != 2:
        raise DimensionError(f"paired encodings must share a (batch, dim) shape: {enc_a.shape} vs {enc_b.shape}")
    y = np.asarray(dissimilar, dtype=np.float64)
    diff = enc_a.data - enc_b.data
    dist = np.sqrt((diff * diff).sum(axis=1))
    hinge = np.maximum(margin - dist, 0.0)
    per_pair = 0.5 * (1.0 - y) * dist**2 + 0.5 * y * hinge**2
    B = y.size

    def backward(g):
        # dL/dD per pair, then through D = ||a - b||; zero subgradient at D = 0.
        dldd = (1.0 - y) * dist - y * hinge
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(dist[:, None] > 0, diff / np.where(dist > 0, dist, 1.0)[:, None], 0.0)
        ga = (float(g) / B) * dldd[:, None] * unit
        return ga, -ga

    return Tensor._make(np.asarray(per_pair.mean()), (enc_a, enc_b), backward, "contrastive")


def regularizer_terms(layer_prototypes: Tensor, encodings: Tensor) -> dict[str, Tensor]:
    terms = {
        "similarity": similarity_loss(layer_prototypes, encodings),
        "coverage": coverage_loss(layer_prototypes, encodings),
    }
    if layer_prototypes.shape[0] >= 2:  # diversity is undefined for a single prototype
        terms["diversity"] = diversity_loss(layer_prototypes)
    return terms


def total_stage_loss(ce: Tensor, weights: RegularizerWeights, layers, encodings) -> tuple[Tensor, dict[str, float]]:
    """ce + sum over layers of the weighted diversity, similarity and coverage terms.

    ``layers`` and ``encodings`` are aligned lists: prototype matrix i is
    regularized against encodings i. Returns the loss and a float breakdown.
    """
    parts = {"ce": float(ce.data), "diversity": 0.0, "similarity": 0.0, "coverage": 0.0}
    loss = ce
    for protos, enc in zip(layers, encodings):
        for name, term in regularizer_terms(protos, enc).items():
            lam = getattr(weights, name)
            parts[name] += float(term.data)
            if lam:
                loss = add(loss, mul(term, lam))
    return loss, parts
