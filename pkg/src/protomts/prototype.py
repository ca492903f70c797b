"""Prototype matching layers and the multivariable representation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, add, concat, euclidean_distance, pairwise_distance, reciprocal, reshape

SIM_EPS = 1e-4

SINGLE = "single"
MULTI = "multi"


@dataclass
class PrototypeLayer:
    prototypes: Tensor  # (count, dim)
    level: str = SINGLE
    variable: int | None = None

    def __post_init__(self):
        if self.prototypes.data.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ContractError(f"prototype matrix must be (count>=1, dim), got {self.prototypes.shape}")
        if self.level not in (SINGLE, MULTI):
            raise ConfigError(f"unknown prototype level {self.level!r}")

    @property
    def count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class MultivariableRepresentation:
    vector: Tensor  # (sum n_k,) or (batch, sum n_k)
    boundaries: list[int]  # start index of each variable block

    def block(self, k: int) -> slice:
        stop = self.boundaries[k + 1] if k + 1 < len(self.boundaries) else self.vector.shape[-1]
        return slice(self.boundaries[k], stop)


def similarity(a: Tensor, b: Tensor) -> Tensor:
    """1 / (eps + ||a - b||_2)."""
    return reciprocal(add(euclidean_distance(a, b), SIM_EPS))


def similarity_matrix(inputs: Tensor, prototypes: Tensor) -> Tensor:
    """Row-wise similarities, shape (batch, count)."""
    return reciprocal(add(pairwise_distance(inputs, prototypes), SIM_EPS))


def match(layer: PrototypeLayer, inputs: Tensor) -> Tensor:
    """Similarity of ``inputs`` to every prototype, in prototype order.

    A vector input of length ``dim`` gives a vector of length ``count``;
    a (batch, dim) matrix gives (batch, count).
    """
    if inputs.data.ndim == 1:
        if inputs.shape[0] != layer.dim:
            raise DimensionError(f"input length {inputs.shape[0]} != prototype dim {layer.dim}")
        return reshape(similarity_matrix(reshape(inputs, (1, -1)), layer.prototypes), (layer.count,))
    if inputs.data.ndim != 2 or inputs.shape[1] != layer.dim:
        raise DimensionError(f"input shape {inputs.shape} incompatible with prototype dim {layer.dim}")
    return similarity_matrix(inputs, layer.prototypes)


def block_boundaries(counts) -> list[int]:
    return [int(s) for s in np.concatenate([[0], np.cumsum(counts)[:-1]])]


def build_multivariable(per_variable: list[Tensor]) -> MultivariableRepresentation:
    """Concatenate per-variable similarity vectors (or batches of them) in variable order."""
    if not per_variable:
        raise ContractError("build_multivariable needs at least one variable")
    counts = [t.shape[-1] for t in per_variable]
    bounds = block_boundaries(counts)
    if len(per_variable) == 1:
        return MultivariableRepresentation(per_variable[0], bounds)
    return MultivariableRepresentation(concat(per_variable, axis=per_variable[0].data.ndim - 1), bounds)


def select_seeds(vectors: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Pick ``count`` distinct row indices by D^2 (k-means++) sampling.

    The first row is uniform; each next row is drawn with probability
    proportional to its squared distance from the nearest row already chosen,
    which spreads the picks across clusters. Rows identical to a pick have
    zero weight; if only such rows remain, the draw falls back to uniform
    over the unpicked indices.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    total = vectors.shape[0]
    if count > total:
        raise ConfigError(f"cannot pick {count} prototypes from {total} vectors")
    if count < 1:
        raise ConfigError("prototype count must be positive")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(total))]
    d2 = ((vectors - vectors[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(count - 1):
        weights = d2.copy()
        weights[chosen] = 0.0
        s = weights.sum()
        if s > 0:
            nxt = int(rng.choice(total, p=weights / s))
        else:
            free = np.setdiff1d(np.arange(total), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((vectors - vectors[nxt]) ** 2).sum(axis=1))
    return np.array(chosen, dtype=np.int64)


def _lloyd(vectors: np.ndarray, centres: np.ndarray, iterations: int) -> tuple[np.ndarray, float]:
    """Lloyd iterations; returns the centres and their inertia (sum of squared distances)."""
    sq = (vectors**2).sum(axis=1)
    for _ in range(iterations + 1):
        d2 = sq[:, None] - 2.0 * vectors @ centres.T + (centres**2).sum(axis=1)[None, :]
        owner = np.argmin(d2, axis=1)
        moved = centres.copy()
        for j in range(centres.shape[0]):
            members = owner == j
            if members.any():  # an emptied cluster keeps its centre
                moved[j] = vectors[members].mean(axis=0)
        if np.array_equal(moved, centres):
            break
        centres = moved
    inertia = float(np.maximum(d2[np.arange(vectors.shape[0]), owner], 0.0).sum())
    return centres, inertia


def kmeans_seeds(vectors: np.ndarray, count: int, seed: int, restarts: int = 8, iterations: int = 30) -> np.ndarray:
    """Distinct row indices near the best of several k-means++ / Lloyd runs.

    Each restart seeds with :func:`select_seeds` and runs Lloyd iterations;
    the run with the lowest inertia wins. Its centres are then snapped, in
    order, to their nearest row not already taken.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    streams = np.random.SeedSequence(seed).generate_state(restarts)
    best, best_inertia = None, np.inf
    for s in streams:
        centres, inertia = _lloyd(vectors, vectors[select_seeds(vectors, count, int(s))], iterations)
        if inertia < best_inertia:
            best, best_inertia = centres, inertia
    taken = np.zeros(vectors.shape[0], dtype=bool)
    out = np.empty(count, dtype=np.int64)
    for j, c in enumerate(best):
        d2 = ((vectors - c) ** 2).sum(axis=1)
        d2[taken] = np.inf
        out[j] = int(np.argmin(d2))
        taken[out[j]] = True
    return out


def init_prototypes(
    level: str, count: int, encoded, seed: int, variable: int | None = None, refine: bool = True
) -> PrototypeLayer:
    """Prototypes placed exactly on ``count`` distinct training encodings.

    With ``refine`` (the default) they are the encodings nearest the k-means
    centres (:func:`kmeans_seeds`); otherwise a single k-means++ draw.
    """
    encoded = encoded.data if isinstance(encoded, Tensor) else np.asarray(encoded, dtype=np.float64)
    idx = kmeans_seeds(encoded, count, seed) if refine else select_seeds(encoded, count, seed)
    return PrototypeLayer(Tensor(encoded[idx].copy(), requires_grad=True), level=level, variable=variable)
