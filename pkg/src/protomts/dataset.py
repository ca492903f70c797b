"""Labeled multivariable time series, normalization, splitting and pair sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Sample:
    """One instance: ``variables[k]`` is the length-n series of variable k."""

    variables: np.ndarray
    label: int


@dataclass(frozen=True)
class Pair:
    index_a: int
    index_b: int
    dissimilar: int  # 0 same class, 1 different class


@dataclass
class Dataset:
    """A stack of samples stored as an array of shape (count, d, n).

    ``norm_mean`` / ``norm_std`` hold the per-variable statistics last applied
    by :func:`normalize` (None while the data is raw).
    """

    X: np.ndarray
    y: np.ndarray
    class_names: list[str]
    name: str = "dataset"
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    patterns: np.ndarray | None = None  # synthetic ground truth, shape (count, d)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 3:
            raise DataError(f"X must have shape (count, d, n), got {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DataError(f"{self.X.shape[0]} samples but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            X=self.X[indices].copy(),
            y=self.y[indices].copy(),
            class_names=list(self.class_names),
            name=self.name,
            norm_mean=None if self.norm_mean is None else self.norm_mean.copy(),
            norm_std=None if self.norm_std is None else self.norm_std.copy(),
            patterns=None if self.patterns is None else self.patterns[indices].copy(),
            meta=dict(self.meta),
        )

    def copy(self) -> Dataset:
        return self.subset(np.arange(len(self)))

    @classmethod
    def from_samples(cls, samples, class_names, name="dataset") -> Dataset:
        samples = list(samples)
        if not samples:
            raise DataError("from_samples needs at least one sample; build empty datasets from arrays")
        X = np.stack([np.asarray(s.variables, dtype=np.float64) for s in samples])
        y = np.array([s.label for s in samples], dtype=np.int64)
        return cls(X, y, list(class_names), name=name)


def variable_statistics(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable mean and floored std, pooled over samples and time."""
    if len(data) == 0:
        raise DataError("cannot compute statistics of an empty dataset")
    mean = data.X.mean(axis=(0, 2))
    std = np.maximum(data.X.std(axis=(0, 2)), STD_FLOOR)
    return mean, std


def apply_normalization(data: Dataset, mean: np.ndarray, std: np.ndarray) -> None:
    data.X = (data.X - mean[None, :, None]) / std[None, :, None]
    data.norm_mean = np.array(mean, dtype=np.float64)
    data.norm_std = np.array(std, dtype=np.float64)


def normalize(train: Dataset, others=()) -> None:
    """Z-score every variable in place using statistics of ``train`` only."""
    mean, std = variable_statistics(train)
    for ds in (train, *others):
        if ds.d != train.d:
            raise DataError(f"variable count {ds.d} does not match training data ({train.d})")
        apply_normalization(ds, mean, std)


def stratified_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split each class separately so both sides keep the class proportions."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.n_classes):
        members = np.flatnonzero(data.y == c)
        if members.size == 0:
            continue
        if members.size < 2:
            raise DataError(f"class {data.class_names[c]!r} has a single sample; cannot split")
        members = rng.permutation(members)
        n_test = int(np.clip(round(test_fraction * members.size), 1, members.size - 1))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return data.subset(train_idx), data.subset(test_idx)


def sample_pairs(data: Dataset, count: int, seed: int) -> list[Pair]:
    """Balanced pairs: ceil(count/2) same-class first, then floor(count/2) different-class."""
    return _pairs_from_arrays(*pair_arrays(data.y, count, seed))


def pair_arrays(labels, count: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized core of :func:`sample_pairs`: index_a, index_b, dissimilar flags."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DataError("pair sampling needs at least two classes")
    if count < 0:
        raise ConfigError("pair count must be nonnegative")
    rng = np.random.default_rng(seed)
    n_same = (count + 1) // 2
    n_diff = count // 2

    groups = {c: np.flatnonzero(labels == c) for c in classes}
    eligible = np.concatenate([g for g in groups.values() if g.size >= 2]) if n_same else np.array([], int)
    if n_same and eligible.size == 0:
        raise DataError("no class has two samples; same-class pairs impossible")
    a_same = rng.choice(eligible, size=n_same) if n_same else np.array([], dtype=np.int64)
    b_same = np.empty(n_same, dtype=np.int64)
    for t, i in enumerate(a_same):
        g = groups[labels[i]]
        j = g[rng.integers(g.size - 1)]
        if j == i:  # skip over i: draw from the group minus one element
            j = g[-1]
        b_same[t] = j

    complement = {c: np.flatnonzero(labels != c) for c in classes} if n_diff else {}
    a_diff = rng.integers(labels.size, size=n_diff)
    b_diff = np.empty(n_diff, dtype=np.int64)
    for t, i in enumerate(a_diff):
        pool = complement[labels[i]]
        b_diff[t] = pool[rng.integers(pool.size)]

    index_a = np.concatenate([a_same, a_diff]).astype(np.int64)
    index_b = np.concatenate([b_same, b_diff]).astype(np.int64)
    flags = np.concatenate([np.zeros(n_same, np.int64), np.ones(n_diff, np.int64)])
    return index_a, index_b, flags


def _pairs_from_arrays(a, b, flags) -> list[Pair]:
    return [Pair(int(i), int(j), int(f)) for i, j, f in zip(a, b, flags)]
