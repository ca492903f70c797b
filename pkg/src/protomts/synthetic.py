"""Simulated benchmark: three informative variables plus one irrelevant one.

Each relevant variable carries one of four patterns, and the class label
encodes the combination, so ``label = p1 + 4 * p2 + 16 * p3`` with 64 classes.

* variable 1: a length-16 local motif at a random offset (position irrelevant)
* variable 2: a Gaussian bump whose position *is* the pattern
* variable 3: a sinusoid whose cycle count is the pattern, random phase
* variable 4: one of four random-frequency sinusoids drawn independently of the label
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import ConfigError

PATTERNS = 4
N_RELEVANT = 3
MOTIF_LENGTH = 16
BUMP_SIGMA = 3.0
FREQUENCY_CYCLES = (2, 4, 8, 16)
IRRELEVANT_CYCLE_RANGE = (3.0, 12.0)
MIN_LENGTH = 64

SHIFT_INVARIANT = "shift-invariant-local"
SHIFT_VARIANT = "shift-variant-local"
FREQUENCY = "frequency"
IRRELEVANT = "irrelevant"
FAMILIES = (SHIFT_INVARIANT, SHIFT_VARIANT, FREQUENCY, IRRELEVANT)


@dataclass(frozen=True)
class SyntheticConfig:
    series_length: int = 128
    samples_per_class: int = 100
    noise_std: float = 0.1
    seed: int = 0
    patterns_per_variable: int = PATTERNS

    def __post_init__(self):
        if self.patterns_per_variable != PATTERNS:
            raise ConfigError("patterns_per_variable is fixed at 4")
        if self.series_length < MIN_LENGTH:
            raise ConfigError(f"series_length must be >= {MIN_LENGTH}, got {self.series_length}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")

    @property
    def n_classes(self) -> int:
        return self.patterns_per_variable**N_RELEVANT


@dataclass(frozen=True)
class PatternSpec:
    variable: int  # 0-based
    pattern: int
    family: str
    cycles: float | None = None  # irrelevant family only

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown pattern family {self.family!r}")
        if not 0 <= self.pattern < PATTERNS:
            raise ConfigError(f"pattern index must be in [0, 4), got {self.pattern}")


def family_of(variable: int) -> str:
    return FAMILIES[variable]


def decompose_label(label: int) -> tuple[int, int, int]:
    """Pattern indices of variables 1-3 for a class label."""
    return label % 4, (label // 4) % 4, label // 16


def compose_label(p1: int, p2: int, p3: int) -> int:
    return p1 + 4 * p2 + 16 * p3


def motif(pattern: int) -> np.ndarray:
    """The four length-16 shift-invariant templates."""
    t = np.arange(MOTIF_LENGTH)
    tri = 1.0 - np.abs(t - 7.5) / 7.5
    tri = tri / tri.max()
    if pattern == 0:
        return tri
    if pattern == 1:
        return -tri
    if pattern == 2:
        out = np.zeros(MOTIF_LENGTH)
        out[2:14] = 1.0
        return out
    if pattern == 3:
        out = np.zeros(MOTIF_LENGTH)
        out[[3, 4, 11, 12]] = 1.0
        return out
    raise ConfigError(f"pattern index must be in [0, 4), got {pattern}")


def bump_center(pattern: int, n: int) -> int:
    # 8, 40, 72, 104 at n=128
    return 8 + pattern * (n // 4)


def render_pattern(spec: PatternSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Noiseless pattern of length ``n`` with unit peak amplitude.

    ``rng`` supplies the per-sample randomness (motif offset or phase).
    """
    if n < MIN_LENGTH:
        raise ConfigError(f"series length must be >= {MIN_LENGTH}, got {n}")
    t = np.arange(n, dtype=np.float64)
    if spec.family == SHIFT_INVARIANT:
        out = np.zeros(n)
        offset = int(rng.integers(0, n - MOTIF_LENGTH + 1))
        out[offset : offset + MOTIF_LENGTH] = motif(spec.pattern)
        return out
    if spec.family == SHIFT_VARIANT:
        c = bump_center(spec.pattern, n)
        out = np.exp(-((t - c) ** 2) / (2.0 * BUMP_SIGMA**2))
        out[np.abs(t - c) > MOTIF_LENGTH // 2] = 0.0
        return out
    phase = rng.uniform(0.0, 2.0 * np.pi)
    if spec.family == FREQUENCY:
        cycles = FREQUENCY_CYCLES[spec.pattern]
    else:
        if spec.cycles is None:
            raise ConfigError("irrelevant patterns need a cycle count")
        cycles = spec.cycles
    return np.sin(2.0 * np.pi * cycles * t / n + phase)


def irrelevant_cycles(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xD4])
    return rng.uniform(*IRRELEVANT_CYCLE_RANGE, size=PATTERNS)


def generate(config: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Build the full 64-class dataset; deterministic in ``config.seed``.

    Each sample draws from its own stream keyed by (seed, sample index).
    """
    n = config.series_length
    n_classes = config.n_classes
    total = n_classes * config.samples_per_class
    cycles4 = irrelevant_cycles(config.seed)
    X = np.empty((total, 4, n))
    y = np.repeat(np.arange(n_classes), config.samples_per_class)
    patterns = np.empty((total, 4), dtype=np.int64)
    for i in range(total):
        rng = np.random.default_rng([config.seed, i])
        p = (*decompose_label(int(y[i])), int(rng.integers(PATTERNS)))
        patterns[i] = p
        for k in range(4):
            spec = PatternSpec(k, p[k], family_of(k), cycles4[p[k]] if k == 3 else None)
            X[i, k] = render_pattern(spec, n, rng)
        if config.noise_std > 0:
            X[i] += rng.normal(0.0, config.noise_std, size=(4, n))
    names = [f"c{c:02d}" for c in range(n_classes)]
    return Dataset(
        X,
        y,
        names,
        name="synthetic",
        patterns=patterns,
        meta={"irrelevant_cycles": cycles4.tolist()},
    )
