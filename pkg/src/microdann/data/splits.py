"""Stratified splits, few-shot sampling and batch iteration."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ..errors import InvalidConfig, InvalidData
from .synth import ImageSample

MIN_PER_CLASS = 7


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.15
    val_fraction: float = 0.30
    seed: int = 0

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidConfig(f"{name} must lie in (0, 1), got {v}")


def split_counts(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """``(train, val, test)`` sizes for one class of ``n`` samples.

    Test takes ``floor(test_fraction * n)`` (at least 1); validation takes
    the nearest integer (halves up) to ``val_fraction`` of the remainder.
    """
    n_test = max(1, math.floor(Fraction(str(spec.test_fraction)) * n))
    rest = n - n_test
    n_val = math.floor(Fraction(str(spec.val_fraction)) * rest + Fraction(1, 2))
    return rest - n_val, n_val, n_test


def _by_class(samples):
    groups = defaultdict(list)
    for s in samples:
        groups[s.class_label].append(s)
    return dict(sorted(groups.items()))


def split_source(samples: list[ImageSample], spec: SplitSpec = SplitSpec()):
    """Per-class stratified ``(train, val, test)`` split, deterministic per seed."""
    groups = _by_class(samples)
    for label, members in groups.items():
        if len(members) < MIN_PER_CLASS:
            raise InvalidData(f"class {label} has {len(members)} samples; at least {MIN_PER_CLASS} required")
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for label, members in groups.items():
        n_train, n_val, n_test = split_counts(len(members), spec)
        order = rng.permutation(len(members))
        picked = [members[i] for i in order]
        test.extend(picked[:n_test])
        val.extend(picked[n_test:n_test + n_val])
        train.extend(picked[n_test + n_val:])
    return train, val, test


def split_target(samples: list[ImageSample], pool_per_class: int = 5, seed: int = 0):
    """Reserve up to ``pool_per_class`` images per class for few-shot training.

    Returns ``(shot_pool, test)``.  The test set does not depend on how many
    shots are later drawn from the pool.
    """
    rng = np.random.default_rng(seed)
    pool, test = [], []
    for label, members in _by_class(samples).items():
        if len(members) <= pool_per_class:
            raise InvalidData(f"class {label} has {len(members)} samples; need more than {pool_per_class}")
        order = rng.permutation(len(members))
        picked = [members[i] for i in order]
        pool.extend(picked[:pool_per_class])
        test.extend(picked[pool_per_class:])
    return pool, test


def sample_few_shot(target: list[ImageSample], k: int, seed: int = 0, exclude=()) -> list[ImageSample]:
    """Exactly ``k`` labelled samples per class, none of them in ``exclude``."""
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    excluded = {id(s) for s in exclude}
    rng = np.random.default_rng(seed)
    out = []
    for label, members in _by_class(target).items():
        members = [s for s in members if id(s) not in excluded]
        if len(members) < k:
            raise InvalidData(f"class {label} has {len(members)} eligible samples, {k} requested")
        idx = rng.choice(len(members), size=k, replace=False)
        out.extend(members[i] for i in sorted(idx))
    return out


class EpochBatcher:
    """Shuffled mini-batches over the pooled source and target samples.

    ``epoch(i)`` is a pure function of ``(seed, i)``; the last partial batch
    is kept.
    """

    def __init__(self, source_train, target_shots, batch_size: int, seed: int = 0):
        if batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        self.pool = list(source_train) + list(target_shots)
        if not self.pool:
            raise InvalidData("empty training pool")
        self.batch_size = batch_size
        self.seed = seed

    def __len__(self):
        return -(-len(self.pool) // self.batch_size)

    def epoch(self, index: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        order = rng.permutation(len(self.pool))
        for start in range(0, len(order), self.batch_size):
            yield [self.pool[i] for i in order[start:start + self.batch_size]]


def make_batches(source_train, target_shots, batch_size: int, seed: int = 0) -> EpochBatcher:
    return EpochBatcher(source_train, target_shots, batch_size, seed)
