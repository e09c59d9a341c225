"""Isolation forest scoring of slide representations.

Standard construction: each tree is grown on an independent seeded
subsample with uniform random axis-aligned splits until isolation or the
height limit; the anomaly score is s = 2^(-E[h] / c(psi)). This module
reports the normality score 1 - s, so in-distribution points score high.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_TREES = 100
DEFAULT_SUBSAMPLE = 256

_EULER_GAMMA = 0.5772156649015329


def harmonic(n: int) -> float:
    """H(n); exact partial sum for small n, ln(n) + gamma beyond."""
    if n <= 0:
        return 0.0
    if n <= 10000:
        return float(np.sum(1.0 / np.arange(1, n + 1)))
    return math.log(n) + _EULER_GAMMA


def expected_path_length(n: int) -> float:
    """c(n), the average unsuccessful-search path length of a BST of n
    points; the score normalizer. c(2) is exactly 1."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass(frozen=True)
class _Node:
    feature: int = -1               # -1 marks a leaf
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    size: int = 0


@dataclass(frozen=True)
class IsolationForest:
    trees: tuple
    n_trees: int
    subsample: int                  # effective per-tree sample size psi
    height_limit: int
    seed: int
    n_features: int


def _grow(points, depth, height_limit, rng):
    n = len(points)
    if depth >= height_limit or n <= 1:
        return _Node(size=n)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    usable = np.flatnonzero(hi > lo)
    if usable.size == 0:
        return _Node(size=n)
    feature = int(usable[rng.integers(usable.size)])
    threshold = float(rng.uniform(lo[feature], hi[feature]))
    mask = points[:, feature] < threshold
    if not mask.any() or mask.all():
        # uniform(lo, hi) can land on the boundary; retreat to a leaf
        return _Node(size=n)
    return _Node(
        feature=feature, threshold=threshold,
        left=_grow(points[mask], depth + 1, height_limit, rng),
        right=_grow(points[~mask], depth + 1, height_limit, rng),
        size=n,
    )


def fit_forest(train, n_trees=DEFAULT_TREES, subsample=DEFAULT_SUBSAMPLE, seed=0) -> IsolationForest:
    """Grow ``n_trees`` isolation trees on independent seeded subsamples.

    The height limit is ceil(log2(psi)) with psi the effective subsample
    size min(subsample, n). An all-identical training set yields single-leaf
    trees and uniform scores.
    """
    points = np.asarray(train, dtype=np.float64)
    if points.ndim != 2 or len(points) < 2:
        raise DataError("training set must be 2D with at least 2 rows")
    if n_trees < 1 or subsample < 2:
        raise ConfigError("need n_trees >= 1 and subsample >= 2")
    psi = min(subsample, len(points))
    height_limit = math.ceil(math.log2(psi))
    trees = []
    for child_seed in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child_seed)
        sample = points[rng.choice(len(points), size=psi, replace=False)]
        trees.append(_grow(sample, 0, height_limit, rng))
    return IsolationForest(tuple(trees), n_trees, psi, height_limit, seed, points.shape[1])


def _path_length(node, x):
    depth = 0
    while node.feature >= 0:
        node = node.left if x[node.feature] < node.threshold else node.right
        depth += 1
    return depth + expected_path_length(node.size)


def average_path_length(forest: IsolationForest, x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean([_path_length(tree, x) for tree in forest.trees]))


def anomaly_score(forest: IsolationForest, x) -> float:
    """The standard score s = 2^(-E[h(x)] / c(psi)) in (0, 1); higher means
    easier to isolate."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (forest.n_features,):
        raise DataError(
            f"dimension mismatch: query {x.shape}, forest trained on d={forest.n_features}"
        )
    return score_from_path(average_path_length(forest, x), forest.subsample)


def score_from_path(mean_path: float, psi: int) -> float:
    return float(2.0 ** (-mean_path / expected_path_length(psi)))


def normality_score(forest: IsolationForest, x) -> float:
    """1 - s: higher means more in-distribution."""
    return 1.0 - anomaly_score(forest, x)


def normality_scores(forest: IsolationForest, queries):
    queries = np.asarray(queries, dtype=np.float64)
    return np.array([normality_score(forest, q) for q in queries])
