"""Sample-quality metrics: k-NN precision/recall and the energy two-sample test."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError

RADIUS_FLOOR = 1e-12


class DegenerateManifoldWarning(UserWarning):
    pass


@dataclass
class PrSample:
    reference_set: np.ndarray
    eval_set: np.ndarray
    k: int = 3

    def __post_init__(self):
        self.reference_set = np.atleast_2d(np.asarray(self.reference_set, dtype=float))
        self.eval_set = np.atleast_2d(np.asarray(self.eval_set, dtype=float))
        if self.k < 1:
            raise InvalidArgumentError(f"k must be >= 1, got {self.k}")
        if self.reference_set.shape[1] != self.eval_set.shape[1]:
            raise InvalidArgumentError("reference and eval sets differ in dimension")
        if len(self.reference_set) <= self.k or len(self.eval_set) <= self.k:
            raise InvalidArgumentError("each set needs more than k points")


def knn_radii(points: np.ndarray, k: int, chunk: int = 2048) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    radii = np.empty(len(points))
    for i in range(0, len(points), chunk):
        d = cdist(points[i:i + chunk], points)
        # column k after partition: index 0 is the point itself (distance 0)
        radii[i:i + chunk] = np.partition(d, k, axis=1)[:, k]
    if np.any(radii <= 0):
        warnings.warn("duplicate points give zero k-NN radii; flooring at 1e-12",
                      DegenerateManifoldWarning, stacklevel=3)
        radii = np.maximum(radii, RADIUS_FLOOR)
    return radii


def _coverage(manifold: np.ndarray, radii: np.ndarray, queries: np.ndarray, chunk: int = 2048) -> float:
    inside = np.empty(len(queries), dtype=bool)
    for i in range(0, len(queries), chunk):
        d = cdist(queries[i:i + chunk], manifold)
        inside[i:i + chunk] = np.any(d <= radii[None, :], axis=1)
    return float(inside.mean())


def knn_precision_recall(pr: PrSample) -> tuple[float, float]:
    """Improved precision/recall.

    Precision is the fraction of eval points falling in the union of the
    reference points' k-NN balls; recall swaps the roles of the two sets.
    """
    ref, ev, k = pr.reference_set, pr.eval_set, pr.k
    precision = _coverage(ref, knn_radii(ref, k), ev)
    recall = _coverage(ev, knn_radii(ev, k), ref)
    return precision, recall


def energy_distance(x, y) -> float:
    """V-statistic ``2 E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


@dataclass(frozen=True)
class EnergyTest:
    statistic: float
    p_value: float
    null_quantile_95: float


def energy_test(x, y, rng: np.random.Generator, n_permutations: int = 200) -> EnergyTest:
    """Permutation test of equal distributions based on the energy distance."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    pooled = np.vstack([x, y])
    dist = cdist(pooled, pooled)
    n, m = len(x), len(y)

    def stat(mask: np.ndarray) -> float:
        a = mask.astype(float)
        b = 1.0 - a
        da, db = dist @ a, dist @ b
        return 2 * (a @ db) / (n * m) - (a @ da) / n**2 - (b @ db) / m**2

    base = np.zeros(n + m, dtype=bool)
    base[:n] = True
    observed = stat(base)
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        null[i] = stat(rng.permutation(base))
    p = (1 + np.sum(null >= observed)) / (n_permutations + 1)
    return EnergyTest(float(observed), float(p), float(np.quantile(null, 0.95)))
