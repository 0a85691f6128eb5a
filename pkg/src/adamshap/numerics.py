"""Dense float64 arithmetic, keyed randomness and correlation statistics.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateVarianceError(ValueError):
    pass


def check_finite(arr, what="array"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def as_tensor(x, shape=None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return check_finite(arr)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


class Rng:
    """Counter-based generator (Philox-4x64) keyed by ``(seed, *key)``.

    The key tuple lets callers derive independent streams for a given
    step, permutation or sample without sharing mutable state, e.g.
    ``Rng(seed, 3, 17)`` is the stream for step 3, sample 17.
    """

    def __init__(self, seed: int, *key: int):
        if seed < 0 or any(k < 0 for k in key):
            raise ValueError("seed and key components must be non-negative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, *self.key, *key)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float64)

    def gaussian(self, shape) -> np.ndarray:
        # Box-Muller on two uniform draws; 1 - u keeps the log argument in (0, 1].
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return (r * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)


def uniform(rng: Rng, shape) -> np.ndarray:
    return rng.uniform(shape)


def gaussian(rng: Rng, shape) -> np.ndarray:
    return rng.gaussian(shape)


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DimensionError("need at least two observations")
    check_finite(x, "x")
    check_finite(y, "y")
    return x, y


def pearson(x, y) -> float:
    x, y = _check_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVarianceError("constant input has no correlation")
    r = float((xc @ yc) / (sx * sy))
    return max(-1.0, min(1.0, r))


def midranks(x) -> np.ndarray:
    """1-based ranks, ties receiving the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    start = 0
    while start < x.size:
        stop = start + 1
        while stop < x.size and xs[stop] == xs[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(x, y) -> float:
    x, y = _check_pair(x, y)
    return pearson(midranks(x), midranks(y))


@dataclass(frozen=True)
class CorrelationReport:
    pearson_r: float
    spearman_rho: float
    n: int

    @classmethod
    def from_pairs(cls, x, y) -> "CorrelationReport":
        x, y = _check_pair(x, y)
        return cls(pearson(x, y), spearman(x, y), int(x.size))
