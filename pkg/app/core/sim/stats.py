"""Streaming per-element mean and variance (Welford update, Chan merge)."""

from typing import Dict, Optional, Tuple

import numpy as np


class MomentAccumulator:
    def __init__(self, shape: Optional[tuple] = None):
        self.n = 0
        self.mean: Optional[np.ndarray] = None if shape is None else np.zeros(shape)
        self.m2: Optional[np.ndarray] = None if shape is None else np.zeros(shape)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        if self.mean is None:
            self.mean = np.zeros_like(x)
            self.m2 = np.zeros_like(x)
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + delta * (x - self.mean)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """Combined accumulator; neither operand is modified."""
        if other.n == 0:
            return self.copy()
        if self.n == 0:
            return other.copy()
        n = self.n + other.n
        delta = other.mean - self.mean
        merged = MomentAccumulator()
        merged.n = n
        merged.mean = self.mean + delta * (other.n / n)
        merged.m2 = self.m2 + other.m2 + delta * delta * (self.n * other.n / n)
        return merged

    def copy(self) -> "MomentAccumulator":
        acc = MomentAccumulator()
        acc.n = self.n
        if self.mean is not None:
            acc.mean = self.mean.copy()
            acc.m2 = self.m2.copy()
        return acc

    @property
    def count(self) -> int:
        return self.n

    def variance(self, ddof: int = 1) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no samples accumulated")
        if self.n <= ddof:
            return np.zeros_like(self.mean)
        # round-off can leave m2 a hair below zero
        return np.maximum(self.m2, 0.0) / (self.n - ddof)

    def std(self, ddof: int = 1) -> np.ndarray:
        return np.sqrt(self.variance(ddof))


class TreeReducer:
    """
    Moments over runs indexed 0..R-1, merged along a fixed binary tree.

    Node (level, i) covers runs [i * 2**level, (i + 1) * 2**level) and is
    always built as merge(left child, right child). The tree depends only
    on the run indices, so any chunking of the runs, and any order in which
    chunks are absorbed, produces the same bits.
    """

    def __init__(self):
        self.nodes: Dict[Tuple[int, int], MomentAccumulator] = {}

    def add(self, index: int, sample: np.ndarray) -> None:
        leaf = MomentAccumulator()
        leaf.update(sample)
        self._insert(0, index, leaf)

    def absorb(self, other: "TreeReducer") -> None:
        for (level, i), acc in sorted(other.nodes.items()):
            self._insert(level, i, acc)

    def _insert(self, level: int, i: int, acc: MomentAccumulator) -> None:
        start, stop = i << level, (i + 1) << level
        for lvl, j in self.nodes:
            if j << lvl < stop and start < (j + 1) << lvl:
                raise ValueError(f"runs [{start}, {stop}) overlap runs already reduced")
        while (level, i ^ 1) in self.nodes:
            sibling = self.nodes.pop((level, i ^ 1))
            acc = sibling.merge(acc) if i & 1 else acc.merge(sibling)
            level, i = level + 1, i >> 1
        self.nodes[(level, i)] = acc

    def result(self) -> MomentAccumulator:
        total = MomentAccumulator()
        for (level, i) in sorted(self.nodes, key=lambda node: node[1] << node[0]):
            total = total.merge(self.nodes[(level, i)])
        return total
