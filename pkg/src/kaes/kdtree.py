"""Nearest-neighbor search over a small, fixed point set (the codebook).

The exact tree is guaranteed to return exactly what a linear scan returns,
including ties (broken toward the lowest point index).  Candidate distances
inside leaves use the same vectorized expression as the linear scan, and a
node is pruned only when its bounding-box distance strictly exceeds the
current best, so no tie can be lost to floating-point rounding.

An approximate randomized multi-tree mode with a fixed leaf-check budget is
available for parity with forest-based tooling; it is never used by default.
"""
from __future__ import annotations

import heapq
import itertools

import numpy as np

from .seeding import FOREST, derive_rng


def rowwise_sqdist(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from one query to every row."""
    return ((points - query) ** 2).sum(axis=1)


def nearest_linear(points: np.ndarray, query: np.ndarray) -> tuple[float, int]:
    """Reference linear scan; the exact tree must agree with this everywhere."""
    d = rowwise_sqdist(points, query)
    i = int(np.argmin(d))
    return float(d[i]), i


class _Node:
    __slots__ = ("lo", "hi", "left", "right", "indices")

    def __init__(self, lo, hi, left=None, right=None, indices=None):
        self.lo = lo
        self.hi = hi
        self.left = left
        self.right = right
        self.indices = indices


def _box_sqdist(node: _Node, query: np.ndarray) -> float:
    gap = np.maximum(0.0, np.maximum(node.lo - query, query - node.hi))
    return float((gap**2).sum())


class KdTree:
    """Exact nearest-neighbor tree over the rows of ``points``."""

    def __init__(self, points: np.ndarray, leaf_size: int = 16):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError("points must be a nonempty 2-d array")
        self.leaf_size = leaf_size
        self._root = self._build(np.arange(self.points.shape[0]))

    def _build(self, indices: np.ndarray) -> _Node:
        pts = self.points[indices]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        if indices.size <= self.leaf_size or bool(np.all(lo == hi)):
            return _Node(lo, hi, indices=indices)
        axis = int(np.argmax(hi - lo))
        order = np.argsort(pts[:, axis], kind="stable")
        half = indices.size // 2
        return _Node(
            lo,
            hi,
            left=self._build(indices[order[:half]]),
            right=self._build(indices[order[half:]]),
        )

    def query(self, query: np.ndarray) -> tuple[float, int]:
        """Return (squared distance, index) of the nearest point.

        Ties resolve to the lowest index, exactly as ``np.argmin`` does in
        the linear scan.
        """
        query = np.asarray(query, dtype=np.float64)
        best_d = np.inf
        best_i = -1

        def visit(node: _Node) -> None:
            nonlocal best_d, best_i
            if _box_sqdist(node, query) > best_d:
                return
            if node.indices is not None:
                d = rowwise_sqdist(self.points[node.indices], query)
                local = int(np.argmin(d))
                # argmin gives the first minimum; among equal distances the
                # smallest original index wins because leaf index arrays are
                # not sorted -- check all equal-distance candidates.
                dmin = d[local]
                cand = node.indices[d == dmin]
                imin = int(cand.min())
                if dmin < best_d or (dmin == best_d and imin < best_i):
                    best_d = float(dmin)
                    best_i = imin
                return
            children = sorted(
                (node.left, node.right), key=lambda child: _box_sqdist(child, query)
            )
            for child in children:
                visit(child)

        visit(self._root)
        return best_d, best_i


class RandomizedKdForest:
    """Approximate search across several randomized trees.

    Each tree splits on an axis drawn from the widest few dimensions.  A
    query runs a single best-first traversal over all trees and stops after
    examining ``max_checks`` candidate points, so cost is fixed regardless
    of data layout.  Results are deterministic given the seed.
    """

    def __init__(
        self, points: np.ndarray, n_trees: int = 4, leaf_size: int = 8, seed: int = 0
    ):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.leaf_size = leaf_size
        rng = derive_rng(seed, FOREST)
        self._roots = [
            self._build(np.arange(self.points.shape[0]), rng) for _ in range(n_trees)
        ]

    def _build(self, indices: np.ndarray, rng: np.random.Generator) -> _Node:
        pts = self.points[indices]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        if indices.size <= self.leaf_size or bool(np.all(lo == hi)):
            return _Node(lo, hi, indices=indices)
        spread = hi - lo
        top = np.argsort(spread, kind="stable")[::-1][: min(5, spread.size)]
        axis = int(rng.choice(top))
        order = np.argsort(pts[:, axis], kind="stable")
        half = indices.size // 2
        return _Node(
            lo,
            hi,
            left=self._build(indices[order[:half]], rng),
            right=self._build(indices[order[half:]], rng),
        )

    def query(self, query: np.ndarray, max_checks: int = 64) -> tuple[float, int]:
        query = np.asarray(query, dtype=np.float64)
        best_d = np.inf
        best_i = -1
        checks = 0
        counter = itertools.count()
        heap: list[tuple[float, int, _Node]] = []
        for root in self._roots:
            heapq.heappush(heap, (_box_sqdist(root, query), next(counter), root))
        while heap and checks < max_checks:
            bound, _, node = heapq.heappop(heap)
            if bound > best_d:
                continue
            if node.indices is not None:
                d = rowwise_sqdist(self.points[node.indices], query)
                dmin = float(d.min())
                cand = node.indices[d == dmin]
                imin = int(cand.min())
                if dmin < best_d or (dmin == best_d and imin < best_i):
                    best_d, best_i = dmin, imin
                checks += node.indices.size
            else:
                for child in (node.left, node.right):
                    heapq.heappush(heap, (_box_sqdist(child, query), next(counter), child))
        return best_d, best_i
