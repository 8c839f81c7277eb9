"""k-d tree wrapper with deterministic neighbour ordering.

The tree itself is scipy's ``cKDTree``. This module pins down the contract
the rest of the package relies on: closed-ball radius queries, exact
distances recomputed in double precision, and ties broken by point id.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

LEAF_SIZE = 16


class SpatialIndex:
    """Immutable index over an ``(N, d)`` point array."""

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("spatial index needs a non-empty (N, d) point array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("spatial index points must be finite")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts, leafsize=LEAF_SIZE, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def depth(self) -> int:
        """Depth of the tree (0 for a single leaf)."""
        def _depth(node):
            if node.lesser is None and node.greater is None:
                return 0
            return 1 + max(_depth(node.lesser), _depth(node.greater))
        return _depth(self._tree.tree)

    def _dist(self, query, ids):
        diff = self.points[ids] - query
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def knn(self, query, k: int):
        """The ``k`` nearest points as ``(ids, distances)``, ascending.

        Equal distances are ordered by lower id, including ties that straddle
        the k-th position.
        """
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        query = np.asarray(query, dtype=np.float64)
        _, ids = self._tree.query(query, k=k)
        ids = np.atleast_1d(ids)
        dist = self._dist(query, ids)
        kth = dist.max()
        # pull in every point tied with the k-th distance so the id tie-break is global
        tied = np.asarray(self._tree.query_ball_point(query, kth * (1 + 1e-12) + 1e-300), dtype=np.int64)
        if tied.size > k:
            tdist = self._dist(query, tied)
            keep = tdist <= kth
            ids, dist = tied[keep], tdist[keep]
        order = np.lexsort((ids, dist))[:k]
        return ids[order], dist[order]

    def knn_batch(self, queries, k: int):
        """Vectorised k-NN for many queries: ``(ids, distances)`` of shape (Q, k).

        Distances come straight from the tree; ties are resolved by id only
        within the returned set. Used for bulk statistics where the exact
        tie order is immaterial.
        """
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        dist, ids = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        dist = dist.reshape(-1, k)
        ids = ids.reshape(-1, k)
        order = np.lexsort((ids, dist), axis=1) if k > 1 else np.zeros_like(ids)
        return np.take_along_axis(ids, order, 1), np.take_along_axis(dist, order, 1)

    def radius_search(self, query, r: float) -> np.ndarray:
        """Sorted ids of all points with distance <= r."""
        if r < 0:
            raise ValueError(f"radius must be non-negative, got {r}")
        query = np.asarray(query, dtype=np.float64)
        ids = np.asarray(self._tree.query_ball_point(query, r * (1 + 1e-12) + 1e-300), dtype=np.int64)
        ids = ids[self._dist(query, ids) <= r]
        ids.sort()
        return ids

    def radius_count(self, query, r: float) -> int:
        return len(self.radius_search(query, r))

    def nearest_distance(self, queries, upper: float = np.inf) -> np.ndarray:
        """Distance from each query to its nearest point (inf beyond ``upper``)."""
        dist, _ = self._tree.query(np.asarray(queries, dtype=np.float64), k=1,
                                   distance_upper_bound=upper)
        return dist

    def query_ball_tree(self, other: "SpatialIndex", r: float):
        return self._tree.query_ball_tree(other._tree, r)

    def pairs_within(self, r: float) -> np.ndarray:
        return self._tree.query_pairs(r, output_type="ndarray")


def build(points) -> SpatialIndex:
    return SpatialIndex(points)


def knn(index: SpatialIndex, query, k: int):
    return index.knn(query, k)


def radius_search(index: SpatialIndex, query, r: float) -> np.ndarray:
    return index.radius_search(query, r)
