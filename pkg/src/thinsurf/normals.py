"""Normal estimation, consistent orientation and off-surface augmentation."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import (INSIDE, ON_SURFACE, OUTSIDE, AugmentedDataset, DataError,
                   PointCloud)
from .preprocess import grid_downsample
from .spatial_index import SpatialIndex

logger = logging.getLogger(__name__)


def pca_normals(points: np.ndarray, k: int, index: SpatialIndex | None = None):
    """Smallest-eigenvalue eigenvector of each point's k-neighbourhood covariance.

    Returns ``(normals, missing)``; ``missing`` flags neighbourhoods whose
    points all coincide.
    """
    n = len(points)
    if k < 3 or k > n:
        raise DataError(f"PCA neighbour count k={k} must satisfy 3 <= k <= N={n}")
    index = index or SpatialIndex(points)
    ids, _ = index.knn_batch(points, k)
    nbhd = points[ids]
    centred = nbhd - nbhd.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(np.abs(points).max(), 1.0)
    missing = evals[:, 2] <= (1e-14 * scale) ** 2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[missing] = np.nan
    return normals, missing


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Attach unoriented PCA normals (sign arbitrary)."""
    normals, missing = pca_normals(cloud.points, k)
    if missing.any():
        logger.warning("%d points have degenerate neighbourhoods and no normal", int(missing.sum()))
    return cloud.with_normals(normals, missing)


@dataclass(frozen=True)
class OrientationGraph:
    """Undirected weighted graph on the coarse points, ``i < j`` per edge."""

    edges: np.ndarray       # (E, 2)
    weights: np.ndarray     # 1 - |n_i . n_j|
    cutoff: float
    n_vertices: int


@dataclass(frozen=True)
class OrientationResult:
    cloud: PointCloud
    labels: np.ndarray            # component id per full-resolution point
    coarse_points: np.ndarray
    coarse_normals: np.ndarray    # after the spanning-forest flips
    coarse_labels: np.ndarray
    graph: OrientationGraph
    forest_edges: np.ndarray      # (E', 2) spanning forest edges
    traversal: np.ndarray         # (parent, child) pairs in BFS order
    initial_coarse_normals: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.coarse_labels.max()) + 1 if self.coarse_labels.size else 0


def build_orientation_graph(points, normals, n_neighbors: int, cutoff: float,
                            index: SpatialIndex | None = None) -> OrientationGraph:
    """Connect each point to up to ``n_neighbors`` neighbours within ``cutoff``."""
    n = len(points)
    index = index or SpatialIndex(points)
    k = min(n_neighbors + 1, n)
    ids, dist = index.knn_batch(points, k)
    src = np.repeat(np.arange(n), k)
    dst = ids.ravel()
    keep = (dist.ravel() <= cutoff) & (src != dst)
    pairs = np.sort(np.stack([src[keep], dst[keep]], axis=1), axis=1)
    pairs = np.unique(pairs, axis=0) if pairs.size else pairs.reshape(0, 2)
    valid = np.all(np.isfinite(normals), axis=1)
    pairs = pairs[valid[pairs[:, 0]] & valid[pairs[:, 1]]]
    dots = np.einsum("ij,ij->i", normals[pairs[:, 0]], normals[pairs[:, 1]])
    weights = np.clip(1.0 - np.abs(dots), 0.0, 1.0)
    return OrientationGraph(pairs.astype(np.int64), weights, float(cutoff), n)


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb
        return True


def minimum_spanning_forest(graph: OrientationGraph) -> np.ndarray:
    """Kruskal's algorithm; ties in weight go to the lower edge id."""
    order = np.lexsort((np.arange(len(graph.weights)), graph.weights))
    dsu = _DisjointSet(graph.n_vertices)
    chosen = [e for e in order if dsu.union(int(graph.edges[e, 0]), int(graph.edges[e, 1]))]
    return graph.edges[np.array(chosen, dtype=np.int64)].reshape(-1, 2)


def component_labels(n: int, edges: np.ndarray) -> np.ndarray:
    """Connected components numbered in order of their smallest member."""
    dsu = _DisjointSet(n)
    for a, b in edges:
        dsu.union(int(a), int(b))
    roots = np.array([dsu.find(i) for i in range(n)])
    # union keeps the smaller id as root, so roots are the smallest members
    _, labels = np.unique(roots, return_inverse=True)
    return labels.ravel()


def bfs_edges(n: int, forest_edges: np.ndarray) -> np.ndarray:
    """Breadth-first (parent, child) pairs over each tree, rooted at its lowest id."""
    adj = [[] for _ in range(n)]
    for a, b in forest_edges:
        adj[a].append(int(b))
        adj[b].append(int(a))
    for lst in adj:
        lst.sort()
    seen = np.zeros(n, dtype=bool)
    out = []
    for root in range(n):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j in adj[i]:
                if not seen[j]:
                    seen[j] = True
                    out.append((i, j))
                    queue.append(j)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def orient_by_traversal(normals: np.ndarray, traversal: np.ndarray) -> np.ndarray:
    """Flip each child normal that disagrees with its (already fixed) parent."""
    out = normals.copy()
    for i, j in traversal:
        if out[i] @ out[j] < 0:
            out[j] = -out[j]
    return out


def orient_normals(cloud: PointCloud, coarse_step: float, graph_neighbors: int,
                   pca_neighbors: int) -> OrientationResult:
    """Consistently orient normals through a coarse minimal spanning forest.

    A coarse copy of the cloud gets its own PCA normals, which are made
    consistent by a breadth-first walk over the minimal spanning forest of
    the normal-similarity graph (edges no longer than ``2 * coarse_step``).
    Each full-resolution normal within ``coarse_step`` of a coarse point is
    then flipped to agree with it. Points that no coarse point reaches take
    the orientation of their nearest coarse point.
    """
    if cloud.normals is None:
        normals, missing = pca_normals(cloud.points, min(pca_neighbors, cloud.n))
        cloud = cloud.with_normals(normals, missing)
    coarse = grid_downsample(PointCloud(cloud.points), coarse_step)
    cpts = coarse.points
    m = len(cpts)
    cindex = SpatialIndex(cpts)
    if m >= 3:
        cnormals, _ = pca_normals(cpts, min(pca_neighbors, m), cindex)
    else:
        cnormals = np.full((m, 3), np.nan)
    # coarse points with no PCA normal borrow the mean fine normal near them
    fine_index = SpatialIndex(cloud.points)
    for i in np.flatnonzero(~np.all(np.isfinite(cnormals), axis=1)):
        near = fine_index.radius_search(cpts[i], coarse_step)
        near = near[~cloud.normal_missing[near]]
        if near.size:
            cnormals[i] = cloud.normals[near[0]]
    if not np.all(np.isfinite(cnormals)):
        raise DataError("could not estimate normals on the coarse copy of the cloud")
    initial = cnormals.copy()

    graph = build_orientation_graph(cpts, cnormals, graph_neighbors, 2.0 * coarse_step, cindex)
    forest = minimum_spanning_forest(graph)
    traversal = bfs_edges(m, forest)
    cnormals = orient_by_traversal(cnormals, traversal)
    clabels = component_labels(m, forest)

    fine = cloud.normals.copy()
    missing = cloud.normal_missing
    labels = np.full(cloud.n, -1, dtype=np.int64)
    for i in range(m):
        near = fine_index.radius_search(cpts[i], coarse_step)
        if near.size == 0:
            continue
        flip = fine[near] @ cnormals[i] < 0
        fine[near[flip]] *= -1
        labels[near] = clabels[i]
    orphans = np.flatnonzero(labels < 0)
    if orphans.size:
        nearest, _ = cindex.knn_batch(cloud.points[orphans], 1)
        nearest = nearest[:, 0]
        flip = np.einsum("ij,ij->i", fine[orphans], cnormals[nearest]) < 0
        fine[orphans[flip]] *= -1
        labels[orphans] = clabels[nearest]
    fine[missing] = np.nan
    logger.info("orientation: %d coarse points, %d components", m, int(clabels.max()) + 1)
    return OrientationResult(
        cloud=cloud.with_normals(fine, missing), labels=labels, coarse_points=cpts,
        coarse_normals=cnormals, coarse_labels=clabels, graph=graph, forest_edges=forest,
        traversal=traversal, initial_coarse_normals=initial)


def augment_offsets(cloud: PointCloud, L: float, guard: bool = True) -> AugmentedDataset:
    """On-surface points plus ``x + L n`` (value +L) and ``x - L n`` (value -L).

    With ``guard`` on, an offset point is dropped when its nearest on-surface
    point is some other point closer than ``L / 2``: on thin, folded
    structures such a point sits on the wrong side of a neighbouring sheet.
    Points without a normal contribute only their on-surface constraint.
    """
    if not L > 0:
        raise DataError(f"offset length L must be positive, got {L}")
    if cloud.normals is None:
        raise DataError("offset augmentation needs oriented normals")
    n = cloud.n
    pts = cloud.points
    has = ~cloud.normal_missing
    ids = np.flatnonzero(has)
    sites = [pts]
    kinds = [np.full(n, ON_SURFACE)]
    parents = [np.arange(n)]
    index = SpatialIndex(pts) if guard else None
    for sign in (OUTSIDE, INSIDE):
        off = pts[ids] + sign * L * cloud.normals[ids]
        keep = np.ones(len(ids), dtype=bool)
        if guard:
            nearest, dist = index.knn_batch(off, 1)
            keep = ~((nearest[:, 0] != ids) & (dist[:, 0] < 0.5 * L))
        sites.append(off[keep])
        kinds.append(np.full(int(keep.sum()), sign))
        parents.append(ids[keep])
    kind = np.concatenate(kinds)
    dropped = 2 * len(ids) - (len(kind) - n)
    if dropped:
        logger.info("offset guard discarded %d off-surface points", dropped)
    return AugmentedDataset(np.concatenate(sites), kind * float(L), kind, np.concatenate(parents), float(L))
