"""Octree-like spherical subdomains and partition-of-unity weights."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from .spatial_index import SpatialIndex

logger = logging.getLogger(__name__)

MIN_SIDE_FRACTION = 1e-10


@dataclass(frozen=True)
class Subdomain:
    center: np.ndarray
    radius: float
    member_ids: np.ndarray

    @property
    def count(self) -> int:
        return len(self.member_ids)


@dataclass(frozen=True)
class Partition:
    subdomains: tuple
    weight_kernel: str = "C2"
    expand: float = 1.0
    split_counts: np.ndarray = field(default=None, repr=False)  # counts when the split loop exited
    n_sites: int = 0

    def __len__(self) -> int:
        return len(self.subdomains)

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.subdomains]).reshape(len(self), -1)

    @property
    def radii(self) -> np.ndarray:
        return np.array([s.radius for s in self.subdomains])

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.count for s in self.subdomains], dtype=np.int64)


def _covering_radius(side: float, dim: int) -> float:
    return np.sqrt(dim) * side / 2.0


def split_cubes(sites: np.ndarray, n_max: int, index: SpatialIndex | None = None):
    """Split the bounding cube until no covering sphere holds more than ``n_max`` sites.

    At each step the cube whose covering sphere holds the most sites is
    replaced by its ``2**d`` children; ties go to the earliest-created cube.

    Returns
    -------
    centers : (K, d) array
    sides : (K,) array
    counts : (K,) int array, sites in each covering sphere
    """
    index = index or SpatialIndex(sites)
    dim = sites.shape[1]
    lo, hi = sites.min(axis=0), sites.max(axis=0)
    center0 = 0.5 * (lo + hi)
    side0 = 2.0 * np.max(np.abs(sites - center0))
    if side0 == 0:
        side0 = 1.0
    min_side = MIN_SIDE_FRACTION * side0
    offsets = np.array(np.meshgrid(*[[-1.0, 1.0]] * dim, indexing="ij")).reshape(dim, -1).T

    centers = [center0]
    sides = [side0]
    counts = [len(sites)]
    alive = [True]
    heap = [(-counts[0], 0)]
    while heap:
        neg, i = heap[0]
        if -neg <= n_max:
            break
        heapq.heappop(heap)
        if sides[i] / 2.0 < min_side:
            logger.warning("cube %d holds %d coincident sites; not splitting further", i, -neg)
            continue
        alive[i] = False
        child_side = sides[i] / 2.0
        r = _covering_radius(child_side, dim)
        for off in offsets:
            c = centers[i] + off * child_side / 2.0
            cnt = index.radius_count(c, r)
            centers.append(c)
            sides.append(child_side)
            counts.append(cnt)
            alive.append(True)
            heapq.heappush(heap, (-cnt, len(centers) - 1))
    keep = np.flatnonzero(alive)
    return np.array(centers)[keep], np.array(sides)[keep], np.array(counts, dtype=np.int64)[keep]


def build_partition(sites, n_min: int, n_max: int, expand: float = 1.0,
                    weight_kernel: str = "C2", index: SpatialIndex | None = None) -> Partition:
    """Cover ``sites`` with overlapping spheres holding roughly n_min..n_max sites each.

    After splitting, empty spheres are deleted and any sphere with fewer
    than ``n_min`` sites is grown to the distance of its ``n_min``-th nearest
    site. Every radius is then multiplied by ``expand``. Growth can push a
    sphere above ``n_max``; the upper bound is only guaranteed before it.
    """
    sites = np.asarray(sites, dtype=np.float64)
    if sites.ndim != 2 or len(sites) == 0:
        raise ValueError("partition needs a non-empty (N, d) site array")
    if n_min > n_max:
        raise ValueError(f"n_min ({n_min}) must not exceed n_max ({n_max})")
    if expand < 1:
        raise ValueError(f"expand must be >= 1, got {expand}")
    index = index or SpatialIndex(sites)
    n = len(sites)
    dim = sites.shape[1]
    centers, sides, counts = split_cubes(sites, n_max, index)
    radii = _covering_radius(sides, dim)
    target = min(n_min, n)
    out = []
    for c, r, cnt in zip(centers, radii, counts):
        if cnt == 0:
            continue
        if cnt < target:
            _, dist = index.knn(c, target)
            r = float(dist[-1])
        r = float(r) * expand
        if r == 0:
            r = 1e-12 * max(1.0, float(np.abs(sites).max()))
        out.append(Subdomain(np.asarray(c), r, index.radius_search(c, r)))
    logger.info("partition: %d subdomains over %d sites", len(out), n)
    return Partition(tuple(out), weight_kernel, float(expand), counts, n)


# --------------------------------------------------------------------------
# weights

def wendland(r, kind: str = "C2"):
    """Compactly supported Wendland function on [0, 1]."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("wendland argument must be non-negative")
    t = np.clip(1.0 - r, 0.0, None)
    if kind == "C2":
        return t ** 4 * (4.0 * r + 1.0)
    if kind == "C4":
        return t ** 6 * (35.0 * r * r + 18.0 * r + 3.0)
    raise ValueError(f"unknown Wendland kernel {kind!r}")


def wendland_derivatives(u: np.ndarray, kind: str = "C2"):
    """Value, gradient and Hessian of ``wendland(|u|)`` with respect to ``u``.

    ``u`` has shape (Q, d). The radial derivative is written as
    ``g(s) * u`` with ``g = phi'(s) / s``, which is smooth at the centre.
    """
    s = np.linalg.norm(u, axis=1)
    t = np.clip(1.0 - s, 0.0, None)
    if kind == "C2":
        val = t ** 4 * (4.0 * s + 1.0)
        g = -20.0 * t ** 3
        dg = 60.0 * t ** 2               # g'(s)
    elif kind == "C4":
        val = t ** 6 * (35.0 * s * s + 18.0 * s + 3.0)
        g = -56.0 * t ** 5 * (5.0 * s + 1.0)
        dg = 1680.0 * s * t ** 4
    else:
        raise ValueError(f"unknown Wendland kernel {kind!r}")
    grad = g[:, None] * u
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(s > 0, dg / s, 0.0)
    dim = u.shape[1]
    hess = g[:, None, None] * np.eye(dim) + coef[:, None, None] * u[:, :, None] * u[:, None, :]
    return val, grad, hess


def shepard_weights(partition: Partition, x):
    """Normalised weights ``(ids, w)`` of the subdomains with non-zero weight at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    centers = partition.centers
    radii = partition.radii
    s = np.linalg.norm(centers - x, axis=1) / radii
    inside = np.flatnonzero(s <= 1.0)
    phi = wendland(s[inside], partition.weight_kernel)
    nz = phi > 0
    ids, phi = inside[nz], phi[nz]
    if ids.size == 0:
        return ids, phi
    return ids, phi / phi.sum()
