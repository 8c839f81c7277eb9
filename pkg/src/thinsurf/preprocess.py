"""Point cloud cleaning: statistical outlier removal and grid averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import DataError, PointCloud
from .spatial_index import SpatialIndex

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OutlierReport:
    kept_ids: np.ndarray
    removed_ids: np.ndarray
    mean_neighbor_distance: np.ndarray
    mean: float
    std: float
    threshold: float


def mean_neighbor_distance(points: np.ndarray, k: int, index: SpatialIndex | None = None) -> np.ndarray:
    """Average distance from each point to its ``k`` nearest other points."""
    index = index or SpatialIndex(points)
    # k + 1 because every point is its own nearest neighbour
    _, dist = index.knn_batch(points, k + 1)
    return dist[:, 1:].mean(axis=1)


def remove_outliers(cloud: PointCloud, k: int, threshold: float):
    """Drop points whose mean k-NN distance exceeds ``mean + threshold * std``.

    The point itself is not counted among its neighbours.

    Returns
    -------
    (PointCloud, OutlierReport)
    """
    n = cloud.n
    if k < 1 or k >= n:
        raise DataError(f"outlier neighbour count k={k} must satisfy 1 <= k < N={n}")
    if not np.isfinite(threshold):
        raise DataError("outlier threshold must be finite")
    stat = mean_neighbor_distance(cloud.points, k)
    mu = float(stat.mean())
    s = float(stat.std())
    removed = stat > mu + threshold * s
    kept_ids = np.flatnonzero(~removed)
    removed_ids = np.flatnonzero(removed)
    if kept_ids.size == 0:
        raise DataError("outlier removal discarded every point")
    logger.info("outlier removal: %d of %d points removed", removed_ids.size, n)
    report = OutlierReport(kept_ids, removed_ids, stat, mu, s, float(threshold))
    return cloud.subset(kept_ids), report


def grid_cells(points: np.ndarray, step: float, origin=None) -> np.ndarray:
    """Integer cell index per point; cells are anchored at ``origin``."""
    origin = points.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    return np.floor((points - origin) / step).astype(np.int64)


def grid_downsample(cloud: PointCloud, step: float, origin=None) -> PointCloud:
    """Replace the points of each occupied cubic cell by their centroid.

    Cells have side ``step`` and are anchored at the bounding-box minimum
    unless ``origin`` is given. Normals, if present, are averaged and
    renormalised; a cell whose normals cancel gets a missing-normal flag.
    Output order follows the lexicographic order of the cell indices.
    """
    if not step > 0:
        raise DataError(f"grid step must be positive, got {step}")
    cells = grid_cells(cloud.points, step, origin)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    m = counts.size
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    if cloud.normals is None:
        return PointCloud(centroids)
    nsum = np.zeros((m, 3))
    valid = ~cloud.normal_missing
    np.add.at(nsum, inverse[valid], cloud.normals[valid])
    norms = np.linalg.norm(nsum, axis=1)
    missing = norms <= 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = nsum / norms[:, None]
    normals[missing] = np.nan
    if missing.any():
        logger.info("grid downsample: %d cells with cancelling normals flagged", int(missing.sum()))
    return PointCloud(centroids, normals, missing)


def min_pairwise_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return np.inf
    _, dist = SpatialIndex(points).knn_batch(points, 2)
    return float(dist[:, 1].min())
