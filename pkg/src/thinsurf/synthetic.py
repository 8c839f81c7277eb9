"""Synthetic test surfaces: noisy spheres and a curled leaf-like sheet."""

from __future__ import annotations

import numpy as np

from .core import PointCloud, make_rng


def gen_sphere(n: int, radius: float = 1.0, noise: float = 0.0, seed: int | None = 0,
               with_normals: bool = False) -> PointCloud:
    """``n`` uniform points on a sphere at the origin with Gaussian radial noise."""
    if n < 4:
        raise ValueError("a sphere sample needs at least 4 points")
    rng = make_rng(seed)
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius + noise * rng.standard_normal(n) if noise > 0 else np.full(n, float(radius))
    pts = dirs * radii[:, None]
    return PointCloud(pts, dirs if with_normals else None)


def curl_transform(points: np.ndarray) -> np.ndarray:
    """Roll a flat sheet with ``-1 < y < 1`` into a curled, leaf-like surface."""
    x, y, z = np.asarray(points, dtype=np.float64).T
    beta = np.pi * (y - 0.5)
    eta = np.cos(2.0 * beta) / 3.0 + 1.0 - z
    return np.column_stack([1.5 * x, eta * np.cos(beta), eta * np.sin(beta)])


def sheet_height(x, y, amplitude: float = 0.05):
    """Gentle bump used as the pre-curl height field."""
    return amplitude * np.cos(0.5 * np.pi * x) * np.cos(0.5 * np.pi * y)


def gen_flat_sheet(n: int, seed: int | None = 0, gap: float = 0.2,
                   amplitude: float = 0.05) -> np.ndarray:
    rng = make_rng(seed)
    x = rng.uniform(-1.0, 1.0, n)
    y = rng.uniform(-1.0 + gap, 1.0 - gap, n)
    return np.column_stack([x, y, sheet_height(x, y, amplitude)])


def gen_curled_sheet(n: int, seed: int | None = 0, gap: float = 0.2,
                     amplitude: float = 0.05) -> PointCloud:
    """Curled sheet whose two long edges face each other across a gap.

    The flat sheet spans ``x`` in [-1, 1] and ``y`` in ``(-1 + gap, 1 - gap)``;
    since ``y = -1`` and ``y = 1`` map to the same line, ``gap`` sets how far
    apart the edges end up.
    """
    if n < 100:
        raise ValueError("curled sheet needs at least 100 points")
    if not 0 < gap < 1:
        raise ValueError("gap must lie in (0, 1)")
    return PointCloud(curl_transform(gen_flat_sheet(n, seed, gap, amplitude)))


def curled_edge_curves(gap: float = 0.2, amplitude: float = 0.05, samples: int = 2001):
    """The two upper edges (images of ``y = +-(1 - gap)``) as dense polylines."""
    x = np.linspace(-1.0, 1.0, samples)
    out = []
    for yv in (1.0 - gap, -1.0 + gap):
        y = np.full(samples, yv)
        out.append(curl_transform(np.column_stack([x, y, sheet_height(x, y, amplitude)])))
    return out


def curled_gap_mask(points, gap: float = 0.2, margin: float = 0.0,
                    amplitude: float = 0.05) -> np.ndarray:
    """Which points lie in the open gap between the two upper edges.

    A point is in the gap when its angle about the curl axis falls in the
    uncovered sector ``(pi/2 - pi*gap, pi/2 + pi*gap)``, its ``x*`` lies
    within the sheet's extent and it is farther than ``margin`` from both
    edge curves.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    psi = np.arctan2(points[:, 2], points[:, 1])
    delta = np.abs((psi - 0.5 * np.pi + np.pi) % (2 * np.pi) - np.pi)
    inside = (delta < np.pi * gap) & (np.abs(points[:, 0]) <= 1.5)
    if margin > 0 and inside.any():
        from scipy.spatial import cKDTree
        edges = np.concatenate(curled_edge_curves(gap, amplitude))
        dist, _ = cKDTree(edges).query(points[inside])
        sel = np.flatnonzero(inside)
        inside[sel[dist <= margin]] = False
    return inside


def gen_bench_data(n: int, dim: int = 2, seed: int | None = 0):
    """Uniform random sites in the unit cube of dimension ``dim`` with random values."""
    rng = make_rng(seed)
    return rng.random((n, dim)), rng.standard_normal(n)
