"""Grid sampling of the implicit field and zero-level-set extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import DataError, TriangleMesh
from .interpolant import ImplicitField

logger = logging.getLogger(__name__)

NODE_BUDGET = 200_000_000
ZERO_CLAMP = 1e-6

# cube corners as (dx, dy, dz)
CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])
# six tetrahedra around the 0-6 body diagonal; every face diagonal has the
# same direction in every cell, so neighbouring cells split shared faces alike
CUBE_TETS = np.array([(0, 5, 1, 6), (0, 1, 2, 6), (0, 2, 3, 6),
                      (0, 3, 7, 6), (0, 7, 4, 6), (0, 4, 5, 6)])


def _case_table():
    """Triangles per sign case, as local vertex-index edge pairs (-1 padded)."""
    table = np.full((16, 2, 3, 2), -1, dtype=np.int64)
    for case in range(16):
        pos = [v for v in range(4) if case >> v & 1]
        neg = [v for v in range(4) if not case >> v & 1]
        if len(pos) in (1, 3):
            lone, rest = (pos[0], neg) if len(pos) == 1 else (neg[0], pos)
            table[case, 0] = [(lone, rest[0]), (lone, rest[1]), (lone, rest[2])]
        elif len(pos) == 2:
            a, b = pos
            c, d = neg
            table[case, 0] = [(a, c), (a, d), (b, d)]
            table[case, 1] = [(a, c), (b, d), (b, c)]
    return table


CASES = _case_table()


@dataclass(frozen=True)
class SampleGrid:
    """Field values on a regular lattice; NaN marks nodes outside the domain."""

    origin: np.ndarray
    step: float
    values: np.ndarray

    @property
    def dims(self):
        return self.values.shape

    def node_positions(self, flat_ids: np.ndarray) -> np.ndarray:
        ijk = np.stack(np.unravel_index(flat_ids, self.dims), axis=1)
        return self.origin + ijk * self.step

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("origin " + " ".join(f"{v:.17g}" for v in self.origin) + "\n")
            fh.write(f"step {self.step:.17g}\n")
            fh.write("dims " + " ".join(str(v) for v in self.dims) + "\n")
            np.savetxt(fh, self.values.ravel(), fmt="%.17g")


def grid_for_bounds(lo, hi, step: float):
    """Origin and node counts of a lattice covering ``[lo, hi]`` padded by ``2 step``."""
    lo = np.asarray(lo, dtype=np.float64) - 2 * step
    hi = np.asarray(hi, dtype=np.float64) + 2 * step
    dims = tuple(int(v) for v in np.maximum(np.ceil((hi - lo) / step).astype(np.int64) + 1, 2))
    return lo, dims


def sample_grid(field: ImplicitField, step: float, bounds=None,
                node_budget: int = NODE_BUDGET) -> SampleGrid:
    """Evaluate ``field`` on a lattice of spacing ``step``, one z-free slab at a time.

    ``bounds`` defaults to the bounding box of the mask sites.
    """
    if not step > 0:
        raise DataError(f"grid step must be positive, got {step}")
    if bounds is None:
        pts = field.mask.index.points if field.mask is not None else field.partition.centers
        bounds = (pts.min(axis=0), pts.max(axis=0))
    origin, dims = grid_for_bounds(*bounds, step)
    total = int(np.prod(dims, dtype=np.int64))
    if total > node_budget:
        raise DataError(f"grid of {total} nodes exceeds the budget of {node_budget}; use a coarser step")
    values = np.full(dims, np.nan)
    nx, ny, nz = dims
    jj, kk = np.meshgrid(np.arange(ny), np.arange(nz), indexing="ij")
    plane = np.stack([jj.ravel(), kk.ravel()], axis=1) * step + origin[1:]
    slab = max(1, 2_000_000 // (ny * nz))
    for i0 in range(0, nx, slab):
        xs = origin[0] + np.arange(i0, min(i0 + slab, nx)) * step
        pts = np.concatenate([np.column_stack([np.full(len(plane), xv), plane]) for xv in xs])
        vals = field.evaluate(pts).value
        values[i0:i0 + len(xs)] = vals.reshape(len(xs), ny, nz)
    logger.info("sampled %d of %d grid nodes inside the domain",
                int(np.isfinite(values).sum()), total)
    return SampleGrid(origin, float(step), values)


def _clamp_zeros(values: np.ndarray) -> np.ndarray:
    """Push near-zero node values off zero so no output triangle collapses."""
    finite = np.isfinite(values)
    if not finite.any():
        return values
    eps = ZERO_CLAMP * max(float(np.abs(values[finite]).max()), np.finfo(float).tiny)
    out = values.copy()
    small = finite & (np.abs(values) < eps)
    out[small] = np.where(values[small] < 0, -eps, eps)
    return out


def tets_to_mesh(node_pos_fn, tets: np.ndarray, values: np.ndarray, n_nodes: int):
    """Extract the zero set from tetrahedra given by global node ids.

    ``node_pos_fn`` maps an array of node ids to positions; ``values`` is
    indexed by node id. Edge vertices are keyed by their sorted node pair
    so shared edges produce a single vertex.
    """
    if len(tets) == 0:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    tv = values[tets]
    case = ((tv > 0).astype(np.int64) << np.arange(4)).sum(axis=1)
    keep = (case != 0) & (case != 15)
    tets, case = tets[keep], case[keep]
    tris_local = CASES[case]                                   # (T, 2, 3, 2)
    present = tris_local[:, :, 0, 0] >= 0                       # (T, 2)
    t_idx, slot = np.nonzero(present)
    edges_local = tris_local[t_idx, slot]                       # (K, 3, 2)
    a = tets[t_idx[:, None], edges_local[:, :, 0]]
    b = tets[t_idx[:, None], edges_local[:, :, 1]]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    keys = lo * np.int64(n_nodes) + hi
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    ulo, uhi = uniq // n_nodes, uniq % n_nodes
    vlo, vhi = values[ulo], values[uhi]
    t = vlo / (vlo - vhi)
    plo, phi = node_pos_fn(ulo), node_pos_fn(uhi)
    verts = plo + t[:, None] * (phi - plo)
    tris = inverse.reshape(-1, 3)

    # orient each triangle so its normal points towards the positive side
    tet_nodes = tets[t_idx]
    tet_pos = node_pos_fn(tet_nodes.ravel()).reshape(-1, 4, 3)
    pos = values[tet_nodes] > 0
    n_pos = pos.sum(axis=1, keepdims=True)
    # centroid of the positive corners minus centroid of the negative ones
    sign = np.where(pos, 1.0 / n_pos, -1.0 / (4 - n_pos))
    toward_pos = np.einsum("tk,tkd->td", sign, tet_pos)
    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    normal = np.cross(p1 - p0, p2 - p0)
    flip = np.einsum("td,td->t", normal, toward_pos) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return verts, tris


def _drop_tiny(verts, tris, min_area):
    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    bad = area <= min_area
    if bad.any():
        logger.info("dropping %d near-degenerate triangles", int(bad.sum()))
        tris = tris[~bad]
    used, new_tris = np.unique(tris.ravel(), return_inverse=True)
    return verts[used], new_tris.reshape(-1, 3)


def marching_tetrahedra_single(points, values) -> TriangleMesh:
    """Zero set of one tetrahedron (handy for tests and small meshes)."""
    points = np.asarray(points, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    out = tets_to_mesh(lambda ids: points[ids], np.array([[0, 1, 2, 3]]), values, 4)
    if isinstance(out, TriangleMesh):
        return out
    return TriangleMesh(*out)


def marching_tetrahedra(grid: SampleGrid) -> TriangleMesh:
    """Triangulate the zero level set of a sampled grid.

    Cells with any out-of-domain corner are skipped, which leaves open
    boundaries where the mask cuts the surface.
    """
    vals = _clamp_zeros(grid.values)
    nx, ny, nz = vals.shape
    if min(vals.shape) < 2:
        raise DataError("grid needs at least two nodes along each axis")
    corner_vals = np.stack([vals[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz]
                            for dx, dy, dz in CORNERS], axis=-1)
    finite = np.all(np.isfinite(corner_vals), axis=-1)
    with np.errstate(invalid="ignore"):
        crossing = finite & (corner_vals.min(axis=-1) < 0) & (corner_vals.max(axis=-1) > 0)
    ci, cj, ck = np.nonzero(crossing)
    empty = TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    if ci.size == 0:
        return empty
    base = (ci * ny + cj) * nz + ck
    corner_offsets = (CORNERS[:, 0] * ny + CORNERS[:, 1]) * nz + CORNERS[:, 2]
    corner_ids = base[:, None] + corner_offsets[None, :]        # (C, 8)
    tets = corner_ids[:, CUBE_TETS].reshape(-1, 4)
    flat_vals = vals.ravel()
    out = tets_to_mesh(grid.node_positions, tets, flat_vals, flat_vals.size)
    if isinstance(out, TriangleMesh):
        return out
    verts, tris = _drop_tiny(*out, 1e-14 * grid.step ** 2)
    logger.info("marching tetrahedra: %d vertices, %d triangles", len(verts), len(tris))
    return TriangleMesh(verts, tris)


def attach_curvature(mesh: TriangleMesh, field: ImplicitField,
                     name: str = "mean_curvature") -> TriangleMesh:
    """Add per-vertex mean curvature; NaN where it is undefined."""
    if mesh.n_vertices == 0:
        return mesh.with_scalar(name, np.empty(0))
    k = field.mean_curvatures(mesh.vertices, use_mask=False)
    bad = int(np.count_nonzero(~np.isfinite(k)))
    if bad:
        logger.warning("%d vertices have no defined mean curvature", bad)
    return mesh.with_scalar(name, k)
