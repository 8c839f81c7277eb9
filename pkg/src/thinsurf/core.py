"""Shared data types, configuration and file I/O.

All coordinates are stored as ``float64`` arrays. The local spline systems
are badly conditioned when sites are close together, so nothing in the
package ever downcasts to single precision.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NORMAL_TOL = 1e-9


class DataError(ValueError):
    """Raised for malformed input files or point data."""


class ConfigError(ValueError):
    """Raised when a configuration violates one of its constraints."""


class NumericalError(RuntimeError):
    """Raised when a numerical stage cannot produce a result."""


def _as_points(points) -> np.ndarray:
    arr = np.array(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    return arr


def _freeze(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is not None:
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Positions with optional unit normals.

    ``normal_missing`` marks points whose normal could not be determined
    (degenerate PCA neighbourhood, cancelled normals after averaging). Those
    rows of ``normals`` hold NaN.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    normal_missing: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] == 0:
            raise DataError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DataError("point coordinates must be finite")
        object.__setattr__(self, "points", _freeze(pts))
        if self.normals is None:
            object.__setattr__(self, "normal_missing", None)
            return
        nrm = _as_points(self.normals)
        if nrm.shape != pts.shape:
            raise DataError("normals must have the same length as points")
        if self.normal_missing is None:
            missing = ~np.all(np.isfinite(nrm), axis=1)
        else:
            missing = np.array(self.normal_missing, dtype=bool)
            if missing.shape != (pts.shape[0],):
                raise DataError("normal_missing must have one flag per point")
        nrm[missing] = np.nan
        good = nrm[~missing]
        if not np.all(np.isfinite(good)):
            raise DataError("normals must be finite")
        if good.size and np.max(np.abs(np.linalg.norm(good, axis=1) - 1.0)) > NORMAL_TOL:
            raise DataError("normals must have unit length")
        object.__setattr__(self, "normals", _freeze(nrm))
        object.__setattr__(self, "normal_missing", _freeze(missing))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, ids) -> "PointCloud":
        ids = np.asarray(ids, dtype=np.int64)
        if self.normals is None:
            return PointCloud(self.points[ids])
        return PointCloud(self.points[ids], self.normals[ids], self.normal_missing[ids])

    def with_normals(self, normals, missing=None) -> "PointCloud":
        return PointCloud(self.points, normals, missing)


ON_SURFACE, OUTSIDE, INSIDE = 0, 1, -1


@dataclass(frozen=True)
class AugmentedDataset:
    """On-surface sites (value 0) plus off-surface sites at +L and -L.

    ``kind`` is 0 for on-surface points, +1 for ``x + L n`` and -1 for
    ``x - L n``; ``parent`` gives the on-surface id each site came from.
    """

    sites: np.ndarray
    values: np.ndarray
    kind: np.ndarray
    parent: np.ndarray
    offset: float

    def __post_init__(self):
        sites = _as_points(self.sites)
        values = np.array(self.values, dtype=np.float64)
        kind = np.array(self.kind, dtype=np.int8)
        parent = np.array(self.parent, dtype=np.int64)
        if not (len(sites) == len(values) == len(kind) == len(parent)):
            raise DataError("sites, values, kind and parent must have equal length")
        if self.offset <= 0:
            raise DataError("offset length L must be positive")
        expected = kind.astype(np.float64) * self.offset
        if not np.array_equal(values, expected):
            raise DataError("values must be exactly 0 on the surface and +/-L off it")
        for name, arr in (("sites", sites), ("values", values), ("kind", kind), ("parent", parent)):
            object.__setattr__(self, name, _freeze(arr))

    def __len__(self) -> int:
        return self.sites.shape[0]

    @property
    def n_on(self) -> int:
        return int(np.count_nonzero(self.kind == ON_SURFACE))

    @property
    def n_off(self) -> int:
        return int(np.count_nonzero(self.kind != ON_SURFACE))


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_scalars: dict = field(default_factory=dict)

    def __post_init__(self):
        verts = _as_points(self.vertices)
        tris = np.array(self.triangles, dtype=np.int64)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise DataError(f"triangles must be an (M, 3) index array, got {tris.shape}")
        if tris.size:
            if tris.min() < 0 or tris.max() >= len(verts):
                raise DataError("triangle index out of range")
            if np.any((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])):
                raise DataError("degenerate triangle (repeated vertex index)")
        scalars = {}
        for name, vals in dict(self.vertex_scalars).items():
            vals = np.array(vals, dtype=np.float64)
            if vals.shape != (len(verts),):
                raise DataError(f"vertex scalar {name!r} needs one value per vertex")
            scalars[name] = _freeze(vals)
        object.__setattr__(self, "vertices", _freeze(verts))
        object.__setattr__(self, "triangles", _freeze(tris))
        object.__setattr__(self, "vertex_scalars", scalars)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def with_scalar(self, name: str, values) -> "TriangleMesh":
        scalars = dict(self.vertex_scalars)
        scalars[name] = values
        return TriangleMesh(self.vertices, self.triangles, scalars)

    def boundary_edges(self) -> np.ndarray:
        """Edges used by exactly one triangle, as sorted index pairs."""
        if self.n_triangles == 0:
            return np.empty((0, 2), dtype=np.int64)
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return uniq[counts == 1]


# --------------------------------------------------------------------------
# configuration

WEIGHT_KERNELS = ("C2", "C4")


@dataclass(frozen=True)
class Config:
    """Reconstruction parameters.

    Defaults reproduce the capsicum settings. ``offsetL`` defaults to twice
    the downsampling step, ``alpha`` to five times ``offsetL`` and
    ``isoGridStep`` to half the downsampling step.
    """

    denoiseNbrs: int = 50
    denoiseThreshold: float = 0.15
    gridStep: float = 0.5
    pcaNbrs: int = 50
    coarseGridStep: float = 2.0
    graphNbrs: int = 10
    offsetL: float | None = None
    nMin: int = 2000
    nMax: int = 5000
    expand: float = 1.1
    splineOrder: int = 3
    dimension: int = 3
    smoothing: float | str = 1e-3
    alpha: float | None = None
    isoGridStep: float | None = None
    weightKernel: str = "C2"
    rhoMin: float = 1e-6
    rhoMax: float = 1e-1

    def __post_init__(self):
        self.validate()

    @property
    def L(self) -> float:
        return float(self.offsetL) if self.offsetL is not None else 2.0 * self.gridStep

    @property
    def alpha_length(self) -> float:
        return float(self.alpha) if self.alpha is not None else 5.0 * self.L

    @property
    def iso_step(self) -> float:
        return float(self.isoGridStep) if self.isoGridStep is not None else 0.5 * self.gridStep

    @property
    def use_gcv(self) -> bool:
        return isinstance(self.smoothing, str)

    def validate(self) -> None:
        for name in ("denoiseNbrs", "pcaNbrs", "graphNbrs", "nMin", "nMax", "splineOrder", "dimension"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.nMin > self.nMax:
            raise ConfigError(f"nMin ({self.nMin}) must not exceed nMax ({self.nMax})")
        if 2 * self.splineOrder - self.dimension <= 0:
            raise ConfigError(
                f"spline order {self.splineOrder} too low for dimension {self.dimension}: need 2m - d > 0")
        if isinstance(self.smoothing, str):
            if self.smoothing != "gcv":
                raise ConfigError(f"smoothing must be a number or 'gcv', got {self.smoothing!r}")
        elif not math.isfinite(self.smoothing) or self.smoothing < 0:
            raise ConfigError(f"smoothing must be >= 0, got {self.smoothing}")
        if not math.isfinite(self.expand) or self.expand < 1:
            raise ConfigError(f"expand must be >= 1, got {self.expand}")
        if not math.isfinite(self.denoiseThreshold):
            raise ConfigError("denoiseThreshold must be finite")
        for name in ("gridStep", "coarseGridStep", "offsetL", "alpha", "isoGridStep"):
            value = getattr(self, name)
            if value is None:
                continue
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"length {name} must be positive, got {value}")
        if not (math.isfinite(self.rhoMin) and math.isfinite(self.rhoMax)
                and 0 < self.rhoMin < self.rhoMax):
            raise ConfigError(f"need 0 < rhoMin < rhoMax, got {self.rhoMin}, {self.rhoMax}")
        if self.weightKernel not in WEIGHT_KERNELS:
            raise ConfigError(f"weightKernel must be one of {WEIGHT_KERNELS}")
        if self.splineOrder == 2 and self.dimension == 3 and self.smoothing != 0:
            logger.info("phi(r) = r has a negative theta: the ridge term shifts the diagonal downward")

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["offsetL"] = self.L
        out["alpha"] = self.alpha_length
        out["isoGridStep"] = self.iso_step
        return out


_INT_KEYS = {"denoiseNbrs", "pcaNbrs", "graphNbrs", "nMin", "nMax", "splineOrder", "dimension"}
_STR_KEYS = {"weightKernel"}


def parse_config_value(key: str, raw: str):
    fields_ = {f.name for f in dataclasses.fields(Config)}
    if key not in fields_:
        raise ConfigError(f"unknown configuration key {key!r}")
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _STR_KEYS:
            return raw
        if key == "smoothing" and raw.lower() == "gcv":
            return "gcv"
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse flat ``key = value`` text; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_config_value(key, raw)
    base = base or Config()
    return base.replace(**values)


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


def format_config(config: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.as_dict().items())


# --------------------------------------------------------------------------
# file formats

def _parse_float_row(tokens, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise DataError(f"line {lineno}: could not parse numbers from {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise DataError(f"line {lineno}: non-finite coordinate")
    return vals


def _load_xyz(path: Path) -> PointCloud:
    rows = []
    ncols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.replace(",", " ").split()
            if len(tokens) not in (3, 6):
                raise DataError(f"line {lineno}: expected 3 or 6 columns, got {len(tokens)}")
            if ncols is None:
                ncols = len(tokens)
            elif len(tokens) != ncols:
                raise DataError(f"line {lineno}: inconsistent column count")
            rows.append(_parse_float_row(tokens, lineno))
    if not rows:
        raise DataError(f"{path}: no points found")
    data = np.array(rows)
    if ncols == 6:
        return PointCloud(data[:, :3], _normalize_rows(data[:, 3:]))
    return PointCloud(data)


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = v / norms
    out[norms[:, 0] == 0] = np.nan
    return out


def _read_ply_header(fh):
    if fh.readline().strip() != "ply":
        raise DataError("line 1: missing 'ply' magic")
    lineno = 1
    elements = []
    fmt = None
    while True:
        line = fh.readline()
        lineno += 1
        if not line:
            raise DataError("unexpected end of file inside PLY header")
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
            if fmt != "ascii":
                raise DataError(f"line {lineno}: only ASCII PLY is supported, got {fmt}")
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise DataError(f"line {lineno}: property before any element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[4]))
            else:
                elements[-1][2].append((tokens[1], tokens[2]))
        elif tokens[0] == "end_header":
            break
        else:
            raise DataError(f"line {lineno}: unrecognised header line {line.strip()!r}")
    if fmt is None:
        raise DataError("PLY header has no format line")
    return elements, lineno


def _read_ply(path: Path):
    with open(path) as fh:
        elements, lineno = _read_ply_header(fh)
        out = {}
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                line = fh.readline()
                lineno += 1
                if not line:
                    raise DataError(f"line {lineno}: unexpected end of file in element {name!r}")
                rows.append((lineno, line.split()))
            out[name] = (props, rows)
    return out


def _load_ply_cloud(path: Path) -> PointCloud:
    data = _read_ply(path)
    if "vertex" not in data:
        raise DataError(f"{path}: no vertex element")
    props, rows = data["vertex"]
    names = [p[1] for p in props]
    if any(p[0] == "list" for p in props):
        raise DataError("list properties on vertices are not supported")
    for axis in "xyz":
        if axis not in names:
            raise DataError(f"{path}: vertex element lacks property {axis!r}")
    if not rows:
        raise DataError(f"{path}: no points found")
    table = np.array([_parse_float_row(tokens, ln) for ln, tokens in rows])
    if table.shape[1] != len(names):
        raise DataError("vertex rows do not match the declared property count")
    pts = table[:, [names.index(a) for a in "xyz"]]
    if all(a in names for a in ("nx", "ny", "nz")):
        return PointCloud(pts, _normalize_rows(table[:, [names.index(a) for a in ("nx", "ny", "nz")]]))
    return PointCloud(pts)


def _infer_format(path: Path, fmt: str | None, allowed) -> str:
    if fmt is None:
        fmt = path.suffix.lower().lstrip(".")
        if fmt == "ply":
            fmt = "ply-ascii"
    if fmt not in allowed:
        raise DataError(f"unsupported format {fmt!r}; expected one of {allowed}")
    return fmt


def load_point_cloud(path, format: str | None = None) -> PointCloud:
    """Read an XYZ (optionally with normals) or ASCII PLY point cloud."""
    path = Path(path)
    fmt = _infer_format(path, format, ("xyz", "ply-ascii"))
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    if fmt == "xyz":
        return _load_xyz(path)
    return _load_ply_cloud(path)


def save_point_cloud(cloud: PointCloud, path, labels=None) -> None:
    """Write ``x y z [nx ny nz] [label]`` rows, as ASCII PLY for a ``.ply`` path."""
    path = Path(path)
    cols = [cloud.points]
    if cloud.normals is not None:
        cols.append(np.nan_to_num(cloud.normals, nan=0.0))
    data = np.hstack(cols)
    with open(path, "w") as fh:
        if path.suffix.lower() == ".ply":
            names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
            fh.write(f"ply\nformat ascii 1.0\nelement vertex {cloud.n}\n")
            fh.writelines(f"property double {a}\n" for a in names)
            if labels is not None:
                fh.write("property int label\n")
            fh.write("end_header\n")
        if labels is None:
            np.savetxt(fh, data, fmt="%.17g")
        else:
            for row, lab in zip(data, labels):
                fh.write(" ".join(f"{v:.17g}" for v in row) + f" {int(lab)}\n")


def save_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    """Write a mesh as OBJ or ASCII PLY; PLY carries the vertex scalars."""
    path = Path(path)
    fmt = _infer_format(path, format, ("obj", "ply-ascii"))
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    with fh:
        if fmt == "obj":
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for t in mesh.triangles + 1:
                fh.write(f"f {t[0]} {t[1]} {t[2]}\n")
            return
        names = list(mesh.vertex_scalars)
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        for name in names:
            fh.write(f"property double {name}\n")
        fh.write(f"element face {mesh.n_triangles}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        extra = [mesh.vertex_scalars[n] for n in names]
        for i, v in enumerate(mesh.vertices):
            vals = [*v, *(col[i] for col in extra)]
            fh.write(" ".join(f"{x:.17g}" for x in vals) + "\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    path = Path(path)
    fmt = _infer_format(path, format, ("obj", "ply-ascii"))
    if fmt == "obj":
        verts, tris = [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                tokens = line.split()
                if not tokens or tokens[0].startswith("#"):
                    continue
                if tokens[0] == "v":
                    verts.append(_parse_float_row(tokens[1:4], lineno))
                elif tokens[0] == "f":
                    idx = [int(t.split("/")[0]) - 1 for t in tokens[1:]]
                    if len(idx) != 3:
                        raise DataError(f"line {lineno}: only triangular faces are supported")
                    tris.append(idx)
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    data = _read_ply(path)
    props, rows = data.get("vertex", ([], []))
    names = [p[1] for p in props]
    table = np.array([_parse_float_row(tok, ln) for ln, tok in rows]).reshape(len(rows), len(names))
    verts = table[:, [names.index(a) for a in "xyz"]] if rows else np.empty((0, 3))
    scalars = {n: table[:, i] for i, n in enumerate(names) if n not in ("x", "y", "z")}
    _, face_rows = data.get("face", ([], []))
    tris = []
    for ln, tokens in face_rows:
        if int(tokens[0]) != 3:
            raise DataError(f"line {ln}: only triangular faces are supported")
        tris.append([int(t) for t in tokens[1:4]])
    return TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3), scalars)


def make_rng(seed: int | None) -> np.random.Generator:
    """Seedable generator used by every synthetic data routine."""
    return np.random.default_rng(seed)
