"""End-to-end reconstruction driver, its report, and the scaling benchmark."""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (AugmentedDataset, Config, DataError, NumericalError, PointCloud, TriangleMesh,
                   load_point_cloud, save_mesh)
from .interpolant import ImplicitField, build_field, fit_partition
from .local_solver import PhsKernel
from .normals import augment_offsets, orient_normals, pca_normals
from .partition import Partition, build_partition
from .preprocess import grid_downsample, remove_outliers
from .surface_extract import attach_curvature, marching_tetrahedra, sample_grid
from .synthetic import gen_bench_data

logger = logging.getLogger(__name__)

STAGES = ("load", "clean", "downsample", "normals", "augment", "partition", "fit",
          "extract", "write")


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineReport:
    config: Config
    timings: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    rho: dict = field(default_factory=dict)
    curvature: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def items(self):
        """Flat ``(key, value)`` pairs for the machine-readable block."""
        out = [(f"config.{k}", v) for k, v in self.config.as_dict().items()]
        out += [(f"time.{k}", f"{v:.4f}") for k, v in self.timings.items()]
        out += [(f"count.{k}", v) for k, v in self.counts.items()]
        out += [(f"rho.{k}", f"{v:.6g}") for k, v in self.rho.items()]
        out += [(f"curvature.{k}", f"{v:.6g}") for k, v in self.curvature.items()]
        out += [(f"output.{k}", v) for k, v in self.outputs.items()]
        return out

    def to_text(self) -> str:
        c = self.counts
        lines = [
            "thin-surface reconstruction report",
            "",
            f"input points       {c.get('input', '-')}",
            f"outliers removed   {c.get('outliers', '-')}",
            f"after downsample   {c.get('downsampled', '-')}",
            f"constraints        {c.get('constraints', '-')} "
            f"({c.get('offsets_discarded', '-')} offsets discarded)",
            f"subdomains         {c.get('subdomains', '-')}",
            f"mesh               {c.get('vertices', '-')} vertices, {c.get('triangles', '-')} triangles",
        ]
        if self.rho:
            lines.append(f"rho min/median/max {self.rho['min']:.4g} / {self.rho['median']:.4g} / "
                         f"{self.rho['max']:.4g}")
        lines.append("")
        lines.append("stage times (s)")
        lines += [f"  {k:<11s}{v:9.3f}" for k, v in self.timings.items()]
        lines += ["", "# key=value"]
        lines += [f"{k}={v}" for k, v in self.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


@dataclass
class Prepared:
    """Everything up to and including the partition."""

    report: PipelineReport
    cloud: PointCloud
    labels: np.ndarray
    augmented: AugmentedDataset
    partition: Partition


@dataclass
class PipelineResult:
    report: PipelineReport
    mesh: TriangleMesh
    field: ImplicitField
    partition: Partition
    cloud: PointCloud
    labels: np.ndarray


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    logger.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - t0


def _summary(values: np.ndarray) -> dict:
    values = values[np.isfinite(values)]
    if values.size == 0:
        return {}
    return {"min": float(values.min()), "median": float(np.median(values)),
            "max": float(values.max())}


def prepare(cloud: PointCloud, config: Config, timings: dict | None = None,
            report: PipelineReport | None = None) -> Prepared:
    """Run the clean, downsample, normals, augment and partition stages."""
    timings = {} if timings is None else timings
    report = report or PipelineReport(config, timings)
    counts = report.counts
    counts.setdefault("input", cloud.n)
    with _stage("clean", timings):
        k = min(config.denoiseNbrs, cloud.n - 1)
        cloud, outliers = remove_outliers(cloud, k, config.denoiseThreshold)
        counts["outliers"] = int(outliers.removed_ids.size)
        counts["cleaned"] = cloud.n
    with _stage("downsample", timings):
        cloud = grid_downsample(cloud, config.gridStep)
        counts["downsampled"] = cloud.n
        if cloud.n < 10:
            raise DataError(f"only {cloud.n} points left after downsampling; gridStep is too coarse")
    with _stage("normals", timings):
        k = min(config.pcaNbrs, cloud.n)
        if cloud.normals is None:
            normals, missing = pca_normals(cloud.points, k)
        else:
            # keep supplied normals, estimating only the ones averaging cancelled
            normals, missing = cloud.normals.copy(), cloud.normal_missing.copy()
            if missing.any():
                est, est_missing = pca_normals(cloud.points, k)
                normals[missing] = est[missing]
                missing = missing & est_missing
        cloud = cloud.with_normals(normals, missing)
        orientation = orient_normals(cloud, config.coarseGridStep, config.graphNbrs, config.pcaNbrs)
        cloud = orientation.cloud
        counts["normal_components"] = orientation.n_components
        counts["normals_missing"] = int(cloud.normal_missing.sum())
    with _stage("augment", timings):
        augmented = augment_offsets(cloud, config.L)
        counts["constraints"] = len(augmented)
        counts["offsets_discarded"] = 2 * int((~cloud.normal_missing).sum()) - augmented.n_off
    with _stage("partition", timings):
        partition = build_partition(augmented.sites, config.nMin, config.nMax, config.expand,
                                    config.weightKernel)
        counts["subdomains"] = len(partition)
        sizes = partition.counts
        counts["subdomain_sites_min"] = int(sizes.min())
        counts["subdomain_sites_max"] = int(sizes.max())
    return Prepared(report, cloud, orientation.labels, augmented, partition)


def reconstruct(cloud: PointCloud, config: Config, workers: int | None = None,
                timings: dict | None = None, report: PipelineReport | None = None) -> PipelineResult:
    """Run every in-memory stage, from cleaning to mesh extraction."""
    timings = {} if timings is None else timings
    prep = prepare(cloud, config, timings, report)
    report, augmented, partition = prep.report, prep.augmented, prep.partition
    counts = report.counts
    with _stage("fit", timings):
        kernel = PhsKernel(config.splineOrder, config.dimension)
        rho = "gcv" if config.use_gcv else float(config.smoothing)
        field_ = build_field(augmented, partition, kernel, rho, config.alpha_length, workers,
                             (config.rhoMin, config.rhoMax))
        report.rho.update(_summary(np.array([s.rho for s in field_.splines])))
    with _stage("extract", timings):
        grid = sample_grid(field_, config.iso_step)
        mesh = marching_tetrahedra(grid)
        mesh = attach_curvature(mesh, field_)
        counts["vertices"] = mesh.n_vertices
        counts["triangles"] = mesh.n_triangles
        report.curvature.update(_summary(mesh.vertex_scalars["mean_curvature"]))
    return PipelineResult(report, mesh, field_, partition, prep.cloud, prep.labels)


def run_pipeline(config: Config, input, output, workers: int | None = None,
                 report_path=None, figures_dir=None) -> PipelineReport:
    """Reconstruct a mesh from the point cloud at ``input`` and write it to ``output``.

    The report goes to ``report_path`` (default: ``output`` with a
    ``.report.txt`` suffix). With ``figures_dir`` set, summary figures are
    rendered there as PNG files.
    """
    config.validate()
    timings: dict = {}
    report = PipelineReport(config, timings)
    with _stage("load", timings):
        cloud = load_point_cloud(input)
        report.counts["input"] = cloud.n
    result = reconstruct(cloud, config, workers, timings, report)
    output = Path(output)
    with _stage("write", timings):
        save_mesh(result.mesh, output)
        report.outputs["mesh"] = str(output)
        if figures_dir is not None:
            from .plotting import pipeline_figures
            for name, path in pipeline_figures(result, figures_dir).items():
                report.outputs[f"figure.{name}"] = str(path)
        report_path = Path(report_path) if report_path else output.with_suffix(".report.txt")
        report.outputs["report"] = str(report_path)
        report.save(report_path)
    return report


# --------------------------------------------------------------------------
# scaling benchmark

@dataclass
class BenchResult:
    sizes: list
    partition_times: list
    fit_times: list
    subdomains: list
    fit_exponent: float | None
    partition_exponent: float | None

    def to_text(self) -> str:
        lines = [f"{'N':>10s} {'subdomains':>10s} {'partition_s':>12s} {'fit_s':>10s}"]
        for n, m, tp, tf in zip(self.sizes, self.subdomains, self.partition_times, self.fit_times):
            lines.append(f"{n:>10d} {m:>10d} {tp:>12.4f} {tf:>10.4f}")
        lines.append("")
        fe = "undefined" if self.fit_exponent is None else f"{self.fit_exponent:.4f}"
        pe = "undefined" if self.partition_exponent is None else f"{self.partition_exponent:.4f}"
        lines.append(f"fit_exponent={fe}")
        lines.append(f"partition_exponent={pe}")
        return "\n".join(lines) + "\n"


def power_law_exponent(sizes, times) -> float | None:
    """Slope of the least-squares line through ``(log N, log t)``."""
    if len(sizes) < 2:
        return None
    slope, _ = np.polyfit(np.log(sizes), np.log(np.maximum(times, 1e-12)), 1)
    return float(slope)


def bench_scaling(sizes, config: Config | None = None, dim: int = 2, per_subdomain: int = 1000,
                  seed: int = 0, workers: int | None = 1) -> BenchResult:
    """Time partitioning and fitting of random data at each size.

    Points are uniform in the unit square (``dim=2``, thin-plate kernel) or
    cube (``dim=3``, the configured kernel), with ``nMax = per_subdomain``
    and ``nMin = per_subdomain // 2`` so the work per subdomain stays fixed.
    """
    sizes = [int(n) for n in sizes]
    if sizes != sorted(sizes):
        raise ValueError("benchmark sizes must be ascending")
    config = config or Config()
    kernel = PhsKernel(2, 2) if dim == 2 else PhsKernel(config.splineOrder, dim)
    rho = 0.0 if config.use_gcv else float(config.smoothing)
    t_part, t_fit, n_sub = [], [], []
    for n in sizes:
        sites, values = gen_bench_data(n, dim, seed)
        t0 = time.perf_counter()
        part = build_partition(sites, per_subdomain // 2, per_subdomain, config.expand,
                               config.weightKernel)
        t1 = time.perf_counter()
        fit_partition(sites, values, part, kernel, rho, workers)
        t2 = time.perf_counter()
        t_part.append(t1 - t0)
        t_fit.append(t2 - t1)
        n_sub.append(len(part))
        logger.info("bench N=%d: %d subdomains, partition %.3fs, fit %.3fs", n, len(part),
                    t1 - t0, t2 - t1)
    return BenchResult(sizes, t_part, t_fit, n_sub, power_law_exponent(sizes, t_fit),
                       power_law_exponent(sizes, t_part))


def error_exit_code(exc: BaseException) -> int:
    """Map an exception (possibly stage-wrapped) to the CLI exit code."""
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, NumericalError) or isinstance(cause, np.linalg.LinAlgError):
        return 3
    return 2
