"""Thin-surface reconstruction from noisy point clouds.

Polyharmonic smoothing splines are fitted on overlapping spherical
subdomains, blended with a partition of unity, and the zero level set of the
resulting implicit field is triangulated by marching tetrahedra.
"""

from .core import (AugmentedDataset, Config, ConfigError, DataError, NumericalError,
                   PointCloud, TriangleMesh, load_config, load_mesh, load_point_cloud,
                   save_mesh, save_point_cloud)
from .interpolant import DomainMask, ImplicitField, build_field
from .local_solver import LocalSpline, PhsKernel, fit_local, gcv_minimize
from .partition import Partition, build_partition
from .pipeline import PipelineReport, bench_scaling, reconstruct, run_pipeline
from .surface_extract import attach_curvature, marching_tetrahedra, sample_grid
from .synthetic import gen_curled_sheet, gen_sphere

__all__ = [
    "AugmentedDataset", "Config", "ConfigError", "DataError", "DomainMask", "ImplicitField",
    "LocalSpline", "NumericalError", "Partition", "PhsKernel", "PipelineReport", "PointCloud",
    "TriangleMesh", "attach_curvature", "bench_scaling", "build_field", "build_partition",
    "fit_local", "gcv_minimize", "gen_curled_sheet", "gen_sphere", "load_config", "load_mesh",
    "load_point_cloud", "marching_tetrahedra", "reconstruct", "run_pipeline", "sample_grid",
    "save_mesh", "save_point_cloud",
]

__version__ = "0.1.0"
