"""Command-line entry point.

Verbs: ``reconstruct``, ``gen-sphere``, ``gen-curled-sheet``, ``bench`` and
``inspect``. Logs go to standard error, data to files. Exit codes are 0 on
success, 1 for usage errors, 2 for data errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .core import (Config, ConfigError, load_config, load_point_cloud,
                   parse_config_value, save_point_cloud)
from .pipeline import StageError, bench_scaling, error_exit_code, prepare, run_pipeline
from .synthetic import gen_curled_sheet, gen_sphere

logger = logging.getLogger("thinsurf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("configuration overrides")
    group.add_argument("--config", type=Path, help="key=value configuration file")
    for f in dataclasses.fields(Config):
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE", default=None)


def _config_from_args(args) -> Config:
    config = load_config(args.config) if args.config else Config()
    overrides = {}
    for f in dataclasses.fields(Config):
        raw = getattr(args, f"cfg_{f.name}")
        if raw is not None:
            overrides[f.name] = parse_config_value(f.name, raw)
    return config.replace(**overrides) if overrides else config


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thinsurf", description="Reconstruct thin surfaces from point clouds.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("reconstruct", help="point cloud to triangle mesh")
    p.add_argument("input", type=Path, help="point cloud (.xyz or .ply)")
    p.add_argument("output", type=Path, help="mesh (.obj or .ply)")
    p.add_argument("--report", type=Path, help="report path (default: OUTPUT.report.txt)")
    p.add_argument("--figures", type=Path, help="directory for summary figures")
    p.add_argument("--workers", type=int, default=None, help="worker threads for fitting")
    _add_config_flags(p)

    p = sub.add_parser("gen-sphere", help="noisy points on a sphere")
    p.add_argument("output", type=Path)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normals", action="store_true", help="also write the true normals")

    p = sub.add_parser("gen-curled-sheet", help="curled leaf-like sheet")
    p.add_argument("output", type=Path)
    p.add_argument("--n", type=int, default=30_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gap", type=float, default=0.2, help="edge margin of the flat sheet")
    p.add_argument("--amplitude", type=float, default=0.05, help="height bump before curling")

    p = sub.add_parser("bench", help="fit-time scaling benchmark")
    p.add_argument("--sizes", type=int, nargs="+", default=[20_000, 80_000, 320_000])
    p.add_argument("--dim", type=int, choices=(2, 3), default=2)
    p.add_argument("--per-subdomain", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", type=Path, help="write the table here as well as to stdout")
    p.add_argument("--figure", type=Path, help="log-log timing plot")
    _add_config_flags(p)

    p = sub.add_parser("inspect", help="dump partition and normal diagnostics")
    p.add_argument("input", type=Path)
    p.add_argument("outdir", type=Path)
    _add_config_flags(p)
    return parser


def _cmd_reconstruct(args) -> int:
    config = _config_from_args(args)
    report = run_pipeline(config, args.input, args.output, args.workers, args.report, args.figures)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _cmd_gen_sphere(args) -> int:
    cloud = gen_sphere(args.n, args.radius, args.noise, args.seed, with_normals=args.normals)
    save_point_cloud(cloud, args.output)
    return EXIT_OK


def _cmd_gen_sheet(args) -> int:
    save_point_cloud(gen_curled_sheet(args.n, args.seed, args.gap, args.amplitude), args.output)
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = _config_from_args(args)
    result = bench_scaling(args.sizes, config, args.dim, args.per_subdomain, args.seed, args.workers)
    text = result.to_text()
    sys.stdout.write(text)
    if args.output:
        args.output.write_text(text)
    if args.figure:
        from .plotting import bench_plot
        bench_plot(result, args.figure)
    return EXIT_OK


def _cmd_inspect(args) -> int:
    config = _config_from_args(args)
    cloud = load_point_cloud(args.input)
    result = prepare(cloud, config)
    out = args.outdir
    out.mkdir(parents=True, exist_ok=True)
    part = result.partition
    rows = np.column_stack([part.centers, part.radii, part.counts])
    np.savetxt(out / "partition.txt", rows, fmt=["%.10g"] * 4 + ["%d"],
               header="cx cy cz radius count")
    save_point_cloud(result.cloud, out / "normals.xyz", result.labels)
    result.report.save(out / "report.txt")
    from .plotting import subdomain_histogram
    subdomain_histogram(part.counts, out / "subdomains.png")
    sys.stdout.write(result.report.to_text())
    return EXIT_OK


COMMANDS = {
    "reconstruct": _cmd_reconstruct,
    "gen-sphere": _cmd_gen_sphere,
    "gen-curled-sheet": _cmd_gen_sheet,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_USAGE
    except StageError as exc:
        logger.error("%s", exc)
        return error_exit_code(exc)
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
