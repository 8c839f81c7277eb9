"""Summary figures for reconstruction and benchmark reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def rho_histogram(rhos, path) -> Path:
    """Histogram of per-subdomain smoothing parameters on a log axis."""
    rhos = np.asarray(rhos, dtype=float)
    rhos = rhos[np.isfinite(rhos) & (rhos > 0)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if rhos.size:
            lo, hi = np.log10(rhos.min()), np.log10(rhos.max())
            if hi - lo < 1e-9:
                lo, hi = lo - 0.5, hi + 0.5
            ax.hist(rhos, bins=np.logspace(lo, hi, 21), color="0.35")
            ax.axvline(np.median(rhos), color="C1", lw=1, label="median")
            ax.legend()
        ax.set_xscale("log")
        ax.set_xlabel(r"smoothing parameter $\rho$")
        ax.set_ylabel("subdomains")
        return _save(fig, path)


def curvature_histogram(curvature, path, reference=None) -> Path:
    """Histogram of per-vertex mean curvature, with an optional reference line."""
    k = np.asarray(curvature, dtype=float)
    k = k[np.isfinite(k)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if k.size:
            lo, hi = np.percentile(k, [1, 99])
            ax.hist(np.clip(k, lo, hi), bins=60, color="0.35")
        if reference is not None:
            ax.axvline(reference, color="C3", lw=1, label="reference")
            ax.legend()
        ax.set_xlabel("mean curvature")
        ax.set_ylabel("vertices")
        return _save(fig, path)


def subdomain_histogram(counts, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(np.asarray(counts), bins=30, color="0.35")
        ax.set_xlabel("sites per subdomain")
        ax.set_ylabel("subdomains")
        return _save(fig, path)


def bench_plot(bench, path) -> Path:
    """Log-log wall time against N for the partition and fit stages."""
    n = np.asarray(bench.sizes, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for times, exp, label, marker in ((bench.fit_times, bench.fit_exponent, "fit", "o"),
                                          (bench.partition_times, bench.partition_exponent,
                                           "partition", "s")):
            text = label if exp is None else f"{label} (slope {exp:.2f})"
            ax.loglog(n, times, marker=marker, lw=1, label=text)
        ax.set_xlabel("number of sites N")
        ax.set_ylabel("wall time (s)")
        ax.legend()
        return _save(fig, path)


def pipeline_figures(result, directory) -> dict:
    """Render the standard reconstruction figures into ``directory``."""
    directory = Path(directory)
    out = {
        "rho": rho_histogram([s.rho for s in result.field.splines], directory / "rho.png"),
        "subdomains": subdomain_histogram(result.partition.counts, directory / "subdomains.png"),
    }
    k = result.mesh.vertex_scalars.get("mean_curvature")
    if k is not None and len(k):
        out["curvature"] = curvature_histogram(k, directory / "curvature.png")
    return out
