"""The blended implicit field, its derivatives and the evaluation-domain mask."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import AugmentedDataset, NumericalError
from .local_solver import GCV_BRACKET, LocalSpline, PhsKernel, fit_local
from .partition import Partition, wendland_derivatives
from .spatial_index import SpatialIndex

logger = logging.getLogger(__name__)

GRAD_EPS = 1e-12


class DomainMask:
    """Union of closed balls of radius ``alpha`` around the constraint sites.

    Stands in for an alpha-shape: it keeps evaluation close to the data so
    the field's far-away zero set is never sampled.
    """

    def __init__(self, sites, alpha: float):
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.alpha = float(alpha)
        self.index = SpatialIndex(sites)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dist = self.index.nearest_distance(x, upper=self.alpha * (1 + 1e-12))
        return dist <= self.alpha


def build_domain_mask(augmented: AugmentedDataset, alpha: float) -> DomainMask:
    ratio = alpha / augmented.offset
    if not 3.0 - 1e-9 <= ratio <= 10.0 + 1e-9:
        logger.warning("alpha = %.3g L is outside the usual range [3L, 10L]", ratio)
    return DomainMask(augmented.sites, alpha)


@dataclass(frozen=True)
class FieldSample:
    in_domain: bool
    value: float | None = None
    gradient: np.ndarray | None = None


@dataclass(frozen=True)
class FieldEval:
    """Batched field evaluation; entries outside the domain are NaN."""

    in_domain: np.ndarray
    value: np.ndarray
    gradient: np.ndarray | None = None
    hessian: np.ndarray | None = None


def mean_curvature_from_derivatives(grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """``-div(grad F / |grad F|)`` from the gradient and Hessian.

    Expanded as ``-(|g|^2 tr H - g^T H g) / |g|^3``. NaN where the gradient
    vanishes.
    """
    gn2 = np.einsum("qi,qi->q", grad, grad)
    tr = np.trace(hess, axis1=1, axis2=2)
    gHg = np.einsum("qi,qij,qj->q", grad, hess, grad)
    gn = np.sqrt(gn2)
    with np.errstate(invalid="ignore", divide="ignore"):
        k = -(gn2 * tr - gHg) / gn ** 3
    return np.where(gn > GRAD_EPS, k, np.nan)


class ImplicitField:
    """``F(x) = sum_i w_i(x) F_i(x)`` over the subdomains of a partition."""

    def __init__(self, partition: Partition, splines, mask: DomainMask | None = None):
        splines = list(splines)
        if len(splines) != len(partition):
            raise ValueError("need one fitted spline per subdomain")
        self.partition = partition
        self.splines = splines
        self.mask = mask
        self._centers = partition.centers
        self._radii = partition.radii
        self._center_tree = cKDTree(self._centers)
        self._rmax = float(self._radii.max())

    @property
    def kernel(self) -> PhsKernel:
        return self.splines[0].kernel

    @property
    def alpha(self) -> float | None:
        return self.mask.alpha if self.mask is not None else None

    def _neighbours(self, x: np.ndarray):
        """Per subdomain, the query ids strictly inside its sphere."""
        if len(x) <= 64:
            s = np.linalg.norm(x[:, None, :] - self._centers[None], axis=2) / self._radii
            return [np.flatnonzero(s[:, i] < 1.0) for i in range(len(self._radii))]
        qtree = cKDTree(x)
        lists = qtree.query_ball_point(self._centers, self._radii)
        return [np.asarray(sorted(lst), dtype=np.int64) for lst in lists]

    def evaluate(self, x, order: int = 0, use_mask: bool = True,
                 subdomains=None) -> FieldEval:
        """Blend values (and derivatives up to ``order``) at many points.

        ``subdomains`` restricts the blend to a subset of subdomain ids; the
        result is then the partition of unity over that subset.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        q, d = x.shape
        active = np.ones(q, dtype=bool)
        if use_mask and self.mask is not None:
            active = self.mask.contains(x)
        idx_active = np.flatnonzero(active)
        xa = x[idx_active]
        S = np.zeros(len(xa))
        T = np.zeros(len(xa))
        if order >= 1:
            gS, gT = np.zeros((len(xa), d)), np.zeros((len(xa), d))
        if order >= 2:
            hS, hT = np.zeros((len(xa), d, d)), np.zeros((len(xa), d, d))
        allowed = None if subdomains is None else set(int(i) for i in subdomains)
        if len(xa):
            for i, ids in enumerate(self._neighbours(xa)):
                if ids.size == 0 or (allowed is not None and i not in allowed):
                    continue
                r = self._radii[i]
                u = (xa[ids] - self._centers[i]) / r
                phi, dphi, hphi = wendland_derivatives(u, self.partition.weight_kernel)
                spline = self.splines[i]
                if order == 0:
                    f = spline(xa[ids])
                    S[ids] += phi
                    T[ids] += phi * f
                    continue
                f, df, hf = spline.derivatives(xa[ids], order=order)
                dphi = dphi / r
                S[ids] += phi
                T[ids] += phi * f
                gS[ids] += dphi
                gT[ids] += dphi * f[:, None] + phi[:, None] * df
                if order >= 2:
                    hphi = hphi / r ** 2
                    hS[ids] += hphi
                    hT[ids] += (hphi * f[:, None, None] + dphi[:, :, None] * df[:, None, :]
                                + df[:, :, None] * dphi[:, None, :] + phi[:, None, None] * hf)
        inside = S > 0
        in_domain = np.zeros(q, dtype=bool)
        in_domain[idx_active[inside]] = True
        value = np.full(q, np.nan)
        Sx = np.where(inside, S, 1.0)
        F = T / Sx
        value[idx_active[inside]] = F[inside]
        grad = hess = None
        if order >= 1:
            gF = (gT - F[:, None] * gS) / Sx[:, None]
            grad = np.full((q, d), np.nan)
            grad[idx_active[inside]] = gF[inside]
        if order >= 2:
            hF = (hT - F[:, None, None] * hS - gF[:, :, None] * gS[:, None, :]
                  - gS[:, :, None] * gF[:, None, :]) / Sx[:, None, None]
            hess = np.full((q, d, d), np.nan)
            hess[idx_active[inside]] = hF[inside]
        return FieldEval(in_domain, value, grad, hess)

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x).value

    def eval(self, x) -> FieldSample:
        res = self.evaluate(np.asarray(x, dtype=np.float64)[None, :], order=1)
        if not res.in_domain[0]:
            return FieldSample(False)
        return FieldSample(True, float(res.value[0]), res.gradient[0])

    def gradient(self, x) -> np.ndarray:
        sample = self.eval(x)
        if not sample.in_domain:
            raise ValueError(f"point {tuple(np.round(x, 6))} lies outside the evaluation domain")
        return sample.gradient

    def mean_curvatures(self, x, use_mask: bool = True) -> np.ndarray:
        res = self.evaluate(x, order=2, use_mask=use_mask)
        out = np.full(len(res.value), np.nan)
        ok = res.in_domain
        out[ok] = mean_curvature_from_derivatives(res.gradient[ok], res.hessian[ok])
        return out

    def mean_curvature(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        res = self.evaluate(x[None, :], order=2)
        if not res.in_domain[0]:
            raise ValueError(f"point {tuple(x)} lies outside the evaluation domain")
        k = mean_curvature_from_derivatives(res.gradient, res.hessian)[0]
        if not np.isfinite(k):
            raise NumericalError(f"gradient vanishes at {tuple(x)}; mean curvature undefined")
        return float(k)

    def local_values(self, x) -> dict:
        """Each subdomain's own spline value at ``x`` (for subdomains containing it)."""
        x = np.asarray(x, dtype=np.float64)
        s = np.linalg.norm(self._centers - x, axis=1) / self._radii
        return {int(i): float(self.splines[i](x)[0]) for i in np.flatnonzero(s <= 1.0)}


def fit_partition(sites, values, partition: Partition, kernel: PhsKernel, rho,
                  workers: int | None = None, rho_bracket=GCV_BRACKET):
    """Fit every subdomain independently; returns the splines in subdomain order."""
    sites = np.asarray(sites, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)

    def fit_one(i):
        sub = partition.subdomains[i]
        ids = sub.member_ids
        return fit_local(sites[ids], values[ids], kernel, rho, center=sub.center,
                         scale=sub.radius, subdomain=i, rho_bracket=rho_bracket)

    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(partition) == 1:
        splines = [fit_one(i) for i in range(len(partition))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            splines = list(pool.map(fit_one, range(len(partition))))
    for s in splines:
        logger.debug("subdomain %d: N=%d rho=%.4g rcond=%.3g", s.subdomain, s.n_sites, s.rho, s.rcond)
    return splines


def build_field(augmented: AugmentedDataset, partition: Partition, kernel: PhsKernel,
                rho, alpha: float | None, workers: int | None = None,
                rho_bracket=GCV_BRACKET) -> ImplicitField:
    splines = fit_partition(augmented.sites, augmented.values, partition, kernel, rho,
                            workers, rho_bracket)
    mask = build_domain_mask(augmented, alpha) if alpha is not None else None
    return ImplicitField(partition, splines, mask)
