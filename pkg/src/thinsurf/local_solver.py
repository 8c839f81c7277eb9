"""Polyharmonic smoothing splines fitted on one subdomain.

A local fit has the form

    F(x) = sum_j lam_j phi(|x - x_j|) + sum_k a_k p_k(x)

with ``phi(r) = r**(2m-d)`` (times ``log r`` when ``2m-d`` is even) and
``p_k`` the monomials of degree below ``m``. Smoothing adds
``rho * N / theta`` to the diagonal of the kernel matrix, which is the
minimiser of the data misfit plus ``rho`` times the order-m bending energy.
``rho`` may be chosen per subdomain by generalised cross validation.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack
from scipy.spatial.distance import cdist

from .core import NumericalError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
GCV_BRACKET = (1e-6, 1e-1)
_CHUNK_ENTRIES = 4_000_000


def theta(m: int, d: int) -> float:
    """Normalising constant of the order-m polyharmonic Green's function in R^d."""
    k = 2 * m - d
    if k <= 0:
        raise ValueError(f"need 2m - d > 0, got m={m}, d={d}")
    if k % 2 == 0:
        sign = (-1) ** (d // 2 + 1 + m)
        return sign / (2 ** (2 * m - 1) * math.pi ** (d / 2) * math.factorial(m - 1)
                       * math.factorial(m - d // 2))
    return math.gamma(d / 2 - m) / (2 ** (2 * m) * math.pi ** (d / 2) * math.factorial(m - 1))


def monomial_exponents(d: int, degree: int) -> np.ndarray:
    """Exponent vectors of all monomials of total degree <= ``degree``, graded-lex."""
    rows = []
    for deg in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            e = [0] * d
            for axis in combo:
                e[axis] += 1
            rows.append(e)
    return np.array(rows, dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True)
class PhsKernel:
    """Polyharmonic spline of order ``m`` in ``d`` dimensions."""

    m: int = 3
    d: int = 3

    def __post_init__(self):
        if 2 * self.m - self.d <= 0:
            raise ValueError(f"need 2m - d > 0, got m={self.m}, d={self.d}")

    @property
    def power(self) -> int:
        return 2 * self.m - self.d

    @property
    def has_log(self) -> bool:
        return self.power % 2 == 0

    @property
    def theta(self) -> float:
        return theta(self.m, self.d)

    @cached_property
    def exponents(self) -> np.ndarray:
        return monomial_exponents(self.d, self.m - 1)

    @property
    def n_poly(self) -> int:
        return math.comb(self.d + self.m - 1, self.d)

    def __call__(self, r):
        r = np.asarray(r, dtype=np.float64)
        k = self.power
        if not self.has_log:
            return r ** k
        with np.errstate(divide="ignore", invalid="ignore"):
            out = r ** k * np.log(r)
        return np.where(r > 0, out, 0.0)

    def radial_derivatives(self, r):
        """``(phi'(r)/r, (phi''(r) - phi'(r)/r)/r**2)`` with singular limits set to 0.

        The gradient of ``phi(|x - y|)`` is ``g1 * (x - y)`` and the Hessian
        ``g1 * I + g2 * (x - y)(x - y)^T``.
        """
        r = np.asarray(r, dtype=np.float64)
        k = self.power
        pos = r > 0
        rs = np.where(pos, r, 1.0)
        if self.has_log:
            lg = np.log(rs)
            g1 = rs ** (k - 2) * (k * lg + 1.0)
            g2 = rs ** (k - 4) * ((k - 2) * (k * lg + 1.0) + k)
        else:
            g1 = k * rs ** (k - 2)
            g2 = k * (k - 2) * rs ** (k - 4.0)
        return np.where(pos, g1, 0.0), np.where(pos, g2, 0.0)

    def scale_factor(self, s: float) -> float:
        """``phi(s r) = s**k phi(r)`` up to a polynomial term for log kernels."""
        return s ** self.power


def kernel_eval(kernel: PhsKernel, r):
    return kernel(r)


def polynomial_matrix(x: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """``P[i, k] = prod_a x[i, a] ** exponents[k, a]``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.ones((len(x), len(exponents)))
    for k, e in enumerate(exponents):
        for a, p in enumerate(e):
            if p:
                out[:, k] *= x[:, a] ** p
    return out


def polynomial_derivatives(x: np.ndarray, exponents: np.ndarray):
    """Values (Q, n), gradients (Q, n, d) and Hessians (Q, n, d, d) of the monomials."""
    q, d = x.shape
    n = len(exponents)
    val = polynomial_matrix(x, exponents)
    grad = np.zeros((q, n, d))
    hess = np.zeros((q, n, d, d))

    def mono(e):
        if np.any(e < 0):
            return np.zeros(q)
        return polynomial_matrix(x, e[None, :])[:, 0]

    for k, e in enumerate(exponents):
        for a in range(d):
            if e[a] == 0:
                continue
            ea = e.copy()
            ea[a] -= 1
            grad[:, k, a] = e[a] * mono(ea)
            for b in range(d):
                if ea[b] == 0:
                    continue
                eab = ea.copy()
                eab[b] -= 1
                hess[:, k, a, b] = e[a] * ea[b] * mono(eab)
    return val, grad, hess


def ridge_shift(kernel: PhsKernel, rho: float, n: int) -> float:
    return rho * n / kernel.theta


def assemble_system(sites, values, kernel: PhsKernel, rho: float, exponents=None):
    """Saddle-point matrix ``[[A + shift I, P], [P^T, 0]]`` and right-hand side ``[f, 0]``.

    ``shift = rho * N / theta``, signed as theta is.
    """
    sites = np.asarray(sites, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    exponents = kernel.exponents if exponents is None else exponents
    n, npoly = len(sites), len(exponents)
    if n < npoly:
        raise ValueError(f"need at least {npoly} sites for the polynomial basis, got {n}")
    if rho < 0:
        raise ValueError("smoothing parameter must be non-negative")
    K = np.zeros((n + npoly, n + npoly))
    K[:n, :n] = kernel(cdist(sites, sites))
    K[np.arange(n), np.arange(n)] += ridge_shift(kernel, rho, n)
    P = polynomial_matrix(sites, exponents)
    K[:n, n:] = P
    K[n:, :n] = P.T
    rhs = np.concatenate([values, np.zeros(npoly)])
    return K, rhs


def reduced_basis(P: np.ndarray, exponents: np.ndarray, tol: float = RANK_TOL):
    """Drop monomials that are numerically dependent on the sites.

    Uses a column-pivoted QR of ``P``; columns whose pivot falls below
    ``tol * ||P||`` are discarded. Returns the kept exponents (original order).
    """
    if P.shape[1] == 0:
        return exponents
    _, R, piv = sla.qr(P, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > tol * np.linalg.norm(P, 2)))
    if rank == P.shape[1]:
        return exponents
    keep = np.sort(piv[:rank])
    return exponents[keep]


@dataclass(frozen=True)
class LocalSpline:
    """A fitted spline stored in its local frame ``u = (x - center) / scale``."""

    kernel: PhsKernel
    center: np.ndarray
    scale: float
    nodes: np.ndarray          # sites in the local frame
    lam: np.ndarray
    coef: np.ndarray
    exponents: np.ndarray
    rho: float
    subdomain: int = -1
    rcond: float = float("nan")

    @property
    def n_sites(self) -> int:
        return len(self.nodes)

    @property
    def sites(self) -> np.ndarray:
        return self.nodes * self.scale + self.center

    def to_local(self, x) -> np.ndarray:
        return (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.center) / self.scale

    def __call__(self, x) -> np.ndarray:
        u = self.to_local(x)
        out = np.empty(len(u))
        step = max(1, _CHUNK_ENTRIES // max(1, self.n_sites))
        for lo in range(0, len(u), step):
            ub = u[lo:lo + step]
            out[lo:lo + step] = (self.kernel(cdist(ub, self.nodes)) @ self.lam
                                 + polynomial_matrix(ub, self.exponents) @ self.coef)
        return out

    def derivatives(self, x, order: int = 2):
        """Value, gradient and (if ``order`` is 2) Hessian in global coordinates."""
        u = self.to_local(x)
        q, d = u.shape
        val = np.empty(q)
        grad = np.empty((q, d))
        hess = np.empty((q, d, d)) if order >= 2 else None
        nodes = self.nodes
        outer = (nodes[:, :, None] * nodes[:, None, :]).reshape(len(nodes), d * d)
        step = max(1, _CHUNK_ENTRIES // max(1, self.n_sites))
        for lo in range(0, q, step):
            ub = u[lo:lo + step]
            r = cdist(ub, nodes)
            pv, pg, ph = polynomial_derivatives(ub, self.exponents)
            val[lo:lo + step] = self.kernel(r) @ self.lam + pv @ self.coef
            g1, g2 = self.kernel.radial_derivatives(r)
            w = g1 * self.lam
            wsum = w.sum(axis=1)
            grad[lo:lo + step] = (ub * wsum[:, None] - w @ nodes
                                  + np.einsum("qkd,k->qd", pg, self.coef))
            if hess is None:
                continue
            v = g2 * self.lam
            vsum = v.sum(axis=1)
            vc = v @ nodes
            # sum_j v_j (u - y_j)(u - y_j)^T expanded into matrix products
            h = (vsum[:, None, None] * ub[:, :, None] * ub[:, None, :]
                 - ub[:, :, None] * vc[:, None, :] - vc[:, :, None] * ub[:, None, :]
                 + (v @ outer).reshape(-1, d, d))
            h += wsum[:, None, None] * np.eye(d)
            h += np.einsum("qkab,k->qab", ph, self.coef)
            hess[lo:lo + step] = h
        grad /= self.scale
        if hess is not None:
            hess /= self.scale ** 2
        return val, grad, hess


def _local_frame(sites, center, scale):
    sites = np.asarray(sites, dtype=np.float64)
    if center is None:
        center = 0.5 * (sites.min(axis=0) + sites.max(axis=0))
    center = np.asarray(center, dtype=np.float64)
    if scale is None:
        scale = float(np.max(np.linalg.norm(sites - center, axis=1))) if len(sites) else 1.0
    if not scale > 0:
        scale = 1.0
    return center, float(scale), (sites - center) / scale


def _solve_symmetric(K, rhs):
    lwork = int(lapack.dsytrf_lwork(K.shape[0])[0])
    ldu, ipiv, info = lapack.dsytrf(K, lwork=max(lwork, 1))
    if info > 0:
        return None, 0.0
    anorm = np.abs(K).sum(axis=0).max()
    rcond, _ = lapack.dsycon(ldu, ipiv, anorm)
    x, info = lapack.dsytrs(ldu, ipiv, rhs[:, None])
    if info != 0:
        return None, 0.0
    return x[:, 0], float(rcond)


class GCVProblem:
    """GCV score for one set of sites and values, cheap to evaluate at many rho.

    With ``P = Q [R; 0]``, ``Q = [Q1 Q2]`` and ``c = rho N / theta``,
    ``I - B(rho) = c Q2 (K + c I)^{-1} Q2^T`` where ``K = Q2^T A Q2``.
    Reducing ``K = Z T Z^T`` to tridiagonal form once gives

        V(rho) = N |(T + c I)^{-1} q|^2 / (sum_i 1 / (mu_i + c))^2,

    with ``q = Z^T Q2^T f`` and ``mu`` the eigenvalues of ``T``, so each
    evaluation costs O(N). Everything is done in the local frame, with ``c``
    rescaled accordingly, so V is frame independent.
    """

    def __init__(self, sites, values, kernel: PhsKernel, center=None, scale=None):
        self.kernel = kernel
        self.center, self.scale, self.nodes = _local_frame(sites, center, scale)
        self.values = np.asarray(values, dtype=np.float64)
        n = len(self.nodes)
        P = polynomial_matrix(self.nodes, kernel.exponents)
        self.exponents = reduced_basis(P, kernel.exponents)
        if len(self.exponents) < len(kernel.exponents):
            raise NumericalError("polynomial block is rank deficient; GCV needs unisolvent sites")
        npoly = P.shape[1]
        if n <= npoly:
            raise NumericalError(f"GCV needs more than {npoly} sites, got {n}")
        (self._h, self._tau), R = sla.qr(P, mode="raw")
        self.R = R[:npoly, :npoly]
        self.npoly = npoly
        self.n = n
        self.A = kernel(cdist(self.nodes, self.nodes))
        K = self._apply_q(self._apply_q(self.A, trans=True).T, trans=True)[npoly:, npoly:]
        K = 0.5 * (K + K.T)
        lwork = int(lapack.dsytrd_lwork(len(K), lower=1)[0])
        a, self._d, self._e, self._ztau, info = lapack.dsytrd(K, lower=1, lwork=max(lwork, 1),
                                                              overwrite_a=1)
        if info != 0:
            raise NumericalError(f"tridiagonal reduction failed (info={info})")
        self._zv = a
        del K
        self.mu = lapack.dsterf(self._d.copy(), self._e.copy())[0]
        self.q = self._apply_z(self._apply_q(self.values[:, None], trans=True)[npoly:, 0], trans=True)

    def _apply_q(self, B, trans: bool):
        """``Q^T B`` (``trans``) or ``Q B`` using the stored Householder reflectors."""
        B = np.asarray(B, dtype=np.float64, order="F")
        lwork = max(1, B.shape[1] * 64)
        out, _, info = lapack.dormqr("L", "T" if trans else "N", self._h, self._tau, B, lwork)
        if info != 0:
            raise NumericalError(f"applying the QR factor failed (info={info})")
        return out

    def _apply_z(self, y, trans: bool):
        """``Z^T y`` (``trans``) or ``Z y`` for the tridiagonal reduction's reflectors."""
        y = np.array(y, dtype=np.float64)
        m = len(y)
        order = range(m - 1) if trans else range(m - 2, -1, -1)
        for i in order:
            tau = self._ztau[i]
            if tau == 0.0:
                continue
            v = self._zv[i + 2:, i]
            w = y[i + 1] + v @ y[i + 2:]
            w *= tau
            y[i + 1] -= w
            y[i + 2:] -= w * v
        return y

    def _tri_solve(self, c: float, rhs):
        m = len(self._d)
        if m == 1:
            return rhs / (self._d + c)
        _, _, _, x, info = lapack.dgtsv(self._e.copy(), self._d + c, self._e.copy(), rhs.copy())
        if info != 0:
            raise NumericalError(f"shifted system is singular at c = {c:.3g}")
        return x

    def shift(self, rho: float) -> float:
        """Diagonal shift in the local frame for a smoothing parameter given in global units."""
        return ridge_shift(self.kernel, rho, self.n) / self.kernel.scale_factor(self.scale)

    def objective(self, rho: float) -> float:
        if not rho > 0:
            raise ValueError("GCV needs rho > 0")
        c = self.shift(rho)
        y = self._tri_solve(c, self.q)
        num = float(y @ y)
        den = float(np.sum(1.0 / (self.mu + c))) ** 2
        return float(self.n * num / den)

    def _q2(self, v):
        full = np.zeros(self.n)
        full[self.npoly:] = v
        return self._apply_q(full[:, None], trans=False)[:, 0]

    def residual_operator(self, rho: float) -> np.ndarray:
        """Dense ``I - B(rho)``, for diagnostics and tests."""
        c = self.shift(rho)
        m = self.n - self.npoly
        Q = self._apply_q(np.eye(self.n), trans=False)
        Q2 = Q[:, self.npoly:]
        K = Q2.T @ self.A @ Q2
        return c * Q2 @ np.linalg.solve(K + c * np.eye(m), Q2.T)

    def fit(self, rho: float, subdomain: int = -1) -> LocalSpline:
        c = self.shift(rho)
        lam = self._q2(self._apply_z(self._tri_solve(c, self.q), trans=False))
        resid = self.values - self.A @ lam - c * lam
        qt = self._apply_q(resid[:, None], trans=True)[:self.npoly, 0]
        coef = sla.solve_triangular(self.R, qt)
        return LocalSpline(self.kernel, self.center, self.scale, self.nodes, lam, coef,
                           self.exponents, float(rho), subdomain)


def gcv_objective(sites, values, kernel: PhsKernel, rho: float) -> float:
    """GCV score ``V(rho) = N |(I - B) f|^2 / trace(I - B)^2``."""
    return GCVProblem(sites, values, kernel).objective(rho)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(func, lo: float, hi: float, xtol: float = 1e-2):
    """Minimise ``func`` on [lo, hi]; returns ``(x, f(x))`` of the best point seen."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    seen = [(fc, c), (fd, d)]
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = func(c)
            seen.append((fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = func(d)
            seen.append((fd, d))
    best = min(seen)
    return best[1], best[0]


def gcv_minimize(sites, values, kernel: PhsKernel, rho_lo: float = GCV_BRACKET[0],
                 rho_hi: float = GCV_BRACKET[1], xtol: float = 1e-2,
                 problem: GCVProblem | None = None) -> float:
    """Smoothing parameter minimising the GCV score on ``[rho_lo, rho_hi]``.

    A coarse scan over log10(rho) locates the best basin, then golden-section
    search refines it to ``xtol`` in log10 units. The bracket endpoints are
    candidates too, so a monotone score returns the boundary exactly.
    """
    if not 0 < rho_lo < rho_hi:
        raise ValueError(f"need 0 < rho_lo < rho_hi, got {rho_lo}, {rho_hi}")
    problem = problem or GCVProblem(sites, values, kernel)
    lo, hi = math.log10(rho_lo), math.log10(rho_hi)

    def score(t):
        v = problem.objective(10.0 ** t)
        if not math.isfinite(v):
            raise NumericalError(f"GCV score is not finite at rho = {10.0 ** t:.3g}")
        return v

    grid = np.linspace(lo, hi, 11)
    vals = [score(t) for t in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    t, v = golden_section(score, a, b, xtol)
    best_t, best_v = t, v
    for t_end, v_end in ((lo, vals[0]), (hi, vals[-1])):
        if v_end <= best_v:
            best_t, best_v = t_end, v_end
    if best_t == lo:
        return float(rho_lo)
    if best_t == hi:
        return float(rho_hi)
    return float(10.0 ** best_t)


def fit_local(sites, values, kernel: PhsKernel, rho, center=None, scale=None,
              subdomain: int = -1, rho_bracket=GCV_BRACKET) -> LocalSpline:
    """Fit one smoothing spline.

    ``rho`` is a non-negative number or ``"gcv"``. Sites are mapped to
    ``(x - center) / scale`` before assembly and the ridge shift is rescaled
    so the fitted function is the same as in global coordinates.
    """
    values = np.asarray(values, dtype=np.float64)
    center, scale, nodes = _local_frame(sites, center, scale)
    n = len(nodes)
    P = polynomial_matrix(nodes, kernel.exponents)
    exps = reduced_basis(P, kernel.exponents)
    if len(exps) < len(kernel.exponents):
        logger.warning("subdomain %d: polynomial basis reduced from %d to %d terms",
                       subdomain, len(kernel.exponents), len(exps))
    if n < len(exps):
        raise NumericalError(f"subdomain {subdomain}: {n} sites cannot support {len(exps)} polynomials")
    if rho == "gcv":
        if len(exps) == len(kernel.exponents) and n > len(exps):
            problem = GCVProblem(sites, values, kernel, center=center, scale=scale)
            rho_opt = gcv_minimize(None, None, kernel, *rho_bracket, problem=problem)
            return problem.fit(rho_opt, subdomain)
        logger.warning("subdomain %d: GCV unavailable on degenerate sites, using rho = %g",
                       subdomain, rho_bracket[0])
        rho = rho_bracket[0]
    rho = float(rho)
    if rho < 0:
        raise ValueError("smoothing parameter must be non-negative")
    K, rhs = assemble_system(nodes, values, kernel, 0.0, exps)
    K[np.arange(n), np.arange(n)] += ridge_shift(kernel, rho, n) / kernel.scale_factor(scale)
    sol, rcond = _solve_symmetric(K, rhs)
    if sol is None or not np.all(np.isfinite(sol)):
        raise NumericalError(f"subdomain {subdomain}: singular local system")
    return LocalSpline(kernel, center, scale, nodes, sol[:n], sol[n:], exps, rho, subdomain, rcond)
