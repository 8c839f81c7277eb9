import math

import numpy as np
import pytest

from thinsurf.core import NumericalError
from thinsurf.local_solver import (GCVProblem, PhsKernel, assemble_system, fit_local,
                                   gcv_minimize, gcv_objective, golden_section,
                                   monomial_exponents, ridge_shift, theta)


def brute_gcv(sites, values, kernel, rho):
    """GCV score from the influence matrix built one unit vector at a time."""
    n = len(sites)
    K, _ = assemble_system(sites, np.zeros(n), kernel, rho)
    B = np.empty((n, n))
    for j in range(n):
        rhs = np.zeros(len(K))
        rhs[j] = 1.0
        sol = np.linalg.solve(K, rhs)
        Kp, _ = assemble_system(sites, np.zeros(n), kernel, 0.0)
        B[:, j] = Kp[:n] @ sol               # fitted values, shift excluded
    resid = values - B @ values
    return n * resid @ resid / np.trace(np.eye(n) - B) ** 2


# hand-derived normalising constants
@pytest.mark.parametrize("m,d,expected", [
    (3, 3, 1 / (96 * math.pi)),
    (2, 2, 1 / (8 * math.pi)),
    (2, 3, -1 / (8 * math.pi)),
    (1, 1, -0.5),
    (3, 2, -1 / (128 * math.pi)),
])
def test_theta_values(m, d, expected):
    assert theta(m, d) == pytest.approx(expected, rel=1e-13)


def test_theta_rejects_non_positive_power():
    with pytest.raises(ValueError):
        theta(1, 2)
    with pytest.raises(ValueError):
        PhsKernel(1, 3)


def test_kernel_values():
    r = np.array([0.0, 0.5, 2.0])
    np.testing.assert_allclose(PhsKernel(3, 3)(r), r ** 3)
    np.testing.assert_allclose(PhsKernel(2, 3)(r), r)
    tps = PhsKernel(2, 2)(r)
    assert tps[0] == 0.0
    assert tps[1] == pytest.approx(0.25 * math.log(0.5))
    assert tps[2] == pytest.approx(4 * math.log(2.0))


@pytest.mark.parametrize("m,d", [(3, 3), (2, 2), (2, 3), (3, 2)])
def test_radial_derivatives_match_finite_differences(m, d):
    kernel = PhsKernel(m, d)
    r = np.linspace(0.2, 2.0, 9)
    h = 1e-6
    dphi = (kernel(r + h) - kernel(r - h)) / (2 * h)
    d2phi = (kernel(r + h) - 2 * kernel(r) + kernel(r - h)) / h ** 2
    g1, g2 = kernel.radial_derivatives(r)
    np.testing.assert_allclose(g1, dphi / r, rtol=1e-6)
    np.testing.assert_allclose(g2, (d2phi - dphi / r) / r ** 2, rtol=1e-3, atol=1e-4)


def test_monomial_exponents():
    e = monomial_exponents(3, 2)
    assert len(e) == 10
    assert e[0].tolist() == [0, 0, 0]
    assert sorted(map(tuple, e[1:4])) == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]
    assert PhsKernel(3, 3).n_poly == 10
    assert PhsKernel(2, 2).n_poly == 3


def test_two_site_system():
    sites = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    K, rhs = assemble_system(sites, np.array([1.0, 2.0]), PhsKernel(2, 3), 0.0,
                             exponents=np.zeros((1, 3), dtype=int))
    np.testing.assert_allclose(K, [[0, 1, 1], [1, 0, 1], [1, 1, 0]])
    np.testing.assert_allclose(rhs, [1, 2, 0])


def test_diagonal_shift():
    sites = np.random.default_rng(0).random((20, 3))
    kernel = PhsKernel(3, 3)
    K0, _ = assemble_system(sites, np.zeros(20), kernel, 0.0)
    K1, _ = assemble_system(sites, np.zeros(20), kernel, 1e-3)
    shift = 1e-3 * 20 * 96 * math.pi
    assert ridge_shift(kernel, 1e-3, 20) == pytest.approx(shift)
    np.testing.assert_allclose(K1 - K0, np.diag(np.r_[np.full(20, shift), np.zeros(10)]),
                               atol=1e-9)


def test_negative_rho_rejected(rng):
    with pytest.raises(ValueError):
        fit_local(rng.random((30, 3)), rng.random(30), PhsKernel(), -1.0)


@pytest.mark.parametrize("rho", [0.0, 1e-3, 1.0])
def test_quadratic_reproduction(rng, rho):
    x = rng.random((60, 3))
    f = 1 + x[:, 0] - 2 * x[:, 1] * x[:, 2] + 3 * x[:, 2] ** 2
    s = fit_local(x, f, PhsKernel(3, 3), rho)
    assert np.max(np.abs(s(x) - f)) <= 1e-9 * np.max(np.abs(f))
    xq = rng.random((20, 3))
    fq = 1 + xq[:, 0] - 2 * xq[:, 1] * xq[:, 2] + 3 * xq[:, 2] ** 2
    np.testing.assert_allclose(s(xq), fq, rtol=1e-8)


def test_interpolation_residual_200_sites(rng):
    x = rng.random((200, 3))
    f = np.sin(3 * x[:, 0]) * np.cos(2 * x[:, 1]) + x[:, 2]
    s = fit_local(x, f, PhsKernel(3, 3), 0.0)
    assert np.max(np.abs(s(x) - f)) <= 1e-7


def test_fit_is_frame_independent(rng):
    x = rng.random((80, 3))
    f = np.exp(x[:, 0]) - x[:, 1] ** 3
    a = fit_local(x, f, PhsKernel(3, 3), 1e-4)
    b = fit_local(x, f, PhsKernel(3, 3), 1e-4, center=np.zeros(3), scale=1.0)
    xq = rng.random((30, 3))
    np.testing.assert_allclose(a(xq), b(xq), rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("m,d", [(3, 3), (2, 3), (2, 2)])
def test_spline_derivatives_match_finite_differences(rng, m, d):
    x = rng.random((60, d))
    f = np.sin(2 * x).sum(axis=1)
    s = fit_local(x, f, PhsKernel(m, d), 1e-5)
    q = 0.2 + 0.6 * rng.random((10, d))
    val, grad, hess = s.derivatives(q)
    np.testing.assert_allclose(val, s(q))
    h = 1e-5
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        np.testing.assert_allclose(grad[:, a], (s(q + e) - s(q - e)) / (2 * h), rtol=1e-5, atol=1e-6)
        _, gp, _ = s.derivatives(q + e)
        _, gm, _ = s.derivatives(q - e)
        np.testing.assert_allclose(hess[:, :, a], (gp - gm) / (2 * h), rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("m,d", [(3, 3), (2, 3), (2, 2)])
@pytest.mark.parametrize("rho", [1e-5, 1e-3, 1e-1])
def test_gcv_matches_brute_force(rng, m, d, rho):
    x = rng.random((70, d))
    f = np.cos(3 * x).sum(axis=1) + 0.05 * rng.standard_normal(70)
    kernel = PhsKernel(m, d)
    fast = gcv_objective(x, f, kernel, rho)
    assert fast == pytest.approx(brute_gcv(x, f, kernel, rho), rel=1e-8)


def test_gcv_fit_matches_direct_solve(rng):
    x = rng.random((90, 3))
    f = x[:, 0] ** 3 + 0.01 * rng.standard_normal(90)
    prob = GCVProblem(x, f, PhsKernel())
    a = prob.fit(1e-3)
    b = fit_local(x, f, PhsKernel(), 1e-3)
    np.testing.assert_allclose(a(x), b(x), rtol=1e-8, atol=1e-10)
    B = np.eye(90) - prob.residual_operator(1e-3)
    np.testing.assert_allclose(B @ f, a(x), atol=1e-9)


def test_gcv_minimize_beats_dense_grid(rng):
    x = rng.random((150, 3))
    f = np.sin(4 * x[:, 0]) + 0.1 * rng.standard_normal(150)
    kernel = PhsKernel()
    prob = GCVProblem(x, f, kernel)
    rho = gcv_minimize(None, None, kernel, 1e-7, 1e-1, problem=prob)
    grid = np.logspace(-7, -1, 301)
    best = min(prob.objective(r) for r in grid)
    assert prob.objective(rho) <= best * (1 + 1e-3)


def test_gcv_minimum_on_boundary_is_returned_exactly(rng):
    x = rng.random((60, 3))
    f = 1 + x[:, 0] + 1e-3 * rng.standard_normal(60)      # linear plus white noise
    kernel = PhsKernel()
    prob = GCVProblem(x, f, kernel)
    vals = [prob.objective(r) for r in np.logspace(-8, -5, 61)]
    assert np.all(np.diff(vals) <= 0), "score should keep falling across the bracket"
    assert gcv_minimize(None, None, kernel, 1e-8, 1e-5, problem=prob) == 1e-5


def test_gcv_needs_unisolvent_sites():
    x = np.column_stack([np.linspace(0, 1, 40), np.zeros(40), np.zeros(40)])
    with pytest.raises(NumericalError):
        GCVProblem(x, np.zeros(40), PhsKernel())


def test_degenerate_sites_fall_back_to_reduced_basis():
    t = np.linspace(0, 1, 30)
    x = np.column_stack([t, t ** 2, np.zeros(30)])       # planar sites
    s = fit_local(x, np.sin(t), PhsKernel(), "gcv")
    assert s.rho == 1e-6
    assert len(s.exponents) < 10
    np.testing.assert_allclose(s(x), np.sin(t), atol=1e-3)


def test_golden_section_on_parabola():
    x, fx = golden_section(lambda t: (t - 0.3) ** 2, -1.0, 2.0, 1e-6)
    assert x == pytest.approx(0.3, abs=1e-5)
    assert fx == pytest.approx(0.0, abs=1e-10)


def test_gcv_minimize_rejects_bad_bracket(rng):
    with pytest.raises(ValueError):
        gcv_minimize(rng.random((30, 3)), rng.random(30), PhsKernel(), 1e-2, 1e-3)
