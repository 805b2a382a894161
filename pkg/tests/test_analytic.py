import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from homlab.analytic import (AnnulusExit, HeatKernel, InvalidRadii, Radial, RadialSolution, alpha_perturbation_gap,
                             annulus_mean_exit, boundary_exit_linear_bound, max_mean_exit, solve_grid,
                             solve_homogenized, solve_radial)
from homlab.domain import Annulus, Ball, InvalidDelta


def test_annulus_reference_value():
    # u(1.5) for (r1, r2, alpha, d) = (1, 2, 1, 3): c1 = 7/3, c2 = -2
    u = AnnulusExit(1.0, 2.0, 1.0, 3)
    assert u.c1 == pytest.approx(7 / 3, abs=1e-15)
    assert u.c2 == pytest.approx(-2.0, abs=1e-15)
    assert annulus_mean_exit(1, 2, 1, 3, 1.5) == pytest.approx(0.25, abs=1e-15)


@given(r1=st.floats(0.2, 3), w=st.floats(0.1, 4), alpha=st.floats(0.2, 5), d=st.integers(3, 6))
def test_annulus_solves_the_ode(r1, w, alpha, d):
    r2 = r1 + w
    u = AnnulusExit(r1, r2, alpha, d)
    assert abs(u(r1)) < 1e-10 * max(1.0, r2**2 / alpha)
    assert abs(u(r2)) < 1e-10 * max(1.0, r2**2 / alpha)
    r = np.linspace(r1, r2, 7)
    lap = u.second_derivative(r) + (d - 1) / r * u.derivative(r)
    np.testing.assert_allclose(0.5 * alpha * lap, -1.0, rtol=1e-7)
    assert np.all(u(r[1:-1]) > 0)
    # the linear Taylor bound at the inner sphere
    assert np.all(u(r) <= u.linear_constant * (r - r1) + 1e-9 * r2**2 / alpha)


def test_annulus_input_checks():
    with pytest.raises(InvalidRadii):
        AnnulusExit(2.0, 1.0)
    with pytest.raises(InvalidRadii):
        AnnulusExit(1.0, 2.0, d=2)
    with pytest.raises(InvalidRadii):
        annulus_mean_exit(1, 2, 1, 3, 2.5)


def test_ball_poisson_center():
    sol = solve_homogenized(Ball(1.0), 1.0, -1.0, 0.0)
    assert isinstance(sol, RadialSolution)
    assert sol(np.zeros((1, 3)))[0] == pytest.approx(1 / 3, abs=1e-12)
    r = np.array([[0.5, 0, 0], [0, 0.9, 0]])
    np.testing.assert_allclose(sol(r), (1 - np.array([0.25, 0.81])) / 3, atol=1e-12)


def test_radial_annulus_matches_closed_form():
    sol = solve_radial(Annulus(1.0, 2.0), 1.0, lambda r: -1.0, 0.0, 0.0)
    u = AnnulusExit(1.0, 2.0, 1.0, 3)
    for r in (1.0, 1.25, 1.5, 1.9, 2.0):
        assert sol.radial(r) == pytest.approx(float(u(r)), abs=1e-12)


def test_radial_with_profile_and_boundary_data():
    # u = cos r solves (1/2) Laplacian u = g with g = -(cos r + 2 sin r / r) / 2 in d = 3
    g = Radial(lambda r: -0.5 * (math.cos(r) + (2 * math.sin(r) / r if r > 0 else 2.0)))
    sol = solve_homogenized(Ball(1.0), 1.0, g, Radial(lambda r: math.cos(r)))
    for r in (0.0, 0.3, 0.7, 1.0):
        assert sol.radial(r) == pytest.approx(math.cos(r), abs=1e-10)


def test_grid_solver_converges_at_second_order():
    g = lambda x: -0.5 * (np.cos(np.linalg.norm(x, axis=1)) + 2 * np.sinc(np.linalg.norm(x, axis=1) / np.pi))
    f = lambda x: np.cos(np.linalg.norm(x, axis=1))
    errs = []
    for h in (1 / 4, 1 / 8):
        s = solve_grid(Ball(1.0), 1.0, g, f, h)
        errs.append(np.max(np.abs(s.values - f(s.nodes))))
        assert s.residual < 1e-8
    assert errs[1] < errs[0] / 3


def test_grid_requires_h_for_general_data():
    with pytest.raises(ValueError):
        solve_homogenized(Ball(1.0), 1.0, lambda x: np.zeros(len(x)), 0.0)


def test_alpha_gap_envelope():
    u1 = solve_homogenized(Ball(1.0), 1.0, 1.0, 0.0)
    u2 = solve_homogenized(Ball(1.0), 1.1, 1.0, 0.0)
    gap = abs(u1.radial(0.0) - u2.radial(0.0))
    assert gap == pytest.approx(1 / 3 - 1 / 3.3, abs=1e-12)
    env = alpha_perturbation_gap(Ball(1.0), 1.0, 1.1, 1.0)
    assert env == pytest.approx(2 * 0.1 / 3, abs=1e-12)
    assert gap <= env
    assert alpha_perturbation_gap(Ball(1.0), 1.0, 1.0, 1.0) == 0.0


def test_max_mean_exit():
    assert max_mean_exit(Ball(2.0), 2.0) == pytest.approx(4 / 6, abs=1e-12)
    ann = AnnulusExit(1.0, 2.0)
    assert max_mean_exit(Annulus(1.0, 2.0), 1.0) == pytest.approx(float(ann(ann.peak_radius)), rel=1e-6)


def test_boundary_bound_dominates_ball_exit_times():
    b = Ball(1.0)
    for delta in (0.05, 0.1, 0.3):
        bb = boundary_exit_linear_bound(b, delta, 1.0)
        # E tau from a point delta inside the unit ball
        r = 1.0 - delta
        assert (1 - r * r) / 3 <= bb.bound
    bb = boundary_exit_linear_bound(b, 10.0, 1.0, epsilon=0.01)
    assert bb.bound == pytest.approx(boundary_exit_linear_bound(b, 0.1, 1.0).bound / 1e-4)
    with pytest.raises(InvalidDelta):
        boundary_exit_linear_bound(b, 0.6, 1.0)


def test_heat_kernel_mass_and_smoothing():
    k = HeatKernel(1.5, 2.0, 3)
    assert k.radial_mass(50.0) == pytest.approx(1.0, abs=1e-10)
    x = np.array([[0.3, -0.1, 2.0]])
    # exact for quadratics: E |x + s Z|^2 = |x|^2 + d s^2
    val = k.smooth(lambda y: np.sum(y * y, axis=1), x, order=4)
    assert val[0] == pytest.approx(np.sum(x * x) + 3 * 3.0, rel=1e-12)
