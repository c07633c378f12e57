import numpy as np
import pytest

from cuspflow import operators as ops
from cuspflow.atlas import Discretization
from cuspflow.flow import Bump, initial_data, uniformize
from cuspflow.geometry import hyperbolic_background_metric, scalar_curvature
from cuspflow.operators import ScalarField
from cuspflow.potential import (
    hamilton_h,
    mode_amplitudes,
    nonzero_mode_decay_check,
    slope_compatibility_residual,
    solve_linear_potential,
    solve_potential,
    traceless_hessian_normsq,
    zero_mode_solve,
)
from helpers import BENCH, mms_error


@pytest.fixture(scope="module")
def uniform(one_end):
    return uniformize(one_end[1], -2.0)


@pytest.fixture(scope="module")
def bumpy(one_end):
    # a bump away from the puncture, on top of the smooth end interpolant
    return initial_data(one_end[1], [Bump((0.0, 0.0), 0.25, 0.3)])


def test_constant_curvature_has_zero_potential(uniform):
    sol = solve_potential(uniform)
    assert sol.rbar == pytest.approx(-2.0, abs=1e-3)
    assert np.max(np.abs(sol.f.values[uniform.atlas.active_mask])) < 1e-6
    assert abs(sol.c[0]) < 1e-6


def test_potential_solves_its_equation(bumpy):
    sol = solve_potential(bumpy)
    assert sol.residual < 1e-10
    assert sol.mean_residual <= 1e-8 * ops.integrate(ScalarField.constant(bumpy.atlas, 1.0), bumpy)
    assert np.isfinite(sol.grad_bound)


def test_potential_slope_is_end_limit(bumpy):
    sol = solve_potential(bumpy)
    R = scalar_curvature(bumpy)
    U = bumpy.end_limits[0]
    R_end = float(np.mean(R.end(0)[-2]))
    assert sol.c[0] == pytest.approx(-U * (R_end - sol.rbar), rel=1e-2)


def test_slope_compatibility(bumpy):
    assert slope_compatibility_residual(solve_potential(bumpy), bumpy) < 1e-3


def test_potential_is_linear_in_data(one_end, rng):
    a, bg = one_end
    m = hyperbolic_background_metric(bg)
    st = ops.stencil_mask(a)
    q1 = np.where(st, rng.normal(size=a.size), 0.0)
    q2 = np.where(st, rng.normal(size=a.size), 0.0)
    f1, m1 = solve_linear_potential(m, q1, [0.3])
    f2, m2 = solve_linear_potential(m, q2, [-0.1])
    f3, m3 = solve_linear_potential(m, 2 * q1 - q2, [0.7])
    act = a.active_mask
    assert np.allclose(f3.values[act], (2 * f1.values - f2.values)[act], atol=1e-8)
    assert m3 == pytest.approx(2 * m1 - m2, abs=1e-9)


def test_manufactured_solution_converges():
    e = [mms_error(BENCH, Discretization(n_core=n, n_s=2 * n))[0] for n in (32, 64, 128)]
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all(orders >= 1.8), orders


def test_manufactured_multiplier_is_small():
    _, mult = mms_error(BENCH, Discretization(n_core=64, n_s=128))
    assert abs(mult) < 1e-3


def test_zero_mode_trivial():
    s = np.linspace(0.1, 8.0, 200)
    w, c = zero_mode_solve(s, 0.0, 1.0)
    assert c == 0.0 and np.all(w == 0.0)


@pytest.mark.parametrize("a", [-1.5, 0.4, 2.0])
def test_zero_mode_constant_source(a):
    s = np.linspace(0.1, 8.0, 400)
    w, c = zero_mode_solve(s, a, 1.0)
    assert c == pytest.approx(-a)
    ds = s[1] - s[0]
    assert np.max(np.abs(w + a * s)) < abs(a) * ds**2


def test_zero_mode_decaying_tail():
    # (d^2 - d) w = e^{-s}: w = e^{-s}/2 is the bounded-gradient solution; a
    # long end makes the last-sample limit e^{-30} negligible
    s = np.linspace(0.1, 30.0, 30001)
    w, c = zero_mode_solve(s, np.exp(-s), 1.0, beta=0.5 * np.exp(-30.0))
    assert abs(c) < 1e-12
    assert np.allclose(w, 0.5 * np.exp(-s), atol=1e-6)


def test_zero_mode_rejects_nondecaying():
    s = np.linspace(0.1, 8.0, 200)
    with pytest.raises(ValueError):
        zero_mode_solve(s, np.sin(3 * s), 1.0)


def test_nonzero_mode_check_axisymmetric(one_end):
    a, _ = one_end
    c = a.cusps[0]
    f = ScalarField(a)
    f.end(0)[:] = c.s[:, None] ** 2
    assert nonzero_mode_decay_check(0, f) < 1e-12


def test_nonzero_mode_check_reports_amplitude(one_end):
    a, _ = one_end
    c = a.cusps[0]
    f = ScalarField(a)
    f.end(0)[:] = 0.3 * np.exp(-c.s)[:, None] * np.cos(c.theta)[None, :]
    assert nonzero_mode_decay_check(0, f) == pytest.approx(0.3, rel=1e-12)
    amp = mode_amplitudes(f, 0)
    assert np.allclose(amp[:, 0], 0.3 * np.exp(-c.s))
    assert np.max(np.abs(amp[:, 1:])) < 1e-14


def test_potential_nonzero_modes_decay(bumpy):
    sol = solve_potential(bumpy)
    bound = nonzero_mode_decay_check(0, sol.f)
    assert np.isfinite(bound) and bound < 10.0


def test_traceless_hessian_nonnegative(bumpy):
    sol = solve_potential(bumpy)
    Z = traceless_hessian_normsq(sol.f, bumpy)
    act = bumpy.atlas.active_mask
    assert np.all(Z.values[act] >= 0)
    assert np.all(np.isfinite(hamilton_h(sol.f, bumpy).values[act]))


def test_traceless_hessian_of_radial_log(one_end):
    # f = s on the exact cusp is a Killing-free horocyclic coordinate: Hess f has
    # eigenvalues (0, -e^{-2s} e^{2s}) relative to g, so |Z|^2 = 1/2
    a, bg = one_end
    m = hyperbolic_background_metric(bg)
    c = a.cusps[0]
    f = ScalarField(a)
    f.core[:] = np.maximum(a.core_s, 0.0)
    f.end(0)[:] = c.s[:, None]
    Z = traceless_hessian_normsq(f, m).end(0)
    s_blend = np.log(-np.log(a.blend_inner))
    rows = (c.s > max(s_blend, a.s_mid)) & (np.arange(c.n_s) < c.n_s - 1)
    assert np.allclose(Z[rows], 0.5, rtol=1e-2)
