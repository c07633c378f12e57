"""Shared test harnesses: manufactured potentials and residual measurements."""

import numpy as np

from cuspflow import diagnostics as D
from cuspflow import flow as F
from cuspflow import operators as ops
from cuspflow.atlas import Discretization, SurfaceSpec, smooth_step_derivs
from cuspflow.geometry import hyperbolic_background_metric, make_geometry
from cuspflow.operators import ScalarField
from cuspflow.potential import (
    hamilton_h,
    integrate_with_slopes,
    solve_linear_potential,
    solve_potential,
    traceless_hessian_normsq,
)

TP = 2 * np.pi


def _a(x, y):
    return np.cos(TP * x) * np.sin(TP * y) + 0.5 * np.sin(TP * (x + y))


def _lap_a(x, y):
    return -(TP**2) * (2 * np.cos(TP * x) * np.sin(TP * y) + np.sin(TP * (x + y)))


def manufactured_potential(spec: SurfaceSpec, disc: Discretization, slope: float = 0.7):
    """Exact ``f*`` (smooth ambient part plus ``c_j s`` switched on along each end) and its Laplacian.

    Returns ``(metric, f_star, q, slopes)`` on the hyperbolic background.
    """
    atlas, bg = make_geometry(spec, disc)
    m = hyperbolic_background_metric(bg)
    W = m.total_factor()
    fs = ScalarField(atlas)
    q = np.zeros(atlas.size)
    X, Y = np.meshgrid(atlas.core.x, atlas.core.x, indexing="ij")
    fs.core[:] = _a(X, Y)
    atlas.core_view(q)[:] = _lap_a(X, Y) / atlas.core_view(W)
    s1, s2 = atlas.s_mid + 0.5, atlas.s_mid + 2.0
    slopes = []
    for j, c in enumerate(atlas.cusps):
        cj = slope * (j + 1) * (-1) ** j
        S, T = np.meshgrid(c.s, c.theta, indexing="ij")
        r = np.exp(-np.exp(S))
        px, py = spec.punctures[j]
        x, y = px + r * np.cos(T), py + r * np.sin(T)
        b0, b1, b2 = smooth_step_derivs(np.clip((S - s1) / (s2 - s1), 0, 1))
        d1, d2 = b1 / (s2 - s1), b2 / (s2 - s1) ** 2
        B1 = cj * (b0 + S * d1)
        B2 = cj * (2 * d1 + S * d2)
        fs.end(j)[:] = _a(x, y) + cj * S * b0
        # flat Laplacian pulled back: r^2 log(r)^2 = exp(2s - 2 e^s)
        lap0 = np.exp(2 * S - 2 * np.exp(S)) * _lap_a(x, y) + B2 - B1
        atlas.end_view(q, j)[:] = lap0 / atlas.end_view(W, j)
        slopes.append(cj)
    return m, fs, q, slopes


def mms_error(spec: SurfaceSpec, disc: Discretization) -> tuple[float, float]:
    """Sup error of the potential solve against the manufactured solution, and the multiplier."""
    m, fs, q, slopes = manufactured_potential(spec, disc)
    f, mult = solve_linear_potential(m, q, slopes)
    area = ops.integrate(ScalarField.constant(m.atlas, 1.0), m)
    shift = integrate_with_slopes(fs, m, slopes) / area
    act = m.atlas.active_mask
    return float(np.max(np.abs(f.values - fs.values + shift)[act])), mult


BENCH = SurfaceSpec(((0.5, 0.5),), (2.0,))


def benchmark_initial(atlas_bg, rho: float = -1.0, end_perturbation: bool = True):
    _, bg = atlas_bg
    ends = [F.EndPerturbation(0.2, 1)] if end_perturbation else []
    return F.initial_data(bg, [F.Bump((0.0, 0.0), 0.25, 0.3)], ends)


def identity_residuals(n: int, dt: float, t_star: float = 0.9, t_warm: float = 0.5):
    """Sup of the curvature, trace and h residuals at ``t_star`` on the benchmark.

    An adaptive warm-up carries the fast transient to ``t_warm``; the potential
    is re-solved there and the flow continues with fixed step ``dt`` so that
    the time and space errors scale together.
    """
    geo = make_geometry(BENCH, Discretization(n_core=n, n_s=2 * n))
    atlas = geo[0]
    m0 = benchmark_initial(geo)
    warm = F.FlowConfig(rho_mode="explicit", rho=-1.0, tol=1e-4, dt_init=1e-2, t_final=t_warm, stop_tol=0.0)
    for st in F.iterate(F.initial_state(m0, warm), warm):
        pass
    st.f = solve_potential(st.metric).f
    fixed = F.FlowConfig(rho_mode="explicit", rho=-1.0, adaptive=False, dt_init=dt, dt_min=dt / 64,
                         t_final=t_star + 1.5 * dt, stop_tol=0.0, newton_maxit=40)
    hist = list(F.iterate(st, fixed))
    k = int(round((t_star - t_warm) / dt))
    p, c, nx = hist[k - 1], hist[k], hist[k + 1]
    assert abs(c.t - t_star) < 1e-9
    mask = D.residual_mask(atlas)
    mc = c.metric
    rc = D.curvature_evolution_residual(p.R, c.R, nx.R, mc, c.rho, dt)
    rbar = ops.integrate(c.R, mc) / c.area
    rt = D.trace_residual(c.f, c.R, mc, rbar)
    hs = [hamilton_h(s.f, s.metric) for s in (p, c, nx)]
    Z = traceless_hessian_normsq(c.f, mc)
    rh = D.h_evolution_residual(*hs, Z, mc, rbar, c.rho, (p.t, c.t, nx.t))
    return [float(np.max(np.abs(x.values[mask]))) for x in (rc, rt, rh)]
