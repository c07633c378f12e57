"""Operator self-test battery run by ``cuspflow validate``.

Each check compares a discrete quantity against a closed form and returns a
:class:`Check`.  Tolerances scale with the grid where the error is a
truncation error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import operators as ops
from .atlas import Atlas
from .geometry import (
    BackgroundMetric,
    gauss_bonnet_defect,
    hyperbolic_background_metric,
    scalar_curvature,
)
from .operators import ScalarField

GB_TOL = 5e-3


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "tol": self.tol,
                "passed": self.passed, "detail": self.detail}


def ambient_field(atlas: Atlas, fn) -> ScalarField:
    """Evaluate a periodic function of the plane position on every chart."""
    out = ScalarField(atlas)
    xs = atlas.core.x
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    out.core[:] = fn(X, Y)
    for j, c in enumerate(atlas.cusps):
        S, T = np.meshgrid(c.s, c.theta, indexing="ij")
        r = np.exp(-np.exp(S))
        cx, cy = atlas.spec.punctures[j]
        out.end(j)[:] = fn(cx + r * np.cos(T), cy + r * np.sin(T))
    out.values[atlas.hole_mask] = 0.0
    return out


def _cusp_rows(c, margin: int = 1):
    return np.arange(margin, c.n_s - margin)


def check_cusp_closed_forms(atlas: Atlas) -> list[Check]:
    """Chart Laplacian on the cusp against ``(d_s^2 - d_s + e^{2s} d_theta^2)``.

    ``s^2`` pins the first-order drift; ``e^{-s} cos(theta)`` pins the sign
    and size of the angular coefficient (``2 e^{-s} - e^{s}`` times cos).
    """
    L0 = ops.chart_laplacian(atlas)
    cases = (
        ("cusp_laplacian_s2", lambda S, T: S**2, lambda S, T: 2.0 - 2.0 * S),
        ("cusp_laplacian_angular",
         lambda S, T: np.exp(-S) * np.cos(T),
         lambda S, T: (2 * np.exp(-S) - np.exp(S)) * np.cos(T)),
    )
    out = []
    for name, f, lf in cases:
        worst = 0.0
        for j, c in enumerate(atlas.cusps):
            S, T = np.meshgrid(c.s, c.theta, indexing="ij")
            v = ScalarField(atlas)
            v.end(j)[:] = f(S, T)
            got = atlas.end_view(L0 @ v.values, j)
            rows = _cusp_rows(c)
            exact = lf(S, T)[rows]
            err = np.max(np.abs(got[rows] - exact)) / np.max(np.abs(exact))
            worst = max(worst, float(err))
        ds = atlas.cusps[0].ds
        out.append(Check(name, worst, max(1e-9, 2.0 * ds**2), "relative sup error, cusp rows"))
    return out


def check_core_closed_form(atlas: Atlas) -> Check:
    """Flat five-point Laplacian on ``cos(2 pi x) sin(2 pi y)``."""
    L0 = ops.chart_laplacian(atlas)
    f = ambient_field(atlas, lambda x, y: np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y))
    got = atlas.core_view(L0 @ f.values)
    sel = atlas.core_interior
    exact = -8 * np.pi**2 * f.core
    err = np.max(np.abs(got[sel] - exact[sel])) / (8 * np.pi**2)
    h = atlas.core.h
    return Check("core_laplacian_trig", float(err), 10.0 * h**2, "relative sup error, core rows")


def check_constants(metric) -> Check:
    """``Lap 1 = 0`` as a componentwise backward error (rows carry ``e^{2s}`` weights)."""
    op = ops.assemble_laplacian(metric)
    one = np.ones(metric.atlas.size)
    v = np.abs(op.matrix @ one)
    scale = np.maximum(abs(op.matrix) @ one, 1e-300)
    rows = ~metric.atlas.hole_mask
    return Check("laplacian_of_constant", float(np.max((v / scale)[rows])), 1e-12,
                 "max |L 1| / (|L| 1)")


def check_green(metric) -> Check:
    """``int (a Lap b - b Lap a) dA`` for two smooth periodic functions, relative."""
    tp = 2 * np.pi
    a = ops.exchange(ambient_field(
        metric.atlas, lambda x, y: np.cos(tp * x) + 0.3 * np.sin(tp * (x + 2 * y))))
    b = ops.exchange(ambient_field(
        metric.atlas,
        lambda x, y: np.sin(tp * y) + 0.5 * np.cos(tp * (x - y)) + 0.2 * np.sin(2 * tp * x)))
    res = ops.green_identity_residual(a, b, metric)
    op = ops.assemble_laplacian(metric)
    la, lb = op.apply(a), op.apply(b)
    scale = ops.integrate(ScalarField(a.atlas, np.abs(a.values * lb.values)), metric)
    scale += ops.integrate(ScalarField(a.atlas, np.abs(b.values * la.values)), metric)
    h = metric.atlas.core.h
    return Check("green_identity", abs(res) / scale, 10.0 * h**2, "relative to int |a Lap b| + |b Lap a|")


def check_gauss_bonnet(metric) -> Check:
    R = scalar_curvature(metric)
    d = gauss_bonnet_defect(metric, R)
    return Check("gauss_bonnet", abs(d), GB_TOL, f"int R dA - 4 pi chi = {d:.3e}")


def run_battery(background: BackgroundMetric) -> list[Check]:
    atlas = background.atlas
    metric = hyperbolic_background_metric(background)
    checks = [check_constants(metric), check_core_closed_form(atlas)]
    checks += check_cusp_closed_forms(atlas)
    checks += [check_green(metric), check_gauss_bonnet(metric)]
    return checks
