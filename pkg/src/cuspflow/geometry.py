"""Background metric, conformal metrics and their pointwise curvature.

The background is flat on the core away from the punctures (a constant
multiple ``exp(2 psi0) |dx|^2`` of the coordinate metric, with ``psi0`` the
cusp log-factor at the outer blend radius) and equals the model cusp
``(r log(1/r))^-2 |dx|^2`` inside ``r <= r(s_lo)``.  In between the
log-conformal factor is blended by a C-infinity smoothstep in ``log r`` (a
quintic step is available as an option), and the curvature of the blend is
evaluated in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import operators as ops
from .atlas import Atlas, Discretization, SurfaceSpec, build_atlas, smooth_step_derivs
from .operators import ScalarField


# ------------------------------------------------------------ blend profile
def _quintic(x):
    b = x**3 * (10 - 15 * x + 6 * x**2)
    db = 30 * x**2 * (1 - x) ** 2
    d2b = 60 * x * (1 - x) * (1 - 2 * x)
    return b, db, d2b


def blend_profile(log_r, r_in: float, r_out: float, profile: str = "smooth"):
    """Log-factor of the background over the flat chart and its curvature.

    Takes ``t = log r`` (radii near the end underflow).  Returns
    ``(psi, psi_cusp, R)``: the background is ``exp(2 psi) |dx|^2`` with
    ``psi = psi0 + b (psi_cusp - psi0)``, ``psi0 = psi_cusp(r_out)``, the model
    cusp is ``exp(2 psi_cusp) |dx|^2`` and
    ``R = -2 exp(-2 psi - 2t) d^2psi/dt^2`` is the background scalar curvature.
    Inside ``r_in`` this is the exact cusp (``R = -2``), outside ``r_out`` it
    is flat.
    """
    t = np.asarray(log_r, dtype=float)
    t_in, t_out = np.log(r_in), np.log(r_out)
    span = t_out - t_in
    xi = np.clip((t_out - t) / span, 0.0, 1.0)
    b, db, d2b = (_quintic if profile == "quintic" else smooth_step_derivs)(xi)
    psi0 = flat_log_factor(r_out)
    psi_c = -t - np.log(-t)
    dpsi_c = -1.0 - 1.0 / t
    d2psi_c = 1.0 / t**2
    psi = psi0 + b * (psi_c - psi0)
    d2psi = d2b * (psi_c - psi0) / span**2 - 2 * db * dpsi_c / span + b * d2psi_c
    with np.errstate(over="ignore", invalid="ignore"):
        R = -2.0 * np.exp(-2 * psi - 2 * t) * d2psi
    R = np.where(xi >= 1.0, -2.0, np.where(xi <= 0.0, 0.0, R))
    return psi, psi_c, R


def flat_log_factor(r_out: float) -> float:
    """Log-factor of the flat core metric: the cusp log-factor at ``r_out``."""
    t = np.log(r_out)
    return float(-t - np.log(-t))


@dataclass(frozen=True)
class BackgroundMetric:
    """Per-node background factor relative to the chart metric, and its curvature.

    On the core ``w_hat`` is relative to ``|dx|^2``; on a cusp chart it is
    relative to ``ds^2 + exp(-2s) dtheta^2`` (identically 1 there when the
    blend annulus sits outside the chart).  Hole nodes carry ``w_hat = 1``.
    """

    atlas: Atlas
    w_hat: np.ndarray
    R_hat: np.ndarray

    @property
    def spec(self) -> SurfaceSpec:
        return self.atlas.spec

    @property
    def wR(self) -> np.ndarray:
        return self.w_hat * self.R_hat


def build_background(spec: SurfaceSpec, atlas: Atlas | None = None) -> BackgroundMetric:
    """Background metric with cusp ends, flat core, and analytic curvature."""
    if atlas is None:
        atlas = build_atlas(spec)
    elif atlas.spec != spec:
        raise ValueError("atlas was built for a different surface")
    r_in, r_out = atlas.blend_inner, atlas.blend_outer
    w = np.ones(atlas.size)
    R = np.zeros(atlas.size)
    core_w = atlas.core_view(w)
    core_R = atlas.core_view(R)
    active = ~atlas.core_hole
    core_w[active] = np.exp(2 * flat_log_factor(r_out))
    for j in range(spec.n_ends):
        r = atlas.core_polar[j][0]
        near = (r < r_out) & active
        psi, _, Rj = blend_profile(np.log(r[near]), r_in, r_out)
        core_w[near] = np.exp(2 * psi)
        core_R[near] = Rj
    for j, c in enumerate(atlas.cusps):
        psi, psi_c, Rj = blend_profile(-np.exp(c.s), r_in, r_out)
        atlas.end_view(w, j)[:] = np.exp(2 * (psi - psi_c))[:, None]
        atlas.end_view(R, j)[:] = Rj[:, None]
    return BackgroundMetric(atlas, w, R)


@dataclass
class ConformalMetric:
    """``g = u * background`` with end limits ``lambda_j`` of ``u``."""

    background: BackgroundMetric
    u: ScalarField
    end_limits: tuple[float, ...] | None = None

    def __post_init__(self):
        a = self.atlas
        if self.u.atlas is not a:
            raise ValueError("factor lives on a different atlas")
        if np.any(~(self.u.values[a.active_mask] > 0)):
            raise ValueError("conformal factor must be positive on every active node")
        if self.end_limits is None:
            self.end_limits = tuple(
                float(np.mean(self.u.end(j)[-1])) for j in range(len(a.cusps))
            )

    @property
    def atlas(self) -> Atlas:
        return self.background.atlas

    def total_factor(self) -> np.ndarray:
        W = self.background.w_hat * self.u.values
        W[self.atlas.hole_mask] = 1.0
        return W

    def scaled(self, c: float) -> "ConformalMetric":
        return ConformalMetric(
            self.background,
            self.u.with_values(self.u.values * c),
            tuple(c * x for x in self.end_limits),
        )

    def end_remainder(self) -> ScalarField:
        """``v = u - lambda_j`` on every end chart (core entries zero)."""
        v = ScalarField(self.atlas)
        for j, lam in enumerate(self.end_limits):
            v.end(j)[:] = self.u.end(j) - lam
        return v


def hyperbolic_background_metric(background: BackgroundMetric, u=1.0) -> ConformalMetric:
    return ConformalMetric(background, ScalarField.constant(background.atlas, u))


def log_factor(u: ScalarField) -> np.ndarray:
    a = u.atlas
    out = np.zeros(a.size)
    act = a.active_mask
    out[act] = np.log(u.values[act])
    return out


def scalar_curvature(metric: ConformalMetric) -> ScalarField:
    """Scalar curvature ``R = (R_hat - Lap_hat log u) / u`` at every active node."""
    a = metric.atlas
    u = metric.u.values
    if np.any(~(u[a.active_mask] > 0)):
        raise ValueError("conformal factor must be positive")
    st = ops.stencil_mask(a)
    L0 = ops.chart_laplacian(a)
    W = metric.total_factor()
    R = np.where(st, (metric.background.wR - L0 @ log_factor(metric.u)) / W, 0.0)
    return ops.exchange(ScalarField(a, R))


def total_area(metric: ConformalMetric) -> float:
    return ops.integrate(ScalarField.constant(metric.atlas, 1.0), metric)


def gauss_bonnet_defect(metric: ConformalMetric, R: ScalarField | None = None) -> float:
    """``int R dA - 4 pi chi``."""
    if R is None:
        R = scalar_curvature(metric)
    return ops.integrate(R, metric) - 4 * np.pi * metric.atlas.spec.euler


def kappa(atlas: Atlas, lam, band: tuple[float, float] | None = None) -> ScalarField:
    """Partition-of-unity combination equal to 1 on the core and ``lam_j`` far out on end j."""
    if band is None:
        band = (atlas.disc.s_lo, atlas.s_mid)
    step = ops.smoothstep_field(atlas, *band)
    out = ScalarField.constant(atlas, 1.0)
    owner = atlas.core_nearest[0]
    for j, lj in enumerate(lam):
        core_sel = owner == j
        out.core[core_sel] += step.core[core_sel] * (lj - 1.0)
        out.end(j)[:] += step.end(j) * (lj - 1.0)
    return out


def make_geometry(spec: SurfaceSpec, disc: Discretization | None = None):
    """Convenience: atlas and background in one call."""
    atlas = build_atlas(spec, disc)
    return atlas, build_background(spec, atlas)
