"""Normalized Ricci flow ``dg/dt = (rho - R) g`` in conformal-factor form.

With ``g = u * background`` and ``u = exp(phi)`` the flow reads

    d phi / dt = exp(-phi) (Lap_hat phi - R_hat) + rho,

which is integrated by backward Euler with a Newton solve of the composite
(all charts at once) system.  At ``s_hi`` the factor is pinned to the end
limit ``U_j(t)`` obtained from the constant-mode ODE ``U' = rho U + 2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import operators as ops
from .atlas import Atlas, smooth_step
from .geometry import (
    BackgroundMetric,
    ConformalMetric,
    kappa,
    log_factor,
    scalar_curvature,
    total_area,
)
from .operators import ScalarField
from .potential import (
    SolverError,
    constraint_rows,
    mode_bc_matrix,
    mode_bc_rhs,
    solve_potential,
)

log = logging.getLogger(__name__)

RHO_MODES = ("area_preserving", "explicit", "unnormalized")
END_BCS = ("dirichlet_ode", "neumann_zero")


class FlowError(RuntimeError):
    """Integrator failure (time step underflow)."""

    def __init__(self, message: str, state: "FlowState | None" = None):
        super().__init__(message)
        self.state = state


class NewtonFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    """Time-integration settings.

    ``tol`` bounds the step-doubling estimate of the local error in ``phi``
    (sup norm).  With ``adaptive=False`` every step is a plain backward Euler
    step of size ``dt_init``.
    """

    rho_mode: str = "area_preserving"
    rho: float | None = None
    dt_init: float = 0.01
    dt_max: float = 0.5
    dt_min: float = 1e-8
    tol: float = 1e-4
    adaptive: bool = True
    extrapolate: bool = True
    t_final: float = 10.0
    end_bc: str = "dirichlet_ode"
    newton_tol: float = 1e-10
    newton_maxit: int = 12
    cadence: int = 1
    stop_tol: float = 1e-6
    co_evolve: bool = True
    short_time: bool = False

    def __post_init__(self):
        if self.rho_mode not in RHO_MODES:
            raise ValueError(f"rho_mode must be one of {RHO_MODES}, got {self.rho_mode!r}")
        if self.end_bc not in END_BCS:
            raise ValueError(f"end_bc must be one of {END_BCS}, got {self.end_bc!r}")
        if self.rho_mode == "explicit":
            if self.rho is None:
                raise ValueError("explicit rho_mode needs a value for rho")
            if not self.rho < 0 and not (self.rho == 0 and self.short_time):
                raise ValueError("explicit rho must be negative for normalized runs")
        if self.rho_mode == "unnormalized" and not self.short_time:
            raise ValueError("rho = 0 is only allowed in short-time mode")
        if not (0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        if self.t_final < 0:
            raise ValueError("t_final must be nonnegative")
        if self.cadence < 1 or self.newton_maxit < 1:
            raise ValueError("cadence and newton_maxit must be at least 1")
        if not (self.tol > 0 and self.newton_tol > 0 and self.stop_tol >= 0):
            raise ValueError("tolerances must be positive")

    def resolve_rho(self, metric: ConformalMetric) -> float:
        if self.rho_mode == "area_preserving":
            return rho_area_preserving(metric)
        if self.rho_mode == "unnormalized":
            return 0.0
        return float(self.rho)


# ----------------------------------------------------------- closed forms
def rho_area_preserving(metric: ConformalMetric) -> float:
    """``4 pi chi / A0``: the normalization that keeps the area fixed."""
    area = total_area(metric)
    if not area > 0:
        raise ValueError("area must be positive")
    return 4 * np.pi * metric.atlas.spec.euler / area


def end_limit(sigma_j: float, rho: float, t):
    """Limit of the factor on an end: solves ``U' = rho U + 2``, ``U(0) = 2/sigma_j``."""
    if not sigma_j > 0:
        raise ValueError("sigma_j must be positive")
    t = np.asarray(t, dtype=float)
    if rho == 0:
        out = 2.0 / sigma_j + 2.0 * t
    else:
        out = -2.0 / rho + (2.0 / sigma_j + 2.0 / rho) * np.exp(rho * t)
    return float(out) if out.ndim == 0 else out


def normalize_transform(t: float, rho: float) -> tuple[float, float]:
    """Map unnormalized time ``t`` to normalized time ``tau`` and the metric scale.

    ``tau = -log(1 - rho t) / rho`` and the normalized metric at ``tau`` is
    ``exp(rho tau)`` times the unnormalized metric at ``t``.
    """
    if rho == 0:
        return float(t), 1.0
    arg = 1.0 - rho * t
    if not arg > 0:
        raise ValueError("normalize_transform needs 1 - rho t > 0")
    tau = -np.log(arg) / rho
    return float(tau), float(np.exp(rho * tau))


def inverse_normalize_transform(tau: float, rho: float) -> float:
    """Unnormalized time ``t = (1 - exp(-rho tau)) / rho``."""
    if rho == 0:
        return float(tau)
    return float(-np.expm1(-rho * tau) / rho)


# ----------------------------------------------------------------- state
@dataclass
class FlowState:
    t: float
    phi: ScalarField
    background: BackgroundMetric
    rho: float
    lam: tuple[float, ...]
    f: ScalarField | None = None
    dt: float = 0.0
    newton_its: int = 0
    dt_next: float = 0.0
    _metric: ConformalMetric | None = field(default=None, repr=False)
    _R: ScalarField | None = field(default=None, repr=False)
    _area: float | None = field(default=None, repr=False)

    @property
    def atlas(self) -> Atlas:
        return self.background.atlas

    @property
    def u(self) -> ScalarField:
        v = np.exp(self.phi.values)
        return ScalarField(self.atlas, v)

    @property
    def metric(self) -> ConformalMetric:
        if self._metric is None:
            self._metric = ConformalMetric(self.background, self.u, self.lam)
        return self._metric

    @property
    def R(self) -> ScalarField:
        if self._R is None:
            self._R = scalar_curvature(self.metric)
        return self._R

    @property
    def area(self) -> float:
        if self._area is None:
            self._area = total_area(self.metric)
        return self._area


def end_limits_at(background: BackgroundMetric, rho: float, t: float) -> tuple[float, ...]:
    return tuple(end_limit(s, rho, t) for s in background.spec.sigma)


# -------------------------------------------------------- implicit solves
class _System:
    """Sparse pieces of the composite backward-Euler system that never change."""

    def __init__(self, background: BackgroundMetric, end_bc: str):
        a = background.atlas
        self.atlas = a
        self.bg = background
        self.interior = a.interior_mask
        self.ring = a.boundary_mask
        self.L0 = ops.chart_laplacian(a)
        self.L0_int = (sparse.diags(self.interior.astype(float)) @ self.L0).tocsr()
        self.C = constraint_rows(a)
        self.end_bc = end_bc
        if end_bc == "dirichlet_ode":
            self.B = sparse.diags(self.ring.astype(float)).tocsr()
        else:
            self.B = _ring_slope_rows(a)
        self.static = (self.C + self.B).tocsr()
        self.log_w = np.log(background.w_hat)
        self.wR = background.wR

    def drift(self, phi: np.ndarray):
        """``g = (L0 phi - w R_hat) / W`` (equals ``-R``) and ``1/W``."""
        inv_w = np.exp(-(self.log_w + phi))
        g = (self.L0 @ phi - self.wR) * inv_w
        return g, inv_w

    def ring_target(self, values: Sequence[float]) -> np.ndarray:
        """Right-hand side of the ring rows: ``log U_j`` (Dirichlet) or zero slope."""
        rhs = np.zeros(self.atlas.size)
        if self.end_bc == "dirichlet_ode":
            for j, v in enumerate(values):
                self.atlas.end_view(rhs, j)[-1] = np.log(v)
        return rhs

    def fill_holes(self, x: np.ndarray) -> np.ndarray:
        h = self.atlas.hole_mask
        x[h] = (self.atlas.hole_fill @ x)[h]
        return x

    def _newton(self, phi: np.ndarray, residual, jacobian, maxit: int, tol: float):
        """Chord-Newton: reuse the factorization while the update contracts quickly."""
        lu = None
        prev = np.inf
        for it in range(1, maxit + 1):
            F = residual(phi)
            if lu is None:
                try:
                    lu = factorize(jacobian(phi))
                except RuntimeError as exc:
                    raise NewtonFailure(f"singular Jacobian: {exc}") from exc
            delta = lu.solve(F)
            if not np.all(np.isfinite(delta)):
                raise NewtonFailure("non-finite Newton update")
            phi = phi - delta
            size = float(np.max(np.abs(delta)))
            if size <= tol:
                return self.fill_holes(phi), it
            if size > 50:
                break
            if size > 0.25 * prev:
                lu = None
            prev = size
        raise NewtonFailure(f"Newton did not converge in {maxit} iterations")

    def backward_euler(self, phi_old: np.ndarray, dt: float, rho: float,
                       ring_rhs: np.ndarray, maxit: int, tol: float):
        """Solve one backward-Euler step; returns ``(phi, iterations)``."""
        I = self.interior
        hole = self.atlas.hole_mask

        def residual(phi):
            g, _ = self.drift(phi)
            F = np.where(I, phi - phi_old - dt * (g + rho), 0.0)
            F += self.static @ phi - ring_rhs
            F[hole] -= phi_old[hole]
            return F

        def jacobian(phi):
            g, inv_w = self.drift(phi)
            return (
                sparse.diags(I * (1.0 + dt * g))
                - sparse.diags(dt * inv_w) @ self.L0_int
                + self.static
            )

        return self._newton(phi_old.copy(), residual, jacobian, maxit, tol)

    def steady(self, phi0: np.ndarray, rho: float, ring_rhs: np.ndarray,
               maxit: int, tol: float):
        """Newton solve of ``-R + rho = 0`` on interior rows."""
        I = self.interior
        hole = self.atlas.hole_mask
        frozen = phi0[hole]

        def residual(phi):
            g, _ = self.drift(phi)
            F = np.where(I, -(g + rho), 0.0) + self.static @ phi - ring_rhs
            F[hole] -= frozen
            return F

        def jacobian(phi):
            g, inv_w = self.drift(phi)
            return sparse.diags(I * g) - sparse.diags(inv_w) @ self.L0_int + self.static

        return self._newton(phi0.copy(), residual, jacobian, maxit, tol)


def factorize(A):
    """Sparse LU with a fill-reducing ordering suited to the composite matrices."""
    return splu(sparse.csc_matrix(A), permc_spec="MMD_AT_PLUS_A")


def _ring_slope_rows(atlas: Atlas) -> sparse.csr_matrix:
    """One-sided ``d_s`` at every node of the ``s_hi`` ring."""
    rows, cols, vals = [], [], []
    for j, c in enumerate(atlas.cusps):
        nt, o, K = c.n_theta, atlas.offsets[j], c.n_s - 1
        ring = o + K * nt + np.arange(nt)
        for back, coef in ((0, 3.0), (1, -4.0), (2, 1.0)):
            rows.append(ring)
            cols.append(ring - back * nt)
            vals.append(np.full(nt, coef / (2 * c.ds)))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(atlas.size, atlas.size),
    )


def _system(background: BackgroundMetric, end_bc: str) -> _System:
    key = ("flow_system", end_bc, id(background))
    cache = background.atlas._cache
    if key not in cache:
        cache[key] = _System(background, end_bc)
    return cache[key]


# ------------------------------------------------------------- potential
def _potential_step(metric: ConformalMetric, R: ScalarField, f_old: ScalarField,
                    dt: float) -> ScalarField:
    """Backward-Euler step of ``df/dt = Lap f + Rbar f`` on the metric at the new time.

    Ring rows carry the zero-mode slope ``c_j = -U_j (R_j - Rbar)`` of the
    new metric and zero for the other theta-modes, so that the trace identity
    ``Lap f = R - Rbar`` is propagated together with its end asymptotics.
    """
    a = metric.atlas
    area = total_area(metric)
    rbar = ops.integrate(R, metric) / area
    W = metric.total_factor()
    I = a.interior_mask
    slopes = []
    for j in range(len(a.cusps)):
        U = float(np.mean(a.end_view(W, j)[-1]))
        slopes.append(-U * (ops.end_curvature(R, j) - rbar))
    L0 = ops.chart_laplacian(a)
    A = (
        sparse.diags(I * (1.0 - dt * rbar))
        - dt * sparse.diags(np.where(I, 1.0 / W, 0.0)) @ L0
        + constraint_rows(a)
        + mode_bc_matrix(a)
    )
    rhs = np.where(I, f_old.values, 0.0) + mode_bc_rhs(a, slopes)
    rhs[a.hole_mask] = f_old.values[a.hole_mask]
    x = factorize(A).solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("potential step produced non-finite values")
    x[a.hole_mask] = (a.hole_fill @ x)[a.hole_mask]
    return ScalarField(a, x)


def co_evolve_potential(state: FlowState, dt: float, new_metric: ConformalMetric,
                        new_R: ScalarField | None = None) -> ScalarField:
    """Advance the potential of ``state`` by ``dt`` using ``new_metric`` (the metric at ``t + dt``)."""
    if state.f is None:
        raise ValueError("state carries no potential; initialize it with solve_potential")
    if new_R is None:
        new_R = scalar_curvature(new_metric)
    return _potential_step(new_metric, new_R, state.f, dt)


# ----------------------------------------------------------------- steps
def _make_state(prev: FlowState, phi: np.ndarray, t: float, dt: float, its: int,
                f: ScalarField | None) -> FlowState:
    lam = end_limits_at(prev.background, prev.rho, t)
    return FlowState(t, ScalarField(prev.atlas, phi), prev.background, prev.rho, lam,
                     f, dt, its)


def _plain_step(state: FlowState, dt: float, config: FlowConfig, sys: _System) -> FlowState:
    t_new = state.t + dt
    ring = sys.ring_target(end_limits_at(state.background, state.rho, t_new))
    phi, its = sys.backward_euler(state.phi.values, dt, state.rho, ring,
                                  config.newton_maxit, config.newton_tol)
    return _make_state(state, phi, t_new, dt, its, None)


def step(state: FlowState, config: FlowConfig, dt: float | None = None) -> FlowState:
    """Advance by one accepted step.

    Adaptive mode compares one step of size ``dt`` with two of size ``dt/2``
    and rejects when their sup difference exceeds ``config.tol``; accepted
    steps return the Richardson combination ``2 phi_half - phi_full`` when
    ``config.extrapolate`` is set.  Newton failures halve ``dt``.  The
    potential, if carried, takes one backward-Euler step on the accepted
    metric.  ``result.dt_next`` suggests the next step size.
    """
    sys = _system(state.background, config.end_bc)
    dt = config.dt_init if dt is None else dt
    while True:
        if dt < config.dt_min:
            raise FlowError(f"time step {dt:.3e} fell below dt_min at t = {state.t:.6g}", state)
        try:
            if not config.adaptive:
                new = _plain_step(state, dt, config, sys)
                new.dt_next = dt
                break
            full = _plain_step(state, dt, config, sys)
            half = _plain_step(state, 0.5 * dt, config, sys)
            two = _plain_step(half, 0.5 * dt, config, sys)
        except NewtonFailure as exc:
            log.debug("step rejected at t=%.6g dt=%.3e: %s", state.t, dt, exc)
            dt *= 0.5
            continue
        act = state.atlas.active_mask
        err = float(np.max(np.abs(two.phi.values - full.phi.values)[act]))
        fac = 0.9 * np.sqrt(config.tol / max(err, 1e-300))
        if err <= config.tol:
            phi = two.phi.values
            if config.extrapolate:
                phi = 2 * phi - full.phi.values
            its = full.newton_its + half.newton_its + two.newton_its
            new = _make_state(state, phi, state.t + dt, dt, its, None)
            new.dt_next = float(min(config.dt_max, dt * min(2.0, fac)))
            break
        dt *= max(0.2, min(0.9, fac))
    if config.co_evolve and state.f is not None:
        new.f = co_evolve_potential(state, dt, new.metric, new.R)
    return new


# -------------------------------------------------------- initial data
@dataclass(frozen=True)
class Bump:
    center: tuple[float, float]
    radius: float
    amplitude: float


@dataclass(frozen=True)
class EndPerturbation:
    amplitude: float
    k: int = 1


def bump_field(atlas: Atlas, bump: Bump) -> ScalarField:
    """C-infinity bump ``exp(1 - 1/(1 - (d/radius)^2))`` (value 1 at the center)."""
    out = ScalarField(atlas)

    def profile(d):
        x = np.clip(d / bump.radius, 0.0, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(x < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - x**2, 1e-300)), 0.0)

    xs = atlas.core.x
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    dx = (X - bump.center[0] + 0.5) % 1.0 - 0.5
    dy = (Y - bump.center[1] + 0.5) % 1.0 - 0.5
    out.core[:] = profile(np.hypot(dx, dy))
    for j, c in enumerate(atlas.cusps):
        S, T = np.meshgrid(c.s, c.theta, indexing="ij")
        r = np.exp(-np.exp(S))
        px = atlas.spec.punctures[j][0] + r * np.cos(T) - bump.center[0]
        py = atlas.spec.punctures[j][1] + r * np.sin(T) - bump.center[1]
        px = (px + 0.5) % 1.0 - 0.5
        py = (py + 0.5) % 1.0 - 0.5
        out.end(j)[:] = profile(np.hypot(px, py))
    out.values[atlas.hole_mask] = 0.0
    return out


def end_perturbation_field(atlas: Atlas, j: int, pert: EndPerturbation, mu: float,
                           cut: tuple[float, float] = (0.8, 1.6)) -> ScalarField:
    """``a chi(s) s^-mu cos(k theta)`` on end ``j``, with ``chi`` a smooth cutoff near the core."""
    out = ScalarField(atlas)
    lo, hi = cut

    def prof(s, th):
        chi = smooth_step((s - lo) / (hi - lo))
        return pert.amplitude * chi * np.maximum(s, lo) ** (-mu) * np.cos(pert.k * th)

    own = (atlas.core_nearest[0] == j) & ~atlas.core_hole
    s_core = atlas.core_s
    out.core[own] = prof(s_core[own], atlas.core_polar[j][1][own])
    c = atlas.cusps[j]
    S, T = np.meshgrid(c.s, c.theta, indexing="ij")
    out.end(j)[:] = prof(S, T)
    return out


def initial_data(background: BackgroundMetric, bumps: Sequence[Bump] = (),
                 ends: Sequence[EndPerturbation | None] = (),
                 base: str = "kappa", rho: float | None = None) -> ConformalMetric:
    """Initial factor ``u0 = base * prod(1 + a_b bump_b) + sum_j v_j``.

    ``base="kappa"`` uses ``kappa(2/sigma)``; ``base="uniformized"`` uses the
    discrete constant-curvature factor with curvature ``rho`` (default -2)
    rescaled on each end so that ``u0 -> 2/sigma_j``.
    """
    a = background.atlas
    spec = a.spec
    lam0 = tuple(2.0 / s for s in spec.sigma)
    if base == "kappa":
        u = kappa(a, lam0).values.copy()
    elif base == "uniformized":
        r = -2.0 if rho is None else rho
        star = uniformize(background, r).u.values
        scale = kappa(a, tuple(l0 / (-2.0 / r) for l0 in lam0)).values
        u = star * scale
    else:
        raise ValueError(f"unknown base {base!r}")
    for b in bumps:
        u = u * (1.0 + b.amplitude * bump_field(a, b).values)
    for j, p in enumerate(ends):
        if p is not None and p.amplitude != 0.0:
            u = u + end_perturbation_field(a, j, p, spec.mu).values
    # overlap consistency is imposed on log u, as in the flow system
    phi = np.zeros(a.size)
    act = a.active_mask
    phi[act] = np.log(u[act])
    phi = ops.exchange(ScalarField(a, phi), fill_holes=False).values
    field_u = ScalarField(a, np.exp(phi))
    field_u.values[a.hole_mask] = 1.0
    return ConformalMetric(background, field_u, lam0)


def uniformize(background: BackgroundMetric, rho: float = -2.0, tol: float = 1e-12,
               u0: ScalarField | None = None) -> ConformalMetric:
    """Discrete constant-curvature factor: interior rows satisfy ``R = rho`` exactly.

    Ring values are pinned to the fixed point ``-2/rho`` of the end-limit ODE.
    Pseudo-transient continuation (backward Euler with growing steps) brings
    the factor into the Newton basin, then Newton finishes.
    """
    if not rho < 0:
        raise ValueError("uniformization needs rho < 0")
    a = background.atlas
    sys = _system(background, "dirichlet_ode")
    U = -2.0 / rho
    ring = sys.ring_target([U] * len(a.cusps))
    phi = log_factor(u0) if u0 is not None else np.zeros(a.size)
    dt = 0.05
    for _ in range(200):
        try:
            phi_new, _ = sys.backward_euler(phi, dt, rho, ring, 20, 1e-9)
        except NewtonFailure:
            dt *= 0.25
            continue
        change = np.max(np.abs(phi_new - phi))
        phi = phi_new
        if change < 1e-3:
            break
        dt = min(dt * 2.0, 1e3)
    phi, _ = sys.steady(phi, rho, ring, 30, tol)
    u = ScalarField(a, np.exp(phi))
    return ConformalMetric(background, u, tuple([U] * len(a.cusps)))


# ------------------------------------------------------------------- run
def initial_state(metric: ConformalMetric, config: FlowConfig,
                  with_potential: bool = True) -> FlowState:
    rho = config.resolve_rho(metric)
    phi = ScalarField(metric.atlas, log_factor(metric.u))
    lam = end_limits_at(metric.background, rho, 0.0)
    f = None
    if with_potential and config.co_evolve:
        f = solve_potential(metric).f
    return FlowState(0.0, phi, metric.background, rho, lam, f, 0.0, 0)


def sup_R_minus_rho(state: FlowState) -> float:
    """``sup |R - rho|`` over active nodes other than the truncation ring (boundary data)."""
    a = state.atlas
    sel = a.active_mask & ~a.boundary_mask
    return float(np.max(np.abs(state.R.values - state.rho)[sel]))


def iterate(state: FlowState, config: FlowConfig,
            stop: Callable[[FlowState], bool] | None = None) -> Iterator[FlowState]:
    """Yield the initial state and every accepted state up to ``t_final`` or the stop rule."""
    yield state
    dt = config.dt_init
    eps = 1e-12 * max(1.0, config.t_final)
    while state.t < config.t_final - eps:
        if stop is not None and stop(state):
            return
        dt = min(dt, config.t_final - state.t)
        state = step(state, config, dt)
        dt = state.dt_next or dt
        yield state


def run(initial: ConformalMetric, config: FlowConfig, on_record=None,
        stop: Callable[[FlowState], bool] | None = None, snapshot=None):
    """Integrate the flow and collect diagnostics.

    Returns ``(records, final_state)``.  Records are emitted at the
    configured cadence; residual channels use the neighbouring recorded
    snapshots.  Integration stops at ``t_final`` or once
    ``sup|R - rho| < stop_tol``.
    """
    from .diagnostics import Recorder

    state = initial_state(initial, config)
    rec = Recorder(state, config, on_record=on_record, snapshot=snapshot)
    if stop is None:
        def stop(s):
            return sup_R_minus_rho(s) < config.stop_tol
    count = 0
    last = state
    for st in iterate(state, config, stop):
        if st is state:
            continue
        count += 1
        last = st
        if count % config.cadence == 0:
            rec.push(st)
    if count % config.cadence != 0:
        rec.push(last)
    return rec.finish(), last
