"""Residual monitors, rate fits and bound checks for flow trajectories."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import operators as ops
from .geometry import ConformalMetric, gauss_bonnet_defect
from .operators import ScalarField
from .potential import hamilton_h, traceless_hessian_normsq

CSV_VERSION = 1


@dataclass(frozen=True)
class TimeSeriesRecord:
    """One diagnostic sample along a trajectory.

    Residual channels are sup norms over :func:`residual_mask`; the ``_l2``
    variants are dA-weighted root-mean-square values over the same nodes.  The three
    time-differenced channels (curvature evolution, h evolution, area law)
    use the neighbouring samples; they are one-sided at the ends of a series
    and ``nan`` when fewer than three samples exist.
    """

    t: float
    area: float
    rbar: float
    rho: float
    sup_R_minus_rho: float
    inf_R: float
    sup_R: float
    sup_h: float
    sup_grad_f: float
    gb_defect: float
    sup_u_change: float
    decay_norm: tuple[float, ...]
    end_curvature: tuple[float, ...]
    lam: tuple[float, ...]
    res_area: float
    res_curvature: float
    res_trace: float
    res_h: float
    res_curvature_l2: float
    res_trace_l2: float
    res_h_l2: float
    shi_monitor: float
    dt: float
    newton_its: int

    def flat(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                for j, x in enumerate(v):
                    out[f"{k}_{j}"] = x
            else:
                out[k] = v
        return out

    @staticmethod
    def columns(n_ends: int) -> list[str]:
        cols = []
        for fld in fields(TimeSeriesRecord):
            if fld.name in ("decay_norm", "end_curvature", "lam"):
                cols += [f"{fld.name}_{j}" for j in range(n_ends)]
            else:
                cols.append(fld.name)
        return cols


# ------------------------------------------------------------- residuals
def residual_mask(atlas, margin: int = 3, s_max: float = 3.0) -> np.ndarray:
    """Nodes on which identity residuals are measured.

    Interior rows, minus the last ``margin`` rings before ``s_hi`` (the
    truncation ring carries boundary data, not the flow equation) and minus
    cusp rings with ``s > s_max``.  Deep in a cusp the theta part of the
    Laplacian carries the factor ``exp(2s)``; applied to a derived field
    (``Lap R`` with ``R`` itself a second difference) it amplifies rounding
    noise by roughly ``exp(4s)`` and the residual there measures round-off,
    not the identity.
    """
    m = atlas.interior_mask.copy()
    for j, c in enumerate(atlas.cusps):
        view = atlas.end_view(m, j)
        view[c.n_s - 1 - margin:] = False
        view[c.s > s_max] = False
    return m


def weighted_l2(values: np.ndarray, metric: ConformalMetric, mask: np.ndarray) -> float:
    """dA-weighted root mean square of ``values`` over ``mask``."""
    w = ops.quadrature_weights(metric.atlas) * metric.total_factor()
    w = np.where(mask, w, 0.0)
    tot = float(np.sum(w))
    return float(np.sqrt(np.sum(w * values**2) / tot)) if tot > 0 else math.nan


def _ddt_weights(t0: float, t1: float, t2: float, at: int):
    """Second-order three-point derivative weights at sample ``at`` (0, 1 or 2)."""
    h1, h2 = t1 - t0, t2 - t1
    if not (h1 > 0 and h2 > 0):
        raise ValueError("sample times must be strictly increasing")
    if at == 1:
        return (-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2)))
    if at == 0:
        return (-(2 * h1 + h2) / (h1 * (h1 + h2)), (h1 + h2) / (h1 * h2), -h1 / (h2 * (h1 + h2)))
    return (h2 / (h1 * (h1 + h2)), -(h1 + h2) / (h1 * h2), (h1 + 2 * h2) / (h2 * (h1 + h2)))


def area_ode_residual(series, chi: int | None = None) -> np.ndarray:
    """``(A' - (rho A - 4 pi chi)) / (|rho| A)`` per sample.

    ``series`` is a sequence of records (``t``, ``area``, ``rho``) or a tuple
    ``(t, A, rho, chi)`` of arrays.  ``A'`` uses second-order three-point
    differences (centered inside, one-sided at the ends).
    """
    if isinstance(series, tuple) and len(series) == 4:
        t, A, rho, chi = series
        t, A = np.asarray(t, float), np.asarray(A, float)
        rho = np.broadcast_to(np.asarray(rho, float), t.shape)
    else:
        t = np.array([r.t for r in series], float)
        A = np.array([r.area for r in series], float)
        rho = np.array([r.rho for r in series], float)
        if chi is None:
            raise ValueError("chi is required for record series")
    if t.size < 3:
        raise ValueError("area_ode_residual needs at least three samples")
    dA = np.gradient(A, t, edge_order=2)
    scale = np.where(rho != 0, np.abs(rho), 1.0) * A
    return (dA - (rho * A - 4 * np.pi * chi)) / scale


def curvature_evolution_residual(R_prev: ScalarField, R_now: ScalarField, R_next: ScalarField,
                                 metric: ConformalMetric, rho: float, dt) -> ScalarField:
    """``dR/dt - Lap R - R (R - rho)`` at the middle snapshot.

    ``dt`` is the uniform spacing, or a pair ``(t_now - t_prev, t_next - t_now)``.
    """
    atlas = metric.atlas
    if not (R_prev.atlas is atlas and R_now.atlas is atlas and R_next.atlas is atlas):
        raise ValueError("curvature snapshots live on different grids")
    h1, h2 = (dt, dt) if np.isscalar(dt) else dt
    w = _ddt_weights(0.0, h1, h1 + h2, 1)
    dR = w[0] * R_prev.values + w[1] * R_now.values + w[2] * R_next.values
    lap = ops.laplacian(R_now, metric).values
    res = dR - lap - R_now.values * (R_now.values - rho)
    res[~atlas.active_mask] = 0.0
    return ScalarField(atlas, res)


def trace_residual(f: ScalarField, R: ScalarField, metric: ConformalMetric,
                   rbar: float | None = None) -> ScalarField:
    """``Lap f - (R - Rbar)``."""
    if rbar is None:
        rbar = ops.integrate(R, metric) / ops.integrate(ScalarField.constant(f.atlas, 1.0), metric)
    res = ops.laplacian(f, metric).values - (R.values - rbar)
    res[~f.atlas.active_mask] = 0.0
    return ScalarField(f.atlas, res)


def h_evolution_residual(h_prev, h_now, h_next, Z_now, metric, rbar: float, rho: float,
                         times) -> ScalarField:
    """``dh/dt - (Lap h - 2|Z|^2 + (2 Rbar - rho) h)`` at the middle snapshot."""
    t0, t1, t2 = times
    w = _ddt_weights(t0, t1, t2, 1)
    dh = w[0] * h_prev.values + w[1] * h_now.values + w[2] * h_next.values
    lap = ops.laplacian(h_now, metric).values
    res = dh - (lap - 2 * Z_now.values + (2 * rbar - rho) * h_now.values)
    res[~metric.atlas.active_mask] = 0.0
    return ScalarField(metric.atlas, res)


# ------------------------------------------------------------- rate fits
@dataclass(frozen=True)
class RateFit:
    C: float
    rate: float
    r2: float
    n: int


def fit_exponential_rate(t, values, t_window: tuple[float, float] | None = None) -> RateFit:
    """Least-squares fit ``log v = log C - rate * t`` on a time window.

    ``rate > 0`` means decay.  A constant channel returns ``rate = 0`` and
    ``r2 = 1``.
    """
    t = np.asarray(t, float)
    v = np.asarray(values, float)
    sel = np.ones(t.shape, bool)
    if t_window is not None:
        sel = (t >= t_window[0]) & (t <= t_window[1])
    t, v = t[sel], v[sel]
    if t.size < 2:
        raise ValueError("need at least two samples in the fit window")
    if np.any(~(v > 0)):
        raise ValueError("channel must be positive on the fit window")
    y = np.log(v)
    slope, icpt = np.polyfit(t, y, 1)
    fit = icpt + slope * t
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-28 * max(1.0, float(np.sum(y**2))) else 1.0 - ss_res / ss_tot
    return RateFit(float(np.exp(icpt)), float(-slope), r2, int(t.size))


def transient_end(records: Sequence[TimeSeriesRecord]) -> float:
    """First time at which ``sup R < 0`` (start of the rate-fit window)."""
    for r in records:
        if r.sup_R < 0:
            return r.t
    return math.inf


def fit_window(records: Sequence[TimeSeriesRecord]) -> tuple[float, float] | None:
    """Asymptotic window ``[max(t_bar, t_end / 2), t_end]`` for rate fits.

    ``t_bar`` is :func:`transient_end`.  Starting no earlier than half the run
    keeps fast modes seeded by rough initial data out of the fit.
    """
    if not records:
        return None
    t_bar = transient_end(records)
    t_end = records[-1].t
    if not math.isfinite(t_bar) or t_bar >= t_end:
        return None
    return (max(t_bar, 0.5 * t_end), t_end)


def convergence_fits(records: Sequence[TimeSeriesRecord],
                     channels=("sup_R_minus_rho", "sup_h"), min_samples: int = 4) -> dict:
    """Exponential fits of decaying channels on :func:`fit_window`.

    Returns ``{channel: RateFit or None}`` plus the window under ``"window"``.
    """
    win = fit_window(records)
    out: dict = {"window": win}
    t = np.array([r.t for r in records])
    for ch in channels:
        out[ch] = None
        if win is None:
            continue
        v = np.array([getattr(r, ch) for r in records])
        sel = (t >= win[0]) & (t <= win[1]) & np.isfinite(v) & (v > 0)
        if np.count_nonzero(sel) >= min_samples:
            out[ch] = fit_exponential_rate(t[sel], v[sel])
    return out


# --------------------------------------------------------------- barriers
@dataclass(frozen=True)
class BarrierResult:
    passed: bool
    violation: dict | None


def barrier_check(history, A: float, C: float, s0: float, mu: float) -> BarrierResult:
    """Check ``|v| <= C exp(A t) min(1, (s/s0)^-mu)`` on every cusp node and sample.

    ``history`` is a sequence of ``(t, v)`` with ``v`` a :class:`ScalarField`
    holding ``u - lambda_j`` on the end charts.
    """
    for t, v in history:
        atlas = v.atlas
        for j, c in enumerate(atlas.cusps):
            psi = C * np.exp(A * t) * np.minimum(1.0, (c.s / s0) ** (-mu))
            excess = np.abs(v.end(j)) - psi[:, None]
            k = np.unravel_index(np.argmax(excess), excess.shape)
            if excess[k] > 0:
                return BarrierResult(False, {
                    "t": float(t), "end": j, "s": float(c.s[k[0]]),
                    "theta": float(c.theta[k[1]]), "value": float(abs(v.end(j)[k])),
                    "barrier": float(psi[k[0]]),
                })
    return BarrierResult(True, None)


@dataclass(frozen=True)
class BoundsResult:
    passed: bool
    C_lower: float
    C_upper: float
    violations: int


def bounds_check(series: Sequence[TimeSeriesRecord], rho: float, fit_fraction: float = 0.5,
                 slack: float = 0.5, abs_tol: float = 1e-9) -> BoundsResult:
    """Two-sided curvature bounds ``-C <= R`` and ``R - Rbar <= C exp(-|rho| t)``.

    The constants are fitted on the first ``fit_fraction`` of the time span
    (inflated by ``1 + slack``) and the bounds are then checked on every
    sample, so a channel that stops decaying at the predicted rate fails.
    """
    t = np.array([r.t for r in series])
    if t.size == 0:
        raise ValueError("empty series")
    up = np.array([r.sup_R - r.rbar for r in series])
    lo = np.array([r.inf_R for r in series])
    t_fit = t[0] + fit_fraction * (t[-1] - t[0])
    early = t <= t_fit
    decay = np.exp(abs(rho) * t)
    C_up = (1 + slack) * float(np.max(np.maximum(up[early], 0.0) * decay[early]))
    C_lo = (1 + slack) * float(max(np.max(-lo[early]), 0.0))
    bad = (up > C_up / decay + abs_tol) | (lo < -C_lo - abs_tol)
    return BoundsResult(not bool(np.any(bad)), C_lo, C_up, int(np.sum(bad)))


# ---------------------------------------------------------------- recorder
@dataclass
class _Snap:
    t: float
    state: object
    R: ScalarField
    h: ScalarField | None
    Z: ScalarField | None
    rbar: float
    base: dict


class Recorder:
    """Builds :class:`TimeSeriesRecord` objects from a stream of flow states.

    Scalar channels are computed on arrival; time-differenced channels use a
    rolling window of the last three snapshots (centered, or one-sided for
    the first and last sample).  Records are assembled by :meth:`finish`.
    """

    def __init__(self, state, config=None, on_record=None, snapshot=None):
        self.atlas = state.atlas
        self.chi = self.atlas.spec.euler
        self.mu = self.atlas.spec.mu
        self.mask = residual_mask(self.atlas)
        self.u0 = state.u.values.copy()
        self.on_record = on_record
        self.snapshot = snapshot
        self.window: list[_Snap] = []
        self.rows: list[dict] = []
        self.push(state)

    def _snap(self, st) -> _Snap:
        a = self.atlas
        m = st.metric
        R = st.R
        act = a.active_mask & ~a.boundary_mask
        area = st.area
        rbar = ops.integrate(R, m) / area
        h = Z = None
        sup_h = sup_grad = res_trace = res_trace_l2 = math.nan
        if st.f is not None:
            h = hamilton_h(st.f, m)
            Z = traceless_hessian_normsq(st.f, m)
            sup_h = float(np.max(h.values[act]))
            sup_grad = float(np.sqrt(ops.gradient_norm_sq(st.f, m).sup(act)))
            rt = trace_residual(st.f, R, m, rbar).values
            res_trace = float(np.max(np.abs(rt[self.mask])))
            res_trace_l2 = weighted_l2(rt, m, self.mask)
        v = m.end_remainder()
        gR = ops.gradient_norm_sq(R, m)
        base = dict(
            t=st.t, area=area, rbar=rbar, rho=st.rho,
            sup_R_minus_rho=float(np.max(np.abs(R.values[act] - st.rho))),
            inf_R=float(np.min(R.values[act])), sup_R=float(np.max(R.values[act])),
            sup_h=sup_h, sup_grad_f=sup_grad,
            gb_defect=gauss_bonnet_defect(m, R),
            sup_u_change=float(np.max(np.abs(st.u.values - self.u0)[a.active_mask])),
            decay_norm=tuple(ops.decay_norm(v, self.mu, j) for j in range(len(a.cusps))),
            end_curvature=tuple(ops.end_curvature(R, j) for j in range(len(a.cusps))),
            lam=tuple(st.lam),
            res_area=math.nan, res_curvature=math.nan, res_h=math.nan,
            res_trace=res_trace, res_curvature_l2=math.nan, res_h_l2=math.nan,
            res_trace_l2=res_trace_l2,
            shi_monitor=float(np.sqrt(gR.sup(self.mask)) * np.sqrt(max(st.t, 0.0))),
            dt=st.dt, newton_its=st.newton_its,
        )
        return _Snap(st.t, st, R, h, Z, rbar, base)

    def _time_residuals(self, at: int):
        s0, s1, s2 = self.window
        w = _ddt_weights(s0.t, s1.t, s2.t, at)
        mid = self.window[at]
        m = mid.state.metric
        rho = mid.state.rho
        dR = w[0] * s0.R.values + w[1] * s1.R.values + w[2] * s2.R.values
        lapR = ops.laplacian(mid.R, m).values
        res_c = dR - lapR - mid.R.values * (mid.R.values - rho)
        mid.base["res_curvature"] = float(np.max(np.abs(res_c[self.mask])))
        mid.base["res_curvature_l2"] = weighted_l2(res_c, m, self.mask)
        if mid.h is not None:
            dh = w[0] * s0.h.values + w[1] * s1.h.values + w[2] * s2.h.values
            laph = ops.laplacian(mid.h, m).values
            rh = dh - (laph - 2 * mid.Z.values + (2 * mid.rbar - rho) * mid.h.values)
            mid.base["res_h"] = float(np.max(np.abs(rh[self.mask])))
            mid.base["res_h_l2"] = weighted_l2(rh, m, self.mask)

    def push(self, st):
        if self.rows and not st.t > self.rows[-1]["t"]:
            raise ValueError("record times must be strictly increasing")
        snap = self._snap(st)
        if self.snapshot is not None:
            self.snapshot(st)
        if len(self.window) == 3:
            self.window.pop(0)
        self.window.append(snap)
        self.rows.append(snap.base)
        if len(self.window) == 3:
            if len(self.rows) == 3:
                self._time_residuals(0)
            self._time_residuals(1)

    def finish(self) -> list[TimeSeriesRecord]:
        if len(self.window) == 3:
            self._time_residuals(2)
        if len(self.rows) >= 3:
            t = np.array([r["t"] for r in self.rows])
            A = np.array([r["area"] for r in self.rows])
            rho = np.array([r["rho"] for r in self.rows])
            res = area_ode_residual((t, A, rho, self.chi))
            for r, x in zip(self.rows, res):
                r["res_area"] = float(x)
        recs = [TimeSeriesRecord(**r) for r in self.rows]
        if self.on_record is not None:
            for r in recs:
                self.on_record(r)
        return recs
