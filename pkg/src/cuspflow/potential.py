"""Potential function ``Lap f = R - Rbar`` with cusp asymptotics.

On end ``j`` the potential grows like ``c_j s + beta_j`` (``s = log log r`` in
the Euclidean picture).  The solver imposes the slope ``c_j`` on the zero
theta-mode at ``s_hi`` and homogeneous Dirichlet data on the other modes,
and fixes the additive constant by ``int f dA = 0`` through one Lagrange
multiplier row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.linalg import splu

from . import operators as ops
from .geometry import ConformalMetric, scalar_curvature
from .operators import ScalarField

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass
class PotentialSolution:
    f: ScalarField
    c: tuple[float, ...]
    beta: tuple[float, ...]
    mean_residual: float
    grad_bound: float
    rbar: float
    multiplier: float
    projected_mass: float
    residual: float
    residual_abs: float


def mode_bc_matrix(atlas) -> sparse.csr_matrix:
    """Rows on the ``s_hi`` ring: zero-mode slope, nonzero modes pinned to zero.

    For ring nodes ``m = 0..N-1`` of each end, row ``m = 0`` is the
    theta-average of the one-sided derivative ``d_s f``; rows ``m >= 1`` are
    ``f_m - mean(f)`` so that all nonzero modes of the ring vanish.
    """
    key = "mode_bc"
    if key not in atlas._cache:
        rows, cols, vals = [], [], []
        for j, c in enumerate(atlas.cusps):
            nt, o, K, ds = c.n_theta, atlas.offsets[j], c.n_s - 1, c.ds
            ring = o + K * nt + np.arange(nt)
            for back, coef in ((0, 3.0), (1, -4.0), (2, 1.0)):
                rows.append(np.full(nt, ring[0]))
                cols.append(o + (K - back) * nt + np.arange(nt))
                vals.append(np.full(nt, coef / (2 * ds * nt)))
            for m in range(1, nt):
                rows.append(np.full(nt + 1, ring[m]))
                cols.append(np.concatenate([[ring[m]], ring]))
                vals.append(np.concatenate([[1.0], np.full(nt, -1.0 / nt)]))
        atlas._cache[key] = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(atlas.size, atlas.size),
        )
    return atlas._cache[key]


def mode_bc_rhs(atlas, slopes) -> np.ndarray:
    rhs = np.zeros(atlas.size)
    for j, c in enumerate(atlas.cusps):
        rhs[atlas.offsets[j] + (c.n_s - 1) * c.n_theta] = slopes[j]
    return rhs


def constraint_rows(atlas):
    """Static part of the composite system: overlap, hole and ring rows."""
    key = "constraint_rows"
    if key not in atlas._cache:
        interp = atlas.interp_mask.astype(float)
        hole = atlas.hole_mask.astype(float)
        P = atlas.interpolation
        M = sparse.diags(interp + hole) - sparse.diags(interp) @ P
        atlas._cache[key] = M.tocsr()
    return atlas._cache[key]


def end_data(metric: ConformalMetric, R: ScalarField, rbar: float):
    """Per end: limit factor ``U_j``, end curvature and slope ``c_j = -U_j (R_j - Rbar)``."""
    W = metric.total_factor()
    out = []
    for j in range(len(metric.atlas.cusps)):
        U = float(np.mean(metric.atlas.end_view(W, j)[-1]))
        Rj = ops.end_curvature(R, j)
        out.append((U, Rj, -U * (Rj - rbar)))
    return out


def solve_linear_potential(metric: ConformalMetric, q: np.ndarray, slopes):
    """Solve ``Lap_g f + m = q`` with ring slopes ``slopes`` and ``int f dA = 0``.

    ``q`` is given on stencil rows.  Returns ``(f, m)``; the multiplier ``m``
    is the constant shift that makes the discrete problem compatible.
    """
    atlas = metric.atlas
    N = atlas.size
    W = metric.total_factor()
    interior = atlas.interior_mask
    L0 = ops.chart_laplacian(atlas)
    A = sparse.diags(np.where(interior, 1.0 / W, 0.0)) @ L0
    A = A + constraint_rows(atlas) + mode_bc_matrix(atlas)
    ones = sparse.csr_matrix(interior.astype(float)[:, None])
    weights = ops.quadrature_weights(atlas) * W
    tail_const = 0.0
    for j, c in enumerate(atlas.cusps):
        U = float(np.mean(atlas.end_view(W, j)[-1]))
        tail = U * 2 * np.pi * np.exp(-c.s_hi)
        atlas.end_view(weights, j)[-1] += tail / c.n_theta
        tail_const += tail * slopes[j]
    row = sparse.csr_matrix(weights[None, :])
    K = sparse.bmat([[A, ones], [row, None]], format="csc")
    rhs = np.where(interior, q, 0.0) + mode_bc_rhs(atlas, slopes)
    rhs = np.append(rhs, -tail_const)
    try:
        lu = splu(K, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"potential system is singular: {exc}") from exc
    sol = lu.solve(rhs)
    # exp(2s) coefficients make the rows badly scaled; refine against round-off
    for _ in range(1):
        sol += lu.solve(rhs - K @ sol)
    if not np.all(np.isfinite(sol)):
        raise SolverError("potential solve produced non-finite values")
    f = ScalarField(atlas, sol[:N])
    f.values[atlas.hole_mask] = (atlas.hole_fill @ f.values)[atlas.hole_mask]
    return f, float(sol[N])


def integrate_with_slopes(f: ScalarField, metric: ConformalMetric, slopes) -> float:
    """``int f dA`` with linear tails ``f ~ f(s_hi) + c_j (s - s_hi)`` beyond the ends."""
    total = ops.integrate(f, metric)
    W = metric.total_factor()
    for j, c in enumerate(metric.atlas.cusps):
        U = float(np.mean(metric.atlas.end_view(W, j)[-1]))
        total += U * 2 * np.pi * np.exp(-c.s_hi) * slopes[j]
    return total


def solve_potential(metric: ConformalMetric, R: ScalarField | None = None,
                    quad_tol: float = 1e-3) -> PotentialSolution:
    """Potential function of ``metric``: ``Lap f = R - Rbar``, mean zero, bounded gradient.

    Parameters
    ----------
    quad_tol : float
        Relative size above which the compatibility shift is reported as a
        discretization inconsistency (warning only).
    """
    atlas = metric.atlas
    if R is None:
        R = scalar_curvature(metric)
    area = ops.integrate(ScalarField.constant(atlas, 1.0), metric)
    rbar = ops.integrate(R, metric) / area
    q = R.values - rbar
    mass = ops.integrate(ScalarField(atlas, q), metric)
    q = q - mass / area
    ends = end_data(metric, R, rbar)
    slopes = [c for _, _, c in ends]
    f, m = solve_linear_potential(metric, q, slopes)
    scale = max(float(np.max(np.abs(q[atlas.interior_mask]))), abs(rbar), 1e-300)
    if abs(m) > 10 * quad_tol * scale:
        log.warning("potential compatibility shift %.3e exceeds 10x quadrature tolerance", m)
    op = ops.assemble_laplacian(metric)
    lap = op.matrix @ f.values
    r = (lap - (q - m))[atlas.interior_mask]
    mag = (abs(op.matrix) @ np.abs(f.values) + np.abs(q) + abs(m))[atlas.interior_mask]
    # componentwise backward error: rows with exp(2s) coefficients lose
    # absolute digits when A f is evaluated, however exact the solve
    res = float(np.max(np.abs(r) / np.maximum(mag, 1e-300)))
    grad = ops.gradient_norm_sq(f, metric)
    betas = []
    for j, c in enumerate(atlas.cusps):
        betas.append(float(np.mean(f.end(j)[-1])) - slopes[j] * c.s_hi)
    return PotentialSolution(
        f=f,
        c=tuple(slopes),
        beta=tuple(betas),
        mean_residual=abs(integrate_with_slopes(f, metric, slopes)),
        grad_bound=float(np.sqrt(grad.sup())),
        rbar=rbar,
        multiplier=m,
        projected_mass=mass,
        residual=res,
        residual_abs=float(np.max(np.abs(r))),
    )


def slope_compatibility_residual(sol: PotentialSolution, metric: ConformalMetric) -> float:
    """Relative defect of the discrete divergence theorem for a potential.

    Compares ``int_{s <= s_hi} Lap f dA`` (quadrature of the discrete
    Laplacian, no tails) with the end flux ``sum_j 2 pi exp(-s_hi) c_j``,
    relative to ``int |Lap f| dA``.
    """
    atlas = metric.atlas
    W = metric.total_factor()
    st = ops.stencil_mask(atlas)
    lap = np.where(st, (ops.chart_laplacian(atlas) @ sol.f.values) / W, 0.0)
    lap = ops.exchange(ScalarField(atlas, lap)).values
    q = ops.quadrature_weights(atlas) * W
    lhs = float(np.sum(q * lap))
    flux = sum(2 * np.pi * np.exp(-c.s_hi) * cj for c, cj in zip(atlas.cusps, sol.c))
    scale = max(float(np.sum(q * np.abs(lap))), 1e-300)
    return abs(lhs - flux) / scale


def zero_mode_solve(s, q0, u_tot, beta: float = 0.0):
    """Integrate ``(d_s^2 - d_s) w = u_tot q0`` inward from ``s_hi``.

    The slope at ``s_hi`` is the bounded-gradient value ``c = -u_inf q0_inf``
    (limits taken at the last sample) and ``w(s_hi) = c s_hi + beta``.

    Returns
    -------
    w : ndarray
    c : float
        Asymptotic slope.

    Raises
    ------
    ValueError
        If ``q0`` does not settle toward its end value.
    """
    s = np.asarray(s, dtype=float)
    q0 = np.broadcast_to(np.asarray(q0, dtype=float), s.shape)
    u_tot = np.broadcast_to(np.asarray(u_tot, dtype=float), s.shape)
    d = q0[-1]
    dev = np.abs(q0 - d)
    half = s >= 0.5 * (s[0] + s[-1])
    scale = max(float(np.max(np.abs(q0))), 1e-300)
    if np.max(dev[half]) > 1e-12 * scale and np.max(dev[half]) >= np.max(dev[~half]):
        raise ValueError("q0 - d does not decay along the end")
    c = -u_tot[-1] * d
    g = np.exp(-s) * u_tot * q0
    # e^{-s} w'(s) = e^{-s_hi} c - int_s^{s_hi} e^{-t} u q0 dt
    G = cumulative_trapezoid(g, s, initial=0.0)
    inner = G[-1] - G
    p = np.exp(s) * (np.exp(-s[-1]) * c - inner)
    P = cumulative_trapezoid(p, s, initial=0.0)
    w = c * s[-1] + beta - (P[-1] - P)
    return w, c


def mode_amplitudes(f: ScalarField, j: int) -> np.ndarray:
    """Cosine/sine amplitude of each theta-mode ``k >= 1`` on every ring of end ``j``."""
    e = f.end(j)
    nt = e.shape[1]
    fh = np.fft.rfft(e, axis=1) / nt
    amp = 2 * np.abs(fh[:, 1:])
    amp[:, -1] *= 0.5  # Nyquist mode has a single real coefficient
    return amp


def nonzero_mode_decay_check(end: int, f: ScalarField) -> float:
    """``sup_s exp(s) max_{k != 0} |f_k(s)|``; finite when the non-circular part decays like 1/tau."""
    c = f.atlas.cusps[end]
    amp = mode_amplitudes(f, end)
    return float(np.max(np.exp(c.s) * np.max(amp, axis=1)))


def hamilton_h(f: ScalarField, metric: ConformalMetric) -> ScalarField:
    """``h = Lap f + |grad f|^2``."""
    lap = ops.laplacian(f, metric)
    grad = ops.gradient_norm_sq(f, metric)
    return ScalarField(f.atlas, lap.values + grad.values)


def traceless_hessian_normsq(f: ScalarField, metric: ConformalMetric) -> ScalarField:
    """``|Z|^2`` with ``Z = Hess f - (1/2) Lap f g``.

    Each chart is treated in a conformally flat gauge ``g = exp(2 psi) delta``
    (core: flat coordinates; cusp: ``tau = e^s`` so ``psi = log(W)/2 - s``),
    where ``Hess f_ij = f_ij - psi_i f_j - psi_j f_i + delta_ij <dpsi, df>``.
    The trace-free part only needs ``H = f_ij - psi_i f_j - psi_j f_i`` and
    ``|Z|^2 = 2 exp(-4 psi) (((H11 - H22)/2)^2 + H12^2)``.
    """
    atlas = f.atlas
    W = metric.total_factor()
    h = atlas.core.h
    out = ScalarField(atlas)

    def cdiff(a, axis):
        return (np.roll(a, -1, axis) - np.roll(a, 1, axis)) / (2 * h)

    fc = f.core
    Wc = atlas.core_view(W)
    psi = 0.5 * np.log(Wc)
    fx, fy = cdiff(fc, 0), cdiff(fc, 1)
    fxx = (np.roll(fc, -1, 0) - 2 * fc + np.roll(fc, 1, 0)) / h**2
    fyy = (np.roll(fc, -1, 1) - 2 * fc + np.roll(fc, 1, 1)) / h**2
    fxy = cdiff(fx, 1)
    px, py = cdiff(psi, 0), cdiff(psi, 1)
    h11 = fxx - 2 * px * fx
    h22 = fyy - 2 * py * fy
    h12 = fxy - px * fy - py * fx
    out.core[:] = 2 * (0.25 * (h11 - h22) ** 2 + h12**2) / Wc**2

    for j, c in enumerate(atlas.cusps):
        e = f.end(j)
        We = atlas.end_view(W, j)
        fs = ops.s_derivative(e, c.ds)
        fss = ops.s_derivative(fs, c.ds)
        fss[1:-1] = (e[2:] - 2 * e[1:-1] + e[:-2]) / c.ds**2
        ft = ops.theta_derivative(e)
        ftt = ops.theta_derivative(e, 2)
        fst = ops.theta_derivative(fs)
        lw = np.log(We)
        ps = 0.5 * ops.s_derivative(lw, c.ds) - 1.0
        pt = 0.5 * ops.theta_derivative(lw)
        es = np.exp(c.s)[:, None]
        a_tt = fss - fs - 2 * ps * fs
        a_thth = es**2 * (ftt - 2 * pt * ft)
        a_tth = es * (fst - ps * ft - pt * fs)
        out.end(j)[:] = 2 * (0.25 * (a_tt - a_thth) ** 2 + a_tth**2) / We**2
    out.values[atlas.hole_mask] = 0.0
    return ops.synchronize(out)
