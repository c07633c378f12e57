"""Surface model and chart layout.

The surface is a flat unit torus with ``ell`` punctures.  It is covered by one
doubly periodic core grid and one cylinder chart per puncture.  On a cylinder
chart the coordinates are ``(s, theta)`` with ``r = exp(-exp(s))`` the
Euclidean distance to the puncture, so that the model cusp metric
``(r log(1/r))^-2 |dx|^2`` reads ``ds^2 + exp(-2s) dtheta^2``.

All unknowns of all charts live in one flat vector.  The core block comes
first (``n*n`` values, index ``i*n + j`` for node ``(i/n, j/n)``), followed by
one ``n_s*n_theta`` block per end (index ``k*n_theta + m``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse


class GeometryError(ValueError):
    """Invalid surface or chart configuration."""


@dataclass(frozen=True)
class SurfaceSpec:
    """Punctured flat torus with one cusp end per puncture.

    Parameters
    ----------
    punctures : sequence of (x, y)
        Puncture positions in the unit periodic square.
    sigma : sequence of float
        Per-end targets: ``-R -> sigma_j`` on end ``j`` for the initial metric.
    mu : float
        Decay exponent of the end perturbations, ``mu > 1``.
    """

    punctures: tuple[tuple[float, float], ...]
    sigma: tuple[float, ...]
    mu: float = 2.0

    def __post_init__(self):
        pts = tuple((float(x) % 1.0, float(y) % 1.0) for x, y in self.punctures)
        object.__setattr__(self, "punctures", pts)
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if len(pts) < 1:
            raise GeometryError("at least one puncture is required (chi < 0)")
        if len(self.sigma) != len(pts):
            raise GeometryError(
                f"need one sigma per puncture, got {len(self.sigma)} for {len(pts)}"
            )
        if any(not s > 0 for s in self.sigma):
            raise GeometryError("sigma_j must be positive")
        if not self.mu > 1:
            raise GeometryError(f"decay exponent mu must exceed 1, got {self.mu}")

    @property
    def n_ends(self) -> int:
        return len(self.punctures)

    @property
    def euler(self) -> int:
        return -len(self.punctures)

    def min_separation(self) -> float:
        """Smallest periodic distance between punctures (or to a self-image)."""
        best = 1.0
        for a in range(self.n_ends):
            for b in range(a + 1, self.n_ends):
                d = periodic_displacement(
                    np.array(self.punctures[a]), np.array(self.punctures[b])
                )
                best = min(best, float(np.hypot(*d)))
        return best


def periodic_displacement(x, p):
    """Minimum-image displacement ``x - p`` on the unit torus."""
    d = np.asarray(x, dtype=float) - np.asarray(p, dtype=float)
    return (d + 0.5) % 1.0 - 0.5


def radius_of_s(s):
    return np.exp(-np.exp(s))


def s_of_radius(r):
    return np.log(np.log(1.0 / r))


@dataclass(frozen=True)
class CuspChart:
    """Cylinder chart ``[s_lo, s_hi] x S^1`` around one puncture."""

    end_id: int
    center: tuple[float, float]
    s_lo: float
    s_hi: float
    n_s: int
    n_theta: int

    def __post_init__(self):
        if not 0 <= self.s_lo < self.s_hi:
            raise GeometryError("cusp chart needs 0 <= s_lo < s_hi")
        if self.n_s < 8:
            raise GeometryError("cusp chart needs n_s >= 8")
        if self.n_theta < 4 or self.n_theta & (self.n_theta - 1):
            raise GeometryError("n_theta must be a power of two >= 4")

    @cached_property
    def s(self) -> np.ndarray:
        return np.linspace(self.s_lo, self.s_hi, self.n_s)

    @property
    def ds(self) -> float:
        return (self.s_hi - self.s_lo) / (self.n_s - 1)

    @cached_property
    def theta(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_theta) / self.n_theta

    @property
    def size(self) -> int:
        return self.n_s * self.n_theta


def chart_map(chart: CuspChart, s, theta):
    """Map cusp coordinates to a position in the core plane.

    Returns the unwrapped position ``center + r (cos theta, sin theta)`` with
    ``r = exp(-exp(s))``.  Reduce modulo 1 for the periodic square.
    """
    s = np.asarray(s, dtype=float)
    tol = 1e-12 * max(1.0, chart.s_hi)
    if np.any(s < chart.s_lo - tol) or np.any(s > chart.s_hi + tol):
        raise GeometryError(
            f"s outside chart bounds [{chart.s_lo}, {chart.s_hi}] for end {chart.end_id}"
        )
    r = radius_of_s(s)
    x = chart.center[0] + r * np.cos(theta)
    y = chart.center[1] + r * np.sin(theta)
    return np.stack(np.broadcast_arrays(x, y), axis=-1)


@dataclass(frozen=True)
class CoreChart:
    """Periodic ``n x n`` grid with one hole per puncture."""

    n: int
    holes: tuple[tuple[tuple[float, float], float], ...]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.n) / self.n


@dataclass(frozen=True)
class Discretization:
    """Resolution and overlap parameters shared by all charts.

    ``s_mid`` is the cusp coordinate of the hole cut in the core grid; the
    overlap band is ``[s_lo, s_mid]``.  The background blends from flat to
    cusp over ``r in [r(s_lo), blend_outer]`` (core side of the cusp charts).
    """

    n_core: int = 128
    n_s: int = 256
    n_theta: int = 16
    s_lo: float = 0.1
    s_hi: float = 8.0
    s_mid: float | None = None
    blend_outer: float | None = None

    def resolved_s_mid(self) -> float:
        return self.s_lo + 0.7 if self.s_mid is None else float(self.s_mid)


@dataclass(frozen=True)
class Atlas:
    """Core grid plus cusp charts, with the index layout of the flat vector."""

    spec: SurfaceSpec
    disc: Discretization
    core: CoreChart
    cusps: tuple[CuspChart, ...]
    s_mid: float
    blend_inner: float
    blend_outer: float
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    # ------------------------------------------------------------------ layout
    @property
    def n(self) -> int:
        return self.core.n

    @property
    def n_core_nodes(self) -> int:
        return self.core.n ** 2

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        offs = [self.n_core_nodes]
        for c in self.cusps[:-1]:
            offs.append(offs[-1] + c.size)
        return tuple(offs)

    @property
    def size(self) -> int:
        return self.n_core_nodes + sum(c.size for c in self.cusps)

    def core_view(self, vec: np.ndarray) -> np.ndarray:
        return vec[: self.n_core_nodes].reshape(self.n, self.n)

    def end_view(self, vec: np.ndarray, j: int) -> np.ndarray:
        c = self.cusps[j]
        o = self.offsets[j]
        return vec[o : o + c.size].reshape(c.n_s, c.n_theta)

    def end_slice(self, j: int) -> slice:
        return slice(self.offsets[j], self.offsets[j] + self.cusps[j].size)

    # --------------------------------------------------------- core geometry
    @cached_property
    def core_polar(self):
        """Per puncture: (r, theta) of every core node, minimum image."""
        xs = self.core.x
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        out = []
        for p in self.spec.punctures:
            dx = (X - p[0] + 0.5) % 1.0 - 0.5
            dy = (Y - p[1] + 0.5) % 1.0 - 0.5
            out.append((np.hypot(dx, dy), np.arctan2(dy, dx)))
        return out

    @cached_property
    def core_nearest(self):
        """Index of the nearest puncture and distance to it, per core node."""
        rs = np.stack([r for r, _ in self.core_polar])
        return np.argmin(rs, axis=0), np.min(rs, axis=0)

    @cached_property
    def hole_radius(self) -> float:
        return float(radius_of_s(self.s_mid))

    @cached_property
    def core_hole(self) -> np.ndarray:
        return self.core_nearest[1] < self.hole_radius

    @cached_property
    def core_fringe(self) -> np.ndarray:
        hole = self.core_hole
        nb = (
            np.roll(hole, 1, 0)
            | np.roll(hole, -1, 0)
            | np.roll(hole, 1, 1)
            | np.roll(hole, -1, 1)
        )
        return nb & ~hole

    @cached_property
    def core_interior(self) -> np.ndarray:
        return ~(self.core_hole | self.core_fringe)

    @cached_property
    def core_s(self) -> np.ndarray:
        """Cusp coordinate ``log log(1/r)`` of core nodes w.r.t. the nearest puncture."""
        r = np.maximum(self.core_nearest[1], 1e-300)
        return np.log(np.log(1.0 / r))

    # ------------------------------------------------------------- node masks
    def _mask(self, core_mask, end_rows):
        m = np.zeros(self.size, dtype=bool)
        m[: self.n_core_nodes] = core_mask.ravel()
        for j, c in enumerate(self.cusps):
            e = np.zeros((c.n_s, c.n_theta), dtype=bool)
            e[end_rows(c)] = True
            m[self.end_slice(j)] = e.ravel()
        return m

    @cached_property
    def interior_mask(self) -> np.ndarray:
        """Nodes carrying a differential stencil (excludes the s_hi ring)."""
        return self._mask(self.core_interior, lambda c: slice(1, c.n_s - 1))

    @cached_property
    def interp_mask(self) -> np.ndarray:
        """Overlap nodes whose value is interpolated from the other chart."""
        return self._mask(self.core_fringe, lambda c: 0)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Outermost ring ``s = s_hi`` of every cusp chart."""
        return self._mask(np.zeros((self.n, self.n), bool), lambda c: c.n_s - 1)

    @cached_property
    def hole_mask(self) -> np.ndarray:
        return self._mask(self.core_hole, lambda c: slice(0, 0))

    @cached_property
    def active_mask(self) -> np.ndarray:
        return ~self.hole_mask

    @cached_property
    def partition_weights(self) -> np.ndarray:
        """Partition of unity across overlaps (zero on holes and donor rows)."""
        lo, hi = self.pou_band
        w = np.zeros(self.size)
        chi_core = 1.0 - smooth_step((self.core_s - lo) / (hi - lo))
        chi_core[self.core_hole | self.core_fringe] = 0.0
        w[: self.n_core_nodes] = chi_core.ravel()
        for j, c in enumerate(self.cusps):
            chi = smooth_step((c.s - lo) / (hi - lo))
            self.end_view(w, j)[:] = chi[:, None]
        return w

    @property
    def pou_band(self) -> tuple[float, float]:
        a, b = self.disc.s_lo, self.s_mid
        return a + 0.25 * (b - a), a + 0.7 * (b - a)

    # ---------------------------------------------------------- interpolation
    @cached_property
    def interpolation(self) -> sparse.csr_matrix:
        """Rows of overlap nodes expressed through donor nodes of the other chart.

        Core fringe nodes read the cusp chart (trigonometric in theta, cubic
        Lagrange in s); the first ring of every cusp chart reads the core grid
        (bicubic Lagrange).  Rows of all other nodes are empty.
        """
        rows, cols, vals = [], [], []
        fringe = np.flatnonzero(self.core_fringe.ravel())
        self._core_from_cusp(fringe, rows, cols, vals, clamp=False)
        for j, c in enumerate(self.cusps):
            pos = chart_map(c, np.full(c.n_theta, c.s_lo), c.theta)
            r, cc, v = bicubic_weights(pos, self.n)
            target = self.offsets[j] + np.arange(c.n_theta)
            rows.append(target[r])
            cols.append(cc)
            vals.append(v)
            donors_ok = self.core_interior.ravel()[cc]
            if not np.all(donors_ok):
                raise GeometryError(
                    f"cusp chart {j}: core donor stencil touches hole/fringe nodes; "
                    "increase the overlap (s_mid - s_lo) or the core resolution"
                )
        return self._assemble(rows, cols, vals)

    @cached_property
    def hole_fill(self) -> sparse.csr_matrix:
        """Interpolation rows for hole nodes (display and synchronization only)."""
        rows, cols, vals = [], [], []
        holes = np.flatnonzero(self.core_hole.ravel())
        self._core_from_cusp(holes, rows, cols, vals, clamp=True)
        return self._assemble(rows, cols, vals)

    def _assemble(self, rows, cols, vals):
        if rows:
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.size, self.size))

    def _core_from_cusp(self, nodes, rows, cols, vals, clamp):
        if nodes.size == 0:
            return
        owner = self.core_nearest[0].ravel()[nodes]
        for j, c in enumerate(self.cusps):
            sel = nodes[owner == j]
            if sel.size == 0:
                continue
            r, th = self.core_polar[j]
            s = self.core_s.ravel()[sel]
            if clamp:
                s = np.clip(s, c.s_lo, c.s_hi)
            elif np.any(s < c.s_lo + 2 * c.ds) or np.any(s > c.s_hi):
                raise GeometryError("core fringe node outside its cusp chart")
            local = cusp_point_weights(c, s, th.ravel()[sel])
            rr, cc, v = local
            rows.append(sel[rr])
            cols.append(self.offsets[j] + cc)
            vals.append(v)

    def interpolate_to_positions(self, vec, positions):
        """Evaluate a core-grid field at arbitrary positions (bicubic)."""
        r, c, v = bicubic_weights(np.asarray(positions, float), self.n)
        out = np.zeros(len(positions))
        np.add.at(out, r, v * vec[: self.n_core_nodes][c])
        return out


def smooth_step_derivs(x):
    """C-infinity step ``S(x) = 1 / (1 + exp(1/x - 1/(1-x)))`` with S' and S''.

    ``S = 0`` for ``x <= 0`` and ``S = 1`` for ``x >= 1``; every derivative
    vanishes at both ends.
    """
    x = np.asarray(x, dtype=float)
    inner = (x > 0) & (x < 1)
    xi = np.where(inner, x, 0.5)
    L = 1.0 / xi - 1.0 / (1.0 - xi)
    th = np.tanh(0.5 * L)
    S = 0.5 * (1.0 - th)
    bell = 0.25 * (1.0 - th**2)  # q / (1 + q)^2 with q = exp(L)
    p = 1.0 / xi**2 + 1.0 / (1.0 - xi) ** 2
    dp = -2.0 / xi**3 + 2.0 / (1.0 - xi) ** 3
    d1 = bell * p
    d2 = bell * (dp - p**2) + 2 * bell * (1.0 - S) * p**2
    S = np.where(inner, S, np.where(x >= 1, 1.0, 0.0))
    d1 = np.where(inner, d1, 0.0)
    d2 = np.where(inner, d2, 0.0)
    return S, d1, d2


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1."""
    return smooth_step_derivs(x)[0]


def lagrange_cubic(t):
    """Cubic Lagrange weights on nodes -1, 0, 1, 2 at offset ``t`` in [0, 1)."""
    t = np.asarray(t, dtype=float)
    return np.stack(
        [
            -t * (t - 1) * (t - 2) / 6,
            (t + 1) * (t - 1) * (t - 2) / 2,
            -(t + 1) * t * (t - 2) / 2,
            (t + 1) * t * (t - 1) / 6,
        ],
        axis=-1,
    )


def bicubic_weights(positions, n):
    """Sparse triplets interpolating a periodic ``n x n`` grid at positions.

    Returns (row, col, value) with ``row`` indexing ``positions``.
    """
    g = np.asarray(positions, dtype=float) % 1.0 * n
    base = np.floor(g).astype(int)
    frac = g - base
    wx = lagrange_cubic(frac[:, 0])
    wy = lagrange_cubic(frac[:, 1])
    npts = len(g)
    rows = np.repeat(np.arange(npts), 16)
    ii = (base[:, 0, None] + np.arange(-1, 3)[None, :]) % n
    jj = (base[:, 1, None] + np.arange(-1, 3)[None, :]) % n
    cols = (ii[:, :, None] * n + jj[:, None, :]).reshape(npts, 16).ravel()
    vals = (wx[:, :, None] * wy[:, None, :]).reshape(npts, 16).ravel()
    return rows, cols, vals


def trig_cardinal(theta, n_theta):
    """Periodic sinc weights ``S_N(theta - theta_m)`` for even ``N``."""
    x = np.asarray(theta, dtype=float)[:, None] - 2 * np.pi * np.arange(n_theta) / n_theta
    half = 0.5 * x
    tan_half = np.tan(half)
    small = np.abs(np.sin(half)) < 1e-14
    safe = np.where(small, 1.0, tan_half)
    w = np.sin(n_theta * half) / (n_theta * safe)
    return np.where(small, 1.0, w)


def cusp_point_weights(chart: CuspChart, s, theta):
    """Triplets for evaluating cusp-chart data at points ``(s, theta)``."""
    s = np.asarray(s, dtype=float)
    g = (s - chart.s_lo) / chart.ds
    base = np.clip(np.floor(g).astype(int), 1, chart.n_s - 3)
    ws = lagrange_cubic(g - base)
    wt = trig_cardinal(theta, chart.n_theta)
    npts = len(s)
    nt = chart.n_theta
    kk = base[:, None] + np.arange(-1, 3)[None, :]
    cols = (kk[:, :, None] * nt + np.arange(nt)[None, None, :]).reshape(npts, -1)
    vals = (ws[:, :, None] * wt[:, None, :]).reshape(npts, -1)
    rows = np.repeat(np.arange(npts), cols.shape[1])
    return rows, cols.ravel(), vals.ravel()


MIN_BLEND_LOG_WIDTH = 0.2
MAX_S_HI = 12.0


def blend_annulus(spec: SurfaceSpec, disc: Discretization) -> tuple[float, float]:
    """Radii ``(r(s_lo), blend_outer)`` of the flat-to-cusp blend annulus.

    Raises
    ------
    GeometryError
        If cusp footprints overlap or the annulus is too thin in ``log r`` to
        resolve the blend curvature.
    """
    r_lo = float(radius_of_s(disc.s_lo))
    half_sep = 0.5 * spec.min_separation()
    if not r_lo < half_sep:
        raise GeometryError(
            f"cusp footprints overlap: r(s_lo)={r_lo:.4f} >= half separation {half_sep:.4f}"
        )
    blend_outer = disc.blend_outer
    if blend_outer is None:
        blend_outer = min(0.95 * half_sep, r_lo + 0.15)
    if not r_lo < blend_outer <= half_sep:
        raise GeometryError(
            f"blend annulus [{r_lo:.4f}, {blend_outer:.4f}] must lie inside "
            f"half the puncture separation {half_sep:.4f}"
        )
    if np.log(blend_outer / r_lo) < MIN_BLEND_LOG_WIDTH:
        raise GeometryError(
            f"blend annulus [{r_lo:.4f}, {blend_outer:.4f}] is thinner than "
            f"{MIN_BLEND_LOG_WIDTH} in log r; raise s_lo"
        )
    return r_lo, float(blend_outer)


def check_layout(spec: SurfaceSpec, disc: Discretization):
    """Validate chart placement without allocating grids.

    Returns ``(s_mid, r(s_lo), blend_outer, hole_radius)``.
    """
    s_mid = disc.resolved_s_mid()
    if not disc.s_lo < s_mid < disc.s_hi:
        raise GeometryError("need s_lo < s_mid < s_hi")
    if disc.s_hi > MAX_S_HI:
        raise GeometryError(
            f"s_hi = {disc.s_hi} exceeds {MAX_S_HI}: exp(2 s) angular weights amplify "
            "round-off beyond usable accuracy"
        )
    r_lo, blend_outer = blend_annulus(spec, disc)
    h = 1.0 / disc.n_core
    r_hole = float(radius_of_s(s_mid))
    if (r_lo - r_hole) / h < 3:
        raise GeometryError("overlap annulus narrower than 3 core cells")
    if r_hole / h < 2:
        raise GeometryError("hole radius below two core cells; lower s_mid")
    return s_mid, r_lo, blend_outer, r_hole


def build_atlas(spec: SurfaceSpec, disc: Discretization | None = None) -> Atlas:
    """Lay out the core grid and one cusp chart per puncture.

    Raises
    ------
    GeometryError
        If cusp footprints overlap, the overlap band is thinner than three
        core cells, or the blend annulus does not fit.
    """
    disc = disc or Discretization()
    s_mid, r_lo, blend_outer, r_hole = check_layout(spec, disc)
    cusps = tuple(
        CuspChart(j, p, disc.s_lo, disc.s_hi, disc.n_s, disc.n_theta)
        for j, p in enumerate(spec.punctures)
    )
    core = CoreChart(disc.n_core, tuple((p, r_hole) for p in spec.punctures))
    atlas = Atlas(spec, disc, core, cusps, s_mid, r_lo, float(blend_outer))
    atlas.interpolation  # validates donor stencils eagerly
    return atlas


def overlap_width_cells(atlas: Atlas) -> float:
    return (atlas.blend_inner - atlas.hole_radius) / atlas.core.h
