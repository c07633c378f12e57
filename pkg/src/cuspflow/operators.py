"""Discrete operators on the composite atlas.

Every operator acts on the flat node vector described in :mod:`cuspflow.atlas`.
Differential stencils live on *interior* nodes (core nodes away from holes,
cusp rings ``1..n_s-2``) and on the outermost cusp ring (one-sided in ``s``).
Overlap nodes are filled by interpolation from the other chart.

On a chart where the metric is ``W`` times the chart metric, the
Laplace-Beltrami operator is ``L0 / W`` with ``L0`` the chart Laplacian:
the periodic 5-point Laplacian on the core, and
``d_s^2 - d_s + exp(2s) d_theta^2`` on a cusp chart.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .atlas import Atlas, CuspChart, smooth_step


class ScalarField:
    """Nodal values on every chart of an atlas.

    ``generation`` counts synchronizations; it is bumped by :func:`synchronize`
    and :func:`exchange` so callers can tell stale overlap data apart.
    """

    __slots__ = ("atlas", "values", "generation")

    def __init__(self, atlas: Atlas, values=None, generation: int = 0):
        self.atlas = atlas
        if values is None:
            values = np.zeros(atlas.size)
        values = np.asarray(values, dtype=float)
        if values.shape != (atlas.size,):
            raise ValueError(f"expected {atlas.size} values, got {values.shape}")
        self.values = values
        self.generation = generation

    @classmethod
    def constant(cls, atlas: Atlas, c: float) -> "ScalarField":
        return cls(atlas, np.full(atlas.size, float(c)))

    @property
    def core(self) -> np.ndarray:
        return self.atlas.core_view(self.values)

    def end(self, j: int) -> np.ndarray:
        return self.atlas.end_view(self.values, j)

    def copy(self) -> "ScalarField":
        return ScalarField(self.atlas, self.values.copy(), self.generation)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.atlas, values, self.generation)

    def sup(self, mask=None) -> float:
        m = self.atlas.active_mask if mask is None else mask
        return float(np.max(np.abs(self.values[m])))

    def __repr__(self):
        return f"ScalarField(size={self.values.size}, generation={self.generation})"


# ---------------------------------------------------------------- stencils
def fourier_d2(n: int) -> np.ndarray:
    """Fourier collocation second-derivative matrix on ``n`` equispaced points."""
    return _fourier_d2(n).copy()


@lru_cache(maxsize=None)
def _fourier_d2(n: int) -> np.ndarray:
    h = 2 * np.pi / n
    k = np.arange(n)
    diff = (k[:, None] - k[None, :]) % n
    with np.errstate(divide="ignore"):
        off = -0.5 * (-1.0) ** diff / np.sin(0.5 * h * diff) ** 2
    d2 = np.where(diff == 0, -np.pi**2 / (3 * h**2) - 1.0 / 6.0, off)
    return d2


def theta_derivative(a: np.ndarray, order: int = 1) -> np.ndarray:
    """Spectral theta-derivative along the last axis (Nyquist mode dropped for odd order)."""
    n = a.shape[-1]
    k = np.fft.rfftfreq(n, 1.0 / n)
    ah = np.fft.rfft(a, axis=-1)
    mult = (1j * k) ** order
    if order % 2:
        mult[-1] = 0.0
    return np.fft.irfft(ah * mult, n=n, axis=-1)


def s_derivative(a: np.ndarray, ds: float) -> np.ndarray:
    """Second-order first derivative along axis 0 (one-sided at both ends)."""
    return np.gradient(a, ds, axis=0, edge_order=2)


def _core_stencil(atlas: Atlas):
    n = atlas.n
    h2 = atlas.core.h ** 2
    idx = np.arange(n * n).reshape(n, n)
    rows = np.flatnonzero(atlas.core_interior.ravel())
    i, j = np.divmod(rows, n)
    nb = [idx[(i + 1) % n, j], idx[(i - 1) % n, j], idx[i, (j + 1) % n], idx[i, (j - 1) % n]]
    r = np.concatenate([rows] * 5)
    c = np.concatenate([rows] + nb)
    v = np.concatenate([np.full(rows.size, -4.0 / h2)] + [np.full(rows.size, 1.0 / h2)] * 4)
    return r, c, v


def _cusp_stencil(chart: CuspChart, offset: int):
    ns, nt, ds = chart.n_s, chart.n_theta, chart.ds
    s = chart.s
    d2 = _fourier_d2(nt)
    rows, cols, vals = [], [], []

    def add(k_row, k_col, coef):
        m = np.arange(nt)
        rows.append(offset + k_row * nt + m)
        cols.append(offset + k_col * nt + m)
        vals.append(np.full(nt, coef))

    for k in range(1, ns - 1):
        add(k, k - 1, 1 / ds**2 + 1 / (2 * ds))
        add(k, k, -2 / ds**2)
        add(k, k + 1, 1 / ds**2 - 1 / (2 * ds))
    k = ns - 1
    # one-sided second order: f'' ~ (2f_K - 5f_K-1 + 4f_K-2 - f_K-3)/ds^2,
    # f' ~ (3f_K - 4f_K-1 + f_K-2)/(2ds)
    for back, c2, c1 in ((0, 2.0, 3.0), (1, -5.0, -4.0), (2, 4.0, 1.0), (3, -1.0, 0.0)):
        add(k, k - back, c2 / ds**2 - c1 / (2 * ds))
    # theta part: exp(2s) * D2 on each ring 1..ns-1
    ks = np.arange(1, ns)
    e2s = np.exp(2 * s[ks])
    m_r, m_c = np.meshgrid(np.arange(nt), np.arange(nt), indexing="ij")
    r = offset + (ks[:, None, None] * nt + m_r[None]).ravel()
    c = offset + (ks[:, None, None] * nt + m_c[None]).ravel()
    v = (e2s[:, None, None] * d2[None]).ravel()
    rows.append(r)
    cols.append(c)
    vals.append(v)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def chart_laplacian(atlas: Atlas) -> sparse.csr_matrix:
    """Unscaled chart Laplacian ``L0`` on stencil rows; other rows empty."""
    key = "chart_laplacian"
    if key not in atlas._cache:
        parts = [_core_stencil(atlas)]
        for j, c in enumerate(atlas.cusps):
            parts.append(_cusp_stencil(c, atlas.offsets[j]))
        r = np.concatenate([p[0] for p in parts])
        c = np.concatenate([p[1] for p in parts])
        v = np.concatenate([p[2] for p in parts])
        m = sparse.csr_matrix((v, (r, c)), shape=(atlas.size, atlas.size))
        m.sum_duplicates()
        atlas._cache[key] = m
    return atlas._cache[key]


def stencil_mask(atlas: Atlas) -> np.ndarray:
    """Nodes where ``chart_laplacian`` has a row."""
    return atlas.interior_mask | atlas.boundary_mask


def cell_measure(atlas: Atlas) -> np.ndarray:
    """Chart-coordinate quadrature measure per node (before partition of unity).

    Core: ``h^2``.  Cusp: ``exp(-s) ds dtheta`` with trapezoid end weights in s.
    """
    key = "cell_measure"
    if key not in atlas._cache:
        w = np.full(atlas.size, atlas.core.h ** 2)
        for j, c in enumerate(atlas.cusps):
            ws = np.full(c.n_s, c.ds)
            ws[0] *= 0.5
            ws[-1] *= 0.5
            atlas.end_view(w, j)[:] = (np.exp(-c.s) * ws)[:, None] * (2 * np.pi / c.n_theta)
        atlas._cache[key] = w
    return atlas._cache[key]


def quadrature_weights(atlas: Atlas) -> np.ndarray:
    return cell_measure(atlas) * atlas.partition_weights


# ---------------------------------------------------------------- exchange
def exchange(f: ScalarField, fill_holes: bool = True) -> ScalarField:
    """Refresh interpolated overlap nodes (and optionally hole nodes) in place."""
    atlas = f.atlas
    m = atlas.interp_mask
    f.values[m] = (atlas.interpolation @ f.values)[m]
    if fill_holes:
        h = atlas.hole_mask
        f.values[h] = (atlas.hole_fill @ f.values)[h]
    f.generation += 1
    return f


SYNC_BAND = (0.15, 0.85)


def _priority_maps(atlas: Atlas):
    """Cross-chart interpolation maps and blend weights for :func:`synchronize`.

    Returns ``(to_core, to_cusp, weight)``: ``weight`` is the share taken
    from the other chart, a C-infinity step in s across the inner part of the
    overlap band (0 at the core side, 1 at the cusp side for core nodes, and
    the complement for cusp nodes).
    """
    key = "priority_maps"
    if key not in atlas._cache:
        from .atlas import bicubic_weights, chart_map, cusp_point_weights

        lo, hi = atlas.disc.s_lo, atlas.s_mid
        a = lo + SYNC_BAND[0] * (hi - lo)
        b = lo + SYNC_BAND[1] * (hi - lo)
        weight = np.zeros(atlas.size)
        core_s = atlas.core_s.ravel()
        owner = atlas.core_nearest[0].ravel()
        rows, cols, vals = [], [], []
        core_take = np.flatnonzero((core_s > a) & ~atlas.core_hole.ravel())
        for j, c in enumerate(atlas.cusps):
            sel = core_take[owner[core_take] == j]
            if sel.size == 0:
                continue
            th = atlas.core_polar[j][1].ravel()[sel]
            r, cc, v = cusp_point_weights(c, np.maximum(core_s[sel], c.s_lo), th)
            rows.append(sel[r])
            cols.append(atlas.offsets[j] + cc)
            vals.append(v)
        to_core = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(atlas.size, atlas.size),
        )
        weight[core_take] = smooth_step((core_s[core_take] - a) / (b - a))
        rows, cols, vals = [], [], []
        for j, c in enumerate(atlas.cusps):
            ks = np.flatnonzero(c.s < b)
            S, T = np.meshgrid(c.s[ks], c.theta, indexing="ij")
            pos = chart_map(c, S.ravel(), T.ravel())
            r, cc, v = bicubic_weights(pos, atlas.n)
            target = atlas.offsets[j] + (ks[:, None] * c.n_theta + np.arange(c.n_theta)).ravel()
            rows.append(target[r])
            cols.append(cc)
            vals.append(v)
            weight[target] = 1.0 - smooth_step((S.ravel() - a) / (b - a))
        to_cusp = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(atlas.size, atlas.size),
        )
        atlas._cache[key] = (to_core, to_cusp, weight)
    return atlas._cache[key]


def synchronize(f: ScalarField) -> ScalarField:
    """Make both chart representations agree across each overlap annulus.

    Inside the band both charts hold a blend ``(1 - w) own + w other`` with a
    smooth weight ``w`` in s, so the field stays smooth on each chart: the
    cusp chart is authoritative towards the hole, the core towards the outer
    edge.  Core nodes read the cusp chart (trigonometric in theta, cubic in
    s); cusp nodes read the core grid (bicubic).  Returns a new field.
    """
    atlas = f.atlas
    to_core, to_cusp, w = _priority_maps(atlas)
    if not np.all(np.isfinite(f.values[atlas.active_mask])):
        raise FloatingPointError("non-finite values in field")
    v0 = f.values
    other = np.zeros_like(v0)
    n_core = atlas.n_core_nodes
    other[:n_core] = (to_core @ v0)[:n_core]
    other[n_core:] = (to_cusp @ v0)[n_core:]
    v = (1.0 - w) * v0 + w * other
    out = ScalarField(atlas, v, f.generation + 1)
    h = atlas.hole_mask
    out.values[h] = (atlas.hole_fill @ out.values)[h]
    return out


# ---------------------------------------------------------------- operators
@dataclass
class LinearOperator:
    """Composite sparse operator over all nodes.

    ``matrix`` holds the scaled Laplacian on stencil rows, ``I - P`` on
    interpolated overlap rows (``P`` the interpolation weights) and identity
    rows on hole nodes, so ``matrix @ f`` vanishes on overlap rows exactly
    when ``f`` is exchange-consistent.
    """

    atlas: Atlas
    matrix: sparse.csr_matrix
    stencil_rows: np.ndarray
    interp_rows: np.ndarray
    hole_rows: np.ndarray

    def apply(self, f: ScalarField) -> ScalarField:
        """Laplacian values on stencil rows, interpolated elsewhere."""
        out = ScalarField(self.atlas, np.where(self.stencil_rows, self.matrix @ f.values, 0.0))
        return exchange(out)

    @property
    def shape(self):
        return self.matrix.shape


def _diag(v):
    return sparse.diags(v, 0, format="csr")


def total_factor(metric) -> np.ndarray:
    """Total conformal factor relative to each chart metric (1 on holes)."""
    return metric.total_factor()


def assemble_laplacian(metric) -> LinearOperator:
    """Discrete Laplace-Beltrami operator of a conformal metric.

    Raises
    ------
    ValueError
        If the conformal factor is not positive on active nodes.
    """
    atlas = metric.atlas
    W = total_factor(metric)
    if np.any(~(W[atlas.active_mask] > 0)):
        raise ValueError("conformal factor must be positive")
    st = stencil_mask(atlas)
    L0 = chart_laplacian(atlas)
    scale = np.where(st, 1.0 / W, 0.0)
    interp = atlas.interp_mask
    hole = atlas.hole_mask
    eye_rows = interp | hole
    P = atlas.interpolation
    mat = _diag(scale) @ L0 + _diag(eye_rows.astype(float)) - _diag(interp.astype(float)) @ P
    return LinearOperator(atlas, mat.tocsr(), st, interp, hole)


def laplacian(f: ScalarField, metric) -> ScalarField:
    return assemble_laplacian(metric).apply(f)


def gradient_components(f: ScalarField):
    """Chart-coordinate first derivatives: core ``(f_x, f_y)``, cusp ``(f_s, f_theta)``."""
    atlas = f.atlas
    h = atlas.core.h
    core = f.core
    fx = (np.roll(core, -1, 0) - np.roll(core, 1, 0)) / (2 * h)
    fy = (np.roll(core, -1, 1) - np.roll(core, 1, 1)) / (2 * h)
    ends = []
    for j, c in enumerate(atlas.cusps):
        e = f.end(j)
        ends.append((s_derivative(e, c.ds), theta_derivative(e)))
    return (fx, fy), ends


def gradient_norm_sq(f: ScalarField, metric) -> ScalarField:
    """``|grad f|_g^2`` at every active node."""
    atlas = f.atlas
    W = total_factor(metric)
    (fx, fy), ends = gradient_components(f)
    out = ScalarField(atlas)
    out.core[:] = (fx**2 + fy**2) / atlas.core_view(W)
    for j, c in enumerate(atlas.cusps):
        fs, ft = ends[j]
        out.end(j)[:] = (fs**2 + np.exp(2 * c.s)[:, None] * ft**2) / atlas.end_view(W, j)
    out.values[atlas.hole_mask] = 0.0
    # core differences next to a hole are unreliable; the cusp chart owns that band
    return synchronize(out)


def decay_norm(v: ScalarField, mu: float, end: int) -> float:
    """``max s^mu |v|`` over the nodes of cusp chart ``end`` with ``s >= s_lo + 1``."""
    if not mu > 0:
        raise ValueError("decay exponent must be positive")
    atlas = v.atlas
    if not 0 <= end < len(atlas.cusps):
        raise KeyError(f"unknown end {end}")
    c = atlas.cusps[end]
    sel = c.s >= c.s_lo + 1.0 - 1e-12
    vals = v.end(end)[sel]
    return float(np.max(c.s[sel, None] ** mu * np.abs(vals))) if vals.size else 0.0


def end_ring_mean(f: ScalarField, j: int, ring: int = -1) -> float:
    return float(np.mean(f.end(j)[ring]))


def end_curvature(R: ScalarField, j: int) -> float:
    """Curvature estimate of end ``j``: mean of ``R`` on the last equation ring.

    The truncation ring carries boundary data for ``u``; ``R`` there comes
    from a one-sided stencil and is no better than first-order consistent.
    """
    return end_ring_mean(R, j, -2)


def integrate(f: ScalarField, metric) -> float:
    """``int f dA``: partition-of-unity quadrature plus constant-limit tails."""
    atlas = f.atlas
    W = total_factor(metric)
    fw = f.values * W
    total = float(np.sum(quadrature_weights(atlas) * fw))
    for j, c in enumerate(atlas.cusps):
        ring = atlas.end_view(fw, j)[-1]
        total += float(np.mean(ring)) * 2 * np.pi * np.exp(-c.s_hi)
    return total


def green_identity_residual(a: ScalarField, b: ScalarField, metric) -> float:
    """``int (a Lap b - b Lap a) dA``; vanishes for a self-adjoint discretization."""
    op = assemble_laplacian(metric)
    la = op.apply(a)
    lb = op.apply(b)
    prod = ScalarField(a.atlas, a.values * lb.values - b.values * la.values)
    return integrate(prod, metric)


def smoothstep_field(atlas: Atlas, lo: float, hi: float) -> ScalarField:
    """Radial C-infinity step in s: 0 for s <= lo, 1 for s >= hi, on every chart."""
    out = ScalarField(atlas)
    out.core[:] = smooth_step((atlas.core_s - lo) / (hi - lo))
    for j, c in enumerate(atlas.cusps):
        out.end(j)[:] = smooth_step((c.s - lo) / (hi - lo))[:, None]
    return out
