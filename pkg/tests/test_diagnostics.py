import math
from dataclasses import fields, replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cuspflow import diagnostics as D
from cuspflow import flow as F
from cuspflow.operators import ScalarField


def fake_record(**kw):
    base = {f.name: 0.0 for f in fields(D.TimeSeriesRecord)}
    base.update(decay_norm=(0.0,), end_curvature=(-2.0,), lam=(1.0,), newton_its=0)
    base.update(kw)
    return D.TimeSeriesRecord(**base)


def test_area_residual_on_closed_form():
    rho, chi, A0 = -1.0, -1, 20.0
    errs = []
    for n in (41, 81):
        t = np.linspace(0, 10, n)
        A = 4 * np.pi * chi / rho + (A0 - 4 * np.pi * chi / rho) * np.exp(rho * t)
        errs.append(np.max(np.abs(D.area_ode_residual((t, A, rho, chi)))))
    assert errs[0] < 1e-2
    assert errs[1] < errs[0] / 3.5


def test_area_residual_at_fixed_point():
    rho, chi = -2.0, -1
    t = np.linspace(0, 5, 11)
    A = np.full_like(t, 4 * np.pi * chi / rho)
    assert np.max(np.abs(D.area_ode_residual((t, A, rho, chi)))) < 1e-15


def test_area_residual_needs_samples():
    with pytest.raises(ValueError):
        D.area_ode_residual((np.array([0.0, 1.0]), np.ones(2), -1.0, -1))
    with pytest.raises(ValueError):
        D.area_ode_residual([fake_record(t=i) for i in range(3)])


@pytest.mark.parametrize("at", [0, 1, 2])
def test_three_point_weights_exact_for_quadratics(at):
    t = (0.0, 0.3, 0.8)
    w = D._ddt_weights(*t, at)
    q = [2 + 3 * x - 5 * x**2 for x in t]
    assert sum(a * b for a, b in zip(w, q)) == pytest.approx(3 - 10 * t[at], rel=1e-12)


def test_fit_exact_exponential():
    t = np.linspace(1, 6, 30)
    fit = D.fit_exponential_rate(t, 3.0 * np.exp(-2.0 * t))
    assert fit.rate == pytest.approx(2.0, abs=1e-6)
    assert fit.C == pytest.approx(3.0, rel=1e-6)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_fit_constant_channel():
    fit = D.fit_exponential_rate(np.linspace(0, 1, 5), np.full(5, 0.7))
    assert fit.rate == pytest.approx(0.0, abs=1e-12) and fit.r2 == 1.0


def test_fit_rejects_nonpositive_and_short():
    with pytest.raises(ValueError):
        D.fit_exponential_rate([0, 1, 2], [1.0, 0.0, 0.5])
    with pytest.raises(ValueError):
        D.fit_exponential_rate([0, 1, 2], [1.0, 0.5, 0.2], t_window=(1.5, 3))


@given(st.floats(0.05, 5.0), st.floats(0.1, 10.0))
@settings(max_examples=30)
def test_fit_recovers_rate(rate, C):
    t = np.linspace(0, 4, 17)
    fit = D.fit_exponential_rate(t, C * np.exp(-rate * t))
    assert fit.rate == pytest.approx(rate, rel=1e-9, abs=1e-12)


def test_fit_window_uses_transient_end():
    recs = [fake_record(t=float(t), sup_R=1.0 if t < 3 else -0.5) for t in range(11)]
    assert D.transient_end(recs) == 3.0
    assert D.fit_window(recs) == (5.0, 10.0)
    recs = [fake_record(t=float(t), sup_R=1.0 if t < 8 else -0.5) for t in range(11)]
    assert D.fit_window(recs) == (8.0, 10.0)
    assert D.fit_window([fake_record(t=0.0, sup_R=1.0)]) is None


def test_convergence_fits_on_synthetic_records():
    recs = [fake_record(t=0.5 * k, sup_R=-0.5, sup_R_minus_rho=2 * math.exp(-k * 0.5),
                        sup_h=math.exp(-k)) for k in range(21)]
    fits = D.convergence_fits(recs)
    assert fits["sup_R_minus_rho"].rate == pytest.approx(1.0)
    assert fits["sup_h"].rate == pytest.approx(2.0)


def cusp_history(atlas, amplitude, mu, growth, times):
    c = atlas.cusps[0]
    out = []
    for t in times:
        v = ScalarField(atlas)
        v.end(0)[:] = (amplitude * np.exp(growth * t) * np.minimum(1.0, c.s**-mu))[:, None]
        out.append((t, v))
    return out


def test_barrier_passes_inside(one_end):
    a, _ = one_end
    hist = cusp_history(a, 0.1, 2.0, 1.0, np.linspace(0, 1, 5))
    res = D.barrier_check(hist, A=5.0, C=0.2, s0=1.0, mu=2.0)
    assert res.passed and res.violation is None


def test_barrier_reports_violation(one_end):
    a, _ = one_end
    # decays too slowly along the end: s^-1 against an s^-2 barrier
    hist = cusp_history(a, 0.1, 1.0, 0.0, [0.0, 0.5])
    res = D.barrier_check(hist, A=5.0, C=0.2, s0=1.0, mu=2.0)
    assert not res.passed
    v = res.violation
    assert v["t"] == 0.0 and v["value"] > v["barrier"]
    # grows faster in time than exp(A t)
    hist = cusp_history(a, 0.1, 2.0, 8.0, [0.0, 0.5])
    res = D.barrier_check(hist, A=5.0, C=0.2, s0=1.0, mu=2.0)
    assert not res.passed and res.violation["t"] == 0.5


def test_bounds_check_pass_and_negative_control():
    t = np.linspace(0, 6, 61)
    good = [fake_record(t=x, rbar=-1.0, sup_R=-1.0 + 0.3 * np.exp(-x), inf_R=-1.5) for x in t]
    assert D.bounds_check(good, rho=-1.0).passed
    # stalls at a plateau: the late samples break the fitted exponential bound
    bad = [replace(r, sup_R=-1.0 + 0.3 * max(np.exp(-r.t), np.exp(-3.0))) for r in good]
    res = D.bounds_check(bad, rho=-1.0)
    assert not res.passed and res.violations > 0
    with pytest.raises(ValueError):
        D.bounds_check([], rho=-1.0)


def test_weighted_l2_of_constant(hyperbolic):
    mask = D.residual_mask(hyperbolic.atlas)
    vals = np.full(hyperbolic.atlas.size, 3.0)
    assert D.weighted_l2(vals, hyperbolic, mask) == pytest.approx(3.0, rel=1e-14)


def test_residual_mask_excludes_truncation_and_deep_end(one_end):
    a, _ = one_end
    m = D.residual_mask(a)
    c = a.cusps[0]
    view = a.end_view(m, 0)
    assert not view[-4:].any()
    assert not view[c.s > 3.0].any()
    assert not (m & ~a.interior_mask).any()


def test_recorder_on_short_run(one_end):
    a, bg = one_end
    m0 = F.initial_data(bg, [F.Bump((0.0, 0.0), 0.25, 0.2)])
    cfg = F.FlowConfig(rho_mode="explicit", rho=-1.0, t_final=0.2, stop_tol=0.0)
    seen = []
    recs, last = F.run(m0, cfg, on_record=seen.append)
    assert seen == recs
    assert len(recs) >= 4
    flat = recs[1].flat()
    assert list(flat) == D.TimeSeriesRecord.columns(1)
    for r in recs:
        for k, v in r.flat().items():
            assert np.isfinite(v), k
    assert recs[0].sup_u_change == 0.0
    assert recs[-1].t == pytest.approx(0.2)
    assert recs[0].lam == (1.0,)


def test_recorder_rejects_non_increasing_times(one_end):
    a, bg = one_end
    m0 = F.initial_data(bg)
    cfg = F.FlowConfig(rho_mode="explicit", rho=-1.0)
    st = F.initial_state(m0, cfg)
    rec = D.Recorder(st, cfg)
    with pytest.raises(ValueError):
        rec.push(st)


def test_single_sample_series_has_nan_time_channels(one_end):
    a, bg = one_end
    cfg = F.FlowConfig(rho_mode="explicit", rho=-1.0)
    rec = D.Recorder(F.initial_state(F.initial_data(bg), cfg), cfg)
    (r,) = rec.finish()
    assert math.isnan(r.res_area) and math.isnan(r.res_curvature) and math.isnan(r.res_h)
