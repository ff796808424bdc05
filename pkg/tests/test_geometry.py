import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgconnection.errors import AdmissibilityError, ConfigError, StructureError
from kgconnection.geometry import (
    GridSpec, MetricPath, PathSegment, PerturbationSpec, TimeBumpFlow, blend, bump, bump_derivative,
    build_metric, flat_metric, lie_derivative_flat, lie_derivative_tensor, pullback, validate,
    validate_components,
)

from conftest import bump_spec


def phi(rho, beta=1.0):
    # oracle: closed-form bump written out independently
    rho = np.asarray(rho, float)
    return np.where(np.abs(rho) < 1, np.exp(beta - beta / np.clip(1 - rho**2, 1e-300, None)), 0.0)


@pytest.mark.parametrize("kw,code", [
    ({"n_x": 7}, "CFG_NX"), ({"n_x": 6}, "CFG_NX"), ({"circumference": 0.0}, "CFG_CIRCUMFERENCE"),
    ({"dt": -0.1}, "CFG_DT"), ({"t_min": 1.0, "t_max": 0.0}, "CFG_TIME"), ({"mass": 0.0}, "CFG_MASS"),
    ({"mass": -1.0}, "CFG_MASS"),
])
def test_grid_constraints(kw, code):
    with pytest.raises(ConfigError) as e:
        GridSpec(**kw)
    assert e.value.code == code


def test_grid_axes(grid):
    assert grid.x.size == 64 and grid.x[1] == pytest.approx(grid.circumference / 64)
    assert grid.t[0] == -3.0 and grid.t[-1] == pytest.approx(3.0)


@given(st.floats(-0.99, 0.99), st.floats(0.5, 8.0))
def test_bump_matches_closed_form_and_derivative(rho, beta):
    assert bump(rho, beta) == pytest.approx(phi(rho, beta), rel=1e-14)
    h = 1e-6
    fd = (phi(rho + h, beta) - phi(rho - h, beta)) / (2 * h)
    assert bump_derivative(rho, beta) == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_bump_support_and_peak():
    assert bump(0.0) == 1.0
    assert np.all(bump(np.array([-1.0, 1.0, 1.5, -3.0])) == 0.0)


def test_empty_and_zero_amplitude_are_flat(grid):
    for g in (build_metric(grid, ()), build_metric(grid, (bump_spec(amp=0.0),))):
        gtt, gtx, gxx = g.samples
        assert np.all(gtt == 1.0) and np.all(gtx == 0.0) and np.all(gxx == -1.0)


def test_conformal_spot_values(grid):
    s = PerturbationSpec("conformal_bump", (0.0, 1.0), (1.0, 1.0), 0.1)
    g = build_metric(grid, (s,))
    t = np.array([0.0, 0.3, -0.5, 0.9])
    x = np.array([1.0, 1.2, 0.4, 1.9])
    p = 0.1 * phi(t) * phi(x - 1.0)
    gtt, gtx, gxx = g.components(t, x)
    assert np.allclose(gtt, 1 + p, atol=1e-15)
    assert np.allclose(gxx, -(1 + p), atol=1e-15)
    assert np.all(gtx == 0)


def test_flat_outside_support(grid):
    g = build_metric(grid, (bump_spec(t0=0.0, x0=5.0, r=(1.0, 2.0)),))
    T, X = np.meshgrid(grid.t, grid.x, indexing="ij")
    d = np.abs(((X - 5.0 + grid.circumference / 2) % grid.circumference) - grid.circumference / 2)
    outside = (np.abs(T) >= 1.0) | (d >= 2.0)
    assert np.all(g.g_tt[outside] == 1) and np.all(g.g_tx[outside] == 0) and np.all(g.g_xx[outside] == -1)


def test_support_outside_time_window_rejected(grid):
    with pytest.raises(ConfigError) as e:
        build_metric(grid, (bump_spec(t0=2.5, r=(1.0, 1.0)),))
    assert e.value.code == "CFG_SUPPORT"


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError) as e:
        PerturbationSpec("twist")
    assert e.value.code == "CFG_KIND"


def test_validate_flat_and_bump(grid):
    rep = validate(flat_metric(grid))
    assert rep.valid and rep.worst_margin == 1.0
    for kind in ("conformal_bump", "lapse_bump", "shift_bump"):
        assert validate(build_metric(grid, (bump_spec(kind),))).valid


def test_counterexample_average_degenerate():
    one = np.ones(3)
    assert validate_components(one, one, 0 * one).lorentzian
    assert validate_components(one, -one, 0 * one).lorentzian
    avg = validate_components(one, 0 * one, 0 * one)
    assert not avg.lorentzian and not avg.valid


def test_large_negative_conformal_invalid(grid):
    rep = validate(build_metric(grid, (bump_spec(amp=-1.5),)))
    assert not rep.valid and rep.failing_points


def test_blend_trivial_cases(grid):
    g1 = build_metric(grid, (bump_spec(),))
    g2 = build_metric(grid, (bump_spec("lapse_bump", x0=10.0),))
    one = blend(g1, g2, np.ones((grid.n_t, grid.n_x)))
    assert all(np.array_equal(a, b) for a, b in zip(one.samples, g1.samples))
    half = blend(g1, g1, lambda t, x: 0.5 + 0 * t)
    assert all(np.allclose(a, b, atol=1e-15) for a, b in zip(half.samples, g1.samples))
    with pytest.raises(StructureError):
        blend(g1, g2, np.ones((3, 3)))


@given(st.sampled_from(["conformal_bump", "lapse_bump", "shift_bump"]), st.floats(-0.3, 0.3),
       st.floats(0.0, 25.0), st.floats(0.0, 1.0))
def test_blend_of_valid_metrics_is_valid(kind, amp, x0, phase):
    grid = GridSpec()
    g1 = build_metric(grid, (bump_spec(kind, x0=x0, amp=amp),))
    g2 = build_metric(grid, (bump_spec("conformal_bump", t0=0.5, x0=x0 + 3, amp=0.2),))
    assert validate(g1).valid and validate(g2).valid
    chi = lambda t, x: 0.5 + 0.5 * np.sin(2 * np.pi * x / grid.circumference + 6.28 * phase) * np.ones_like(t)
    assert validate(blend(g1, g2, chi)).valid


def test_pullback_identity_and_flat_chain_rule(grid):
    g = flat_metric(grid)
    flow0 = TimeBumpFlow.from_params(grid, s=0.0)
    assert pullback(g, flow0) is g
    flow = TimeBumpFlow.from_params(grid, s=0.2)
    pg = pullback(g, flow)
    T, X = np.meshgrid(grid.t, grid.x, indexing="ij")
    b, c = flow.b, flow.c
    a = 1 + 0.2 * b.derivative(T) * c(X)
    e = 0.2 * b(T) * c.derivative(X)
    gtt, gtx, gxx = pg.samples
    assert np.allclose(gtt, a**2, atol=1e-14)
    assert np.allclose(gtx, a * e, atol=1e-14)
    assert np.allclose(gxx, e**2 - 1, atol=1e-14)
    assert validate(pg).valid


@pytest.mark.parametrize("s", [-0.3, 0.1, 0.25])
def test_pullback_inverse_composition(grid, s):
    g = build_metric(grid, (bump_spec(t0=0.3, x0=1.0),))
    flow = TimeBumpFlow.from_params(grid, s=s)
    back = pullback(pullback(g, flow), flow.inverse())
    assert max(np.abs(a - b).max() for a, b in zip(back.samples, g.samples)) < 1e-8
    assert validate(pullback(g, flow)).valid


def test_flow_admissibility():
    grid = GridSpec()
    with pytest.raises(AdmissibilityError):
        TimeBumpFlow.from_params(grid, s=5.0).check_admissible(grid)


def test_lie_derivative_finite_difference_vs_analytic(grid):
    flow = TimeBumpFlow.from_params(grid, t0=0.2, x0=3.0)
    h = lie_derivative_tensor(flat_metric(grid), flow)
    T, X = np.meshgrid(grid.t, grid.x, indexing="ij")
    ref = lie_derivative_flat(flow, T, X)
    assert max(np.abs(a - b).max() for a, b in zip(h, ref)) < 1e-7


def test_lie_derivative_spec_matches_flow(grid):
    s = PerturbationSpec("lie_derivative", (0.2, 3.0), (2.0, 4.0), 1.0, (4.0, 8.0))
    flow = TimeBumpFlow.from_params(grid, t0=0.2, x0=3.0)
    T, X = np.meshgrid(grid.t, grid.x, indexing="ij")
    got = s.tensor(T, X, grid.circumference)
    ref = lie_derivative_flat(flow, T, X)
    assert all(np.allclose(a, b, atol=1e-15) for a, b in zip(got, ref))
    zero = PerturbationSpec("lie_derivative", (0.2, 3.0), (2.0, 4.0), 0.0, (4.0, 8.0)).tensor(T, X, grid.circumference)
    assert all(np.all(z == 0) for z in zero)


def test_metric_path_checks(grid):
    base = flat_metric(grid)
    a, b = (bump_spec(),), (bump_spec("lapse_bump", x0=9.0),)
    p = MetricPath(base, (PathSegment(a, 4), PathSegment(b, 4)))
    assert len(p.check()) == 8 and not p.closed
    r = p.reversed()
    assert r.endpoint_specs() == p.endpoint_specs()[::-1]
    loop = p.concat(MetricPath(base, (PathSegment((), 3),), b))
    assert loop.closed
    with pytest.raises(StructureError):
        p.concat(MetricPath(base, (PathSegment((), 2),), a))
    bad = MetricPath(base, (PathSegment((bump_spec(amp=-1.5),), 3),))
    with pytest.raises(AdmissibilityError):
        bad.check()
