import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from swbathy.core_model import GRAVITY, build_grid, evaluate_bed
from swbathy.flow_diagnostics import error_norms
from swbathy.inverse_core import (
    DegenerateFlowError,
    NondegeneracyWarning,
    SteadyInversionError,
    assemble_bed,
    discharge_from_second_point,
    reconstruct,
    reconstruct_discharge,
    reconstruct_dq_dt,
    solve_phi,
    steady_analytic,
    steady_discharge_free,
)
from swbathy.surface_lab import SurfaceSnapshot, _local_derivative

G = GRAVITY


def snapshot(x, zeta, dz=None, d2z=None, q_in=4.42, dq_in=0.0, b_a1=0.0):
    x = np.asarray(x, float)
    zeros = np.zeros_like(x)
    return SurfaceSnapshot(0.0, x, np.asarray(zeta, float), zeros if dz is None else dz,
                           zeros if d2z is None else d2z, q_in, dq_in, b_a1)


# -- discharge marches -------------------------------------------------------


def test_steady_continuity_keeps_inlet_discharge():
    x = build_grid(0, 25, 100).centers
    q = reconstruct_discharge(snapshot(x, np.full(100, 2.0)))
    assert np.all(q == 4.42)


@given(st.floats(-1, 1), st.floats(-0.2, 0.2), st.floats(-5, 5), st.integers(4, 300))
def test_discharge_march_exact_on_affine_rate(k0, k1, q_in, n):
    grid = build_grid(0, 25, n)
    x = grid.centers
    s = snapshot(x, np.ones(n), dz=k0 + k1 * x, q_in=q_in)
    exact = q_in - k0 * x - 0.5 * k1 * x * x  # a1 = 0
    assert np.max(np.abs(reconstruct_discharge(s) - exact)) <= 1e-11 * (1 + abs(q_in) + 25 * abs(k0) + 625 * abs(k1))


@given(st.floats(-1, 1), st.floats(-3, 3))
def test_dq_dt_march_exact_on_constant(k, dq_in):
    x = build_grid(0, 25, 50).centers
    s = snapshot(x, np.ones(50), d2z=np.full(50, k), dq_in=dq_in)
    np.testing.assert_allclose(reconstruct_dq_dt(s), dq_in - k * x, atol=1e-12)


def test_dq_dt_zero():
    x = build_grid(0, 25, 50).centers
    assert np.all(reconstruct_dq_dt(snapshot(x, np.ones(50))) == 0)


# -- phi and bed ---------------------------------------------------------------


def test_phi_constant_with_zero_forcing():
    phi = solve_phi(np.full(30, 2.0), np.full(30, 4.42), np.zeros(30), 0.25, 9.768)
    assert np.all(phi == 9.768)


def test_phi_degenerate_start_and_march():
    with pytest.raises(DegenerateFlowError) as info:
        solve_phi(np.ones(5), np.ones(5), np.zeros(5), 0.1, 0.0)
    assert info.value.cell == 0
    with pytest.raises(DegenerateFlowError) as info:
        solve_phi(np.ones(10), np.ones(10), np.full(10, 100.0), 0.1, 1.0)
    assert info.value.cell >= 1


@given(st.lists(st.floats(0.1, 5), min_size=3, max_size=30), st.floats(0.1, 10))
def test_assemble_bed_identity(h, q):
    h = np.array(h)
    b = np.linspace(-0.5, 0.5, h.size)
    zeta = b + h
    np.testing.assert_allclose(assemble_bed(zeta, np.full(h.size, q), q * q / h), b, atol=1e-12)


def test_assemble_bed_zero_discharge_returns_surface():
    zeta = np.array([1.0, 1.5])
    assert np.array_equal(assemble_bed(zeta, np.zeros(2), np.ones(2)), zeta)


# -- manufactured unsteady instant ------------------------------------------


Q, DQ = 4.42, 0.1


def _depth(x):
    return 2.0 - 0.3 * np.exp(-(((x - 12.5) / 3.0) ** 2))


def _depth_x(x):
    return 0.3 * 2 * (x - 12.5) / 9.0 * np.exp(-(((x - 12.5) / 3.0) ** 2))


def _bed_slope(x):
    # momentum balance with uniform discharge Q and dQ/dt = DQ at the instant
    h, hx = _depth(x), _depth_x(x)
    return -(DQ - Q * Q * hx / (h * h)) / (G * h) - hx


def manufactured(n):
    x = build_grid(0, 25, n).centers
    b = np.array([quad(_bed_slope, 0.0, xi, epsabs=1e-14, epsrel=1e-13)[0] for xi in x])
    s = snapshot(x, _depth(x) + b, q_in=Q, dq_in=DQ, b_a1=b[0])
    return s, b


def test_manufactured_reconstruction_order():
    errs = []
    for n in (100, 200, 400):
        s, b = manufactured(n)
        errs.append(np.max(np.abs(reconstruct(s).b_rec - b)))
    order = math.log(errs[0] / errs[-1]) / math.log(4)
    print(f"manufactured bed errors {errs}, order {order:.3f}")
    assert order >= 1.8


def test_anchoring_is_exact(forward):
    for ident in ("test-1", "test-4"):
        _, _, snap = forward(ident)
        assert abs(reconstruct(snap).b_rec[0] - snap.b_a1) <= 1e-15


# -- steady closed forms -------------------------------------------------------


def test_steady_flat_surface():
    h, b = steady_analytic(np.full(10, 2.5), 4.42, 2.0)
    assert np.all(h == 2.0) and np.all(b == 0.5)


def test_steady_substitution_example():
    h, _ = steady_analytic(np.array([2.0, 1.9]), 4.42, 2.0)
    expected = 1 / math.sqrt(0.25 + 2 * G / 4.42 ** 2 * 0.1)
    assert h[1] == pytest.approx(expected, rel=1e-14)
    assert h[1] == pytest.approx(1.6893, abs=1e-4)


def test_steady_errors():
    with pytest.raises(SteadyInversionError):
        steady_analytic(np.ones(4), 0.0, 1.0)
    with pytest.raises(SteadyInversionError):
        steady_analytic(np.array([1.0, 5.0]), 1.0, 2.0)


def test_discharge_free_degenerate_and_sign():
    with pytest.raises(SteadyInversionError):
        discharge_from_second_point(2.0, 1.9, 2.0, 2.0)
    with pytest.raises(SteadyInversionError):
        discharge_from_second_point(2.0, 2.0, 2.0, 1.8)
    assert discharge_from_second_point(2.0, 1.9, 2.0, 1.8) > 0
    with pytest.raises(SteadyInversionError):
        discharge_from_second_point(2.0, 1.9, 1.8, 2.0)


def _bernoulli(spec, n, q=4.42):
    x = build_grid(0, 25, n).centers
    b = evaluate_bed(spec, x)
    head = q * q / (2 * G * 4.0) + 2.0 + evaluate_bed(spec, np.array([25.0]))[0]
    h = np.array([brentq(lambda hh: hh + q * q / (2 * G * hh * hh) + bb - head, 1.0, 3.0) for bb in b])
    return x, h + b, h, b


def test_steady_analytic_exact_on_bernoulli_data():
    x, zeta, h, b = _bernoulli({"kind": "bump"}, 100)
    h_rec, b_rec = steady_analytic(zeta, 4.42, h[0])
    np.testing.assert_allclose(b_rec, b, atol=1e-10)


def test_discharge_free_recovers_discharge_at_crest():
    x, zeta, h, b = _bernoulli({"kind": "bump"}, 100)
    j = int(np.argmin(np.abs(x - 10.0)))
    _, b_rec, q = steady_discharge_free(zeta, h[0], x, x[j], h[j])
    assert q ** 2 == pytest.approx(4.42 ** 2, rel=1e-8)
    np.testing.assert_allclose(b_rec, b, atol=1e-8)


def test_discharge_free_on_forward_data(forward):
    _, rep, snap = forward("test-1")
    j = int(np.argmin(np.abs(snap.x - 10.0)))
    h_ref = snap.zeta[j] - rep.bed.b_center[j]
    _, _, q = steady_discharge_free(snap.zeta, snap.h_a1, snap.x, snap.x[j], h_ref)
    assert q == pytest.approx(4.42, rel=0.01)


def _steady_gap(zeta, q, h_a1, dx):
    s = snapshot(dx * (np.arange(zeta.size) + 0.5), zeta, q_in=q, b_a1=zeta[0] - h_a1)
    _, b_st = steady_analytic(zeta, q, h_a1)
    return np.max(np.abs(reconstruct(s).b_rec - b_st))


def test_steady_consistency_smooth_data():
    gaps = []
    for n in (100, 200, 400):
        _, zeta, h, _ = _bernoulli({"kind": "sech", "amplitude": 0.2}, n)
        gaps.append(_steady_gap(zeta, 4.42, h[0], 25.0 / n))
    assert gaps[0] / gaps[1] >= 3 and gaps[1] / gaps[2] >= 3


def test_steady_consistency_test1_data(forward):
    gaps = []
    for n in (100, 200, 400):
        _, _, snap = forward("test-1", n)
        gaps.append(_steady_gap(snap.zeta, snap.q_in, snap.h_a1, snap.dx))
    print(f"Test 1 inverse vs closed-form gaps {gaps}")
    assert gaps[0] / gaps[1] >= 3 and gaps[1] / gaps[2] >= 3


def test_test1_discharge_closer_than_forward(forward):
    _, rep, snap = forward("test-1")
    rec = reconstruct(snap)
    assert np.max(np.abs(rec.q_rec - 4.42)) < np.max(np.abs(rep.final().q - 4.42))


def test_test4_dq_dt_matches_forward_time_derivative(forward):
    diffs = []
    for n in (100, 200):
        _, rep, snap = forward("test-4", n)
        h = rep.history
        dq = _local_derivative(h.times, h.q, len(h) - 1, 0)[1][0]
        diffs.append(np.max(np.abs(reconstruct(snap).dq_dt_rec - dq)))
    print(f"Test 4 dq/dt gaps {diffs}")
    assert diffs[0] / diffs[1] >= 3


# -- pipeline ----------------------------------------------------------------


def test_nondegeneracy_warns_but_computes():
    x = build_grid(0, 25, 40).centers
    s = snapshot(x, np.full(40, 2.0), q_in=0.5)
    with pytest.warns(NondegeneracyWarning):
        res = reconstruct(s, beta=1.0)
    assert not res.nondegenerate and res.min_q == 0.5


def test_upstream_dry_is_degenerate():
    x = build_grid(0, 25, 40).centers
    with pytest.raises(DegenerateFlowError):
        reconstruct(snapshot(x, np.zeros(40), b_a1=0.0))


def test_reconstruction_save(tmp_path, forward):
    cfg, rep, snap = forward("test-4")
    res = reconstruct(snap).attach_truth(rep.bed.b_center, cfg.grid.dx)
    res.save(tmp_path / "rec.csv")
    data = np.loadtxt(tmp_path / "rec.csv", delimiter=",", skiprows=1)
    assert data.shape == (100, 7)
    np.testing.assert_array_equal(data[:, 4], res.b_rec)
    meta = json.loads((tmp_path / "rec.json").read_text())
    assert meta["linf_rel"] == res.errors["linf_rel"] and meta["degenerate"] is False


@pytest.mark.slow
@pytest.mark.parametrize("ident", ["test-1", "test-2", "test-3", "test-4"])
def test_round_trip_l2_monotone(ident, forward):
    l2 = []
    for n in (100, 200, 400):
        cfg, rep, snap = forward(ident, n)
        l2.append(error_norms(reconstruct(snap).b_rec, rep.bed.b_center, cfg.grid.dx)[1])
    print(f"{ident} L2_r over N_x = 100, 200, 400: {l2}")
    assert l2[0] > l2[1] > l2[2]
