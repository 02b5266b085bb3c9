import math

import numpy as np
import pytest

from todalab.bubble import lower_bound_case1, lower_bound_case2, case2_closing_constant
from todalab.errors import ConfigError, GeometryError
from todalab.geometry import integrate, make_flat_torus
from todalab.greens import extract_expansions, green_pair_case1
from todalab.spectral import ScalarField, dirichlet_form
from todalab.testfn import (
    DEFAULT_EPS_LIST,
    asymptotic_fit_case1,
    asymptotic_fit_case2,
    build_test_case1,
    build_test_case2,
    coupling_L,
    deficit_data,
    evaluate_phi0,
    field_on_grid,
    phi0_breakdown,
    smoothstep,
)

FOUR_PI = 4.0 * math.pi


def brute_force_value(tf):
    """Grid-quadrature evaluation of the limiting functional, fully
    independent of the hybrid evaluator's region splitting."""
    metric = tf.metric
    f1 = field_on_grid(tf, 1)
    f2 = field_on_grid(tf, 2)
    quad = (dirichlet_form(f1, f1) + dirichlet_form(f2, f2)
            + dirichlet_form(f1, f2)) / 3.0
    means = integrate(f1, metric) + integrate(f2, metric)
    logs = math.log(integrate(ScalarField(metric.grid, np.exp(f1.values)), metric)) \
        + math.log(integrate(ScalarField(metric.grid, np.exp(f2.values)), metric))
    return quad + FOUR_PI * means - FOUR_PI * logs


def test_coupling_identity():
    for eps in DEFAULT_EPS_LIST:
        L = coupling_L(eps)
        assert L ** 4 * eps ** 2 == pytest.approx(1.0 / math.log(-math.log(eps)),
                                                  rel=1e-12)
        assert L * eps < 0.125
    with pytest.raises(ConfigError):
        coupling_L(math.exp(-1.0))
    with pytest.raises(ConfigError):
        coupling_L(0.5)


def test_smoothstep_endpoints():
    assert smoothstep(np.array([0.09, 0.1]), 0.1, 0.2).tolist() == [1.0, 1.0]
    assert smoothstep(np.array([0.2, 0.5]), 0.1, 0.2).tolist() == [0.0, 0.0]
    mid = smoothstep(np.array([0.15]), 0.1, 0.2)[0]
    assert 0.0 < mid < 1.0


def test_fields_continuous_across_branch_edges(pair1_128):
    tf = build_test_case1(pair1_128, 0.02, 5.0)
    le = 0.1
    delta = 1e-8
    p = pair1_128.points[0]
    for radius in (le, 2 * le):
        for th in (0.3, 1.7, 4.0):
            d = np.array([math.cos(th), math.sin(th)])
            lo = (p + (radius - delta) * d)[None, :]
            hi = (p + (radius + delta) * d)[None, :]
            for k in (1, 2):
                jump = abs(tf.eval_field(k, lo)[0] - tf.eval_field(k, hi)[0])
                # continuous with slope < ~500 near the edges
                assert jump < 1e-5, (radius, th, k)


def test_grid_values_match_pointwise(pair1_128):
    tf = build_test_case1(pair1_128, 0.02, 5.0)
    grid = pair1_128.grid
    rng = np.random.default_rng(6)
    idx = rng.integers(0, grid.n, size=(60, 2))
    pts = idx * grid.h
    for k in (1, 2):
        f = field_on_grid(tf, k)
        got = f.values[idx[:, 0], idx[:, 1]]
        ref = tf.eval_field(k, pts)
        assert np.max(np.abs(got - ref)) < 1e-9


def test_window_overlap_rejected(pair1_128):
    # diagonal separation ~0.707: L*eps beyond a quarter of it must fail
    with pytest.raises(GeometryError):
        build_test_case1(pair1_128, 0.02, 10.0)


def test_window_scale_rejected(pair2_256):
    # single point: no separation constraint, but L*eps must stay under 1/8
    with pytest.raises(ConfigError):
        build_test_case2(pair2_256, 0.02, 7.0)


def test_value_against_grid_quadrature_case1(pair1_256):
    tf = build_test_case1(pair1_256, 0.02, 5.0)
    fast = evaluate_phi0(tf)
    brute = brute_force_value(tf)
    assert abs(fast - brute) < 1e-3 * abs(brute)


def test_value_against_grid_quadrature_case2(pair2_256):
    tf = build_test_case2(pair2_256, 0.02, 5.0)
    fast = evaluate_phi0(tf)
    brute = brute_force_value(tf)
    assert abs(fast - brute) < 1e-3 * abs(brute)


def test_value_independent_of_stitch_radius(pair1_128):
    tf = build_test_case1(pair1_128, 0.02, 5.0)
    v2 = evaluate_phi0(tf, stitch=2.0)
    v3 = evaluate_phi0(tf, stitch=3.0)
    assert abs(v2 - v3) < 1e-3 * abs(v2)


def test_value_swap_symmetric(pair1_128):
    p1, p2 = pair1_128.points
    swapped = green_pair_case1(p2, p1, pair1_128.metric)
    extract_expansions(swapped)
    a = evaluate_phi0(build_test_case1(pair1_128, 0.02, 5.0))
    b = evaluate_phi0(build_test_case1(swapped, 0.02, 5.0))
    assert abs(a - b) < 1e-12


def test_breakdown_composition(pair1_128):
    tf = build_test_case1(pair1_128, 0.02, 5.0)
    bd = phi0_breakdown(tf)
    quad = sum(bd[f"dirichlet_inner_{km}"] + bd[f"dirichlet_outer_{km}"]
               for km in ("11", "22", "12")) / 3.0
    assert bd["quadratic"] == pytest.approx(quad, abs=1e-12)
    recombined = bd["quadratic"] + FOUR_PI * (bd["mean_1"] + bd["mean_2"]) \
        - FOUR_PI * (bd["log_int_1"] + bd["log_int_2"])
    assert bd["value"] == pytest.approx(recombined, abs=1e-12)


def test_metric_mismatch_rejected(pair1_128):
    tf = build_test_case1(pair1_128, 0.02, 5.0)
    with pytest.raises(ConfigError):
        evaluate_phi0(tf, make_flat_torus(128))  # a different Metric object


def test_deficit_targets_flat(pair1_128, pair2_256):
    d1 = deficit_data(pair1_128, pair1_128.metric)
    # flat metric, symmetric configuration: no curvature, no tilt
    assert d1.case_tag == "one"
    assert d1.coeff == pytest.approx(8.0 * math.pi, abs=1e-8)
    assert d1.B[1] == pytest.approx(0.0, abs=1e-12)
    d2 = deficit_data(pair2_256, pair2_256.metric)
    assert d2.coeff == pytest.approx(1.0, abs=1e-8)


def test_eps_list_validation(pair1_128):
    with pytest.raises(ConfigError):
        asymptotic_fit_case1(pair1_128, pair1_128.metric, (1e-2, 1e-3, 1e-4))
    with pytest.raises(ConfigError):
        asymptotic_fit_case1(pair1_128, pair1_128.metric,
                             (1e-2, 1e-3, 1e-3, 1e-4))


def test_fit_case1_report(pair1_128):
    report = asymptotic_fit_case1(pair1_128, pair1_128.metric,
                                  DEFAULT_EPS_LIST[:4])
    expect_const = lower_bound_case1(pair1_128.expansions[(1, 0)].A,
                                     pair1_128.expansions[(2, 1)].A)
    assert report.case_tag == "one"
    assert report.constant_used == pytest.approx(expect_const, abs=1e-12)
    assert report.constant_alternate is None
    assert report.target_slope == pytest.approx(-8.0 * math.pi, abs=1e-8)
    assert len(report.rows) == 4
    for row, eps in zip(report.rows, DEFAULT_EPS_LIST):
        assert row["eps"] == eps
        assert row["L"] == pytest.approx(coupling_L(eps), rel=1e-12)
        assert row["regressor"] == pytest.approx(
            eps * eps * (-math.log(eps * eps)), rel=1e-12)
        assert row["remainder"] == pytest.approx(row["phi0"] - expect_const,
                                                 abs=1e-12)
    # the energies close in on the limiting constant from above
    remainders = [row["remainder"] for row in report.rows]
    assert all(r > 0 for r in remainders)
    assert all(b < a for a, b in zip(remainders, remainders[1:]))
    recs = report.to_records()
    assert len(recs) == 4
    assert recs[0]["fitted_slope"] == report.fitted_slope
    assert recs[0]["constant_used"] == report.constant_used


def test_fit_case2_report(pair2_256):
    report = asymptotic_fit_case2(pair2_256, pair2_256.metric,
                                  DEFAULT_EPS_LIST[:4])
    assert report.case_tag == "two"
    assert report.constant_used == pytest.approx(
        lower_bound_case2(pair2_256.expansions[(1, 0)].A, pair2_256.mean_G2),
        abs=1e-12)
    assert report.constant_alternate == pytest.approx(
        case2_closing_constant(pair2_256.mean_G2), abs=1e-12)
    assert report.target_slope == pytest.approx(-1.0, abs=1e-8)
    vals = [row["phi0"] for row in report.rows]
    assert all(b < a for a, b in zip(vals, vals[1:]))
