"""Cost-model tests: expected-cost closed forms vs Monte Carlo / finite
differences, merit-order stacking, and polynomial fitting."""

import math

import numpy as np
import pytest

from storage_pricer.costs import (
    CostPolynomial,
    FleetCurve,
    Segment,
    StorageSpec,
    check_expected_cost_convexity,
    expected_gen_cost,
    expected_storage_cost,
    fit_polynomial_to_merit_curve,
    load_fleet_csv,
    marginal_expected_cost,
    merit_order_cost,
)
from storage_pricer.distributions import ErrorMoments
from storage_pricer.errors import DomainError, SchemaError, UnsupportedDegreeError


def poly(coeffs, g_min=0.0, g_max=50.0):
    return CostPolynomial(tuple(coeffs), g_min=g_min, g_max=g_max)


# ---------------------------------------------------------------------------
# expected_gen_cost
# ---------------------------------------------------------------------------


def test_expected_cost_deterministic_collapse():
    rng = np.random.default_rng(42)
    zero = ErrorMoments(0.0, 0.0)
    for _ in range(1000):
        deg = rng.integers(1, 5)
        coeffs = np.abs(rng.normal(size=deg + 1))
        coeffs[2:] *= 0.01  # keep marginal positive on the domain
        p = CostPolynomial(tuple(coeffs), g_min=0.0, g_max=10.0)
        g = float(rng.uniform(0, 10))
        phi = float(rng.uniform(0, 1))
        assert expected_gen_cost(p, g, phi, zero) == pytest.approx(p.value(g), rel=1e-12, abs=1e-12)


def test_expected_cost_with_mean_shift_collapse():
    # sigma = 0 but mu != 0: expectation is G(g + phi mu) exactly.
    p = poly([1.0, 2.0, 0.3])
    m = ErrorMoments(mu=4.0, sigma=0.0)
    assert expected_gen_cost(p, 2.0, 0.5, m) == pytest.approx(p.value(2.0 + 0.5 * 4.0), rel=1e-12)


def test_expected_cost_quadratic_monte_carlo():
    # Oracle: E[(1+d)^2] with d ~ N(0,1) is 2 exactly; MC cross-check.
    p = poly([0.0, 0.0, 1.0])
    got = expected_gen_cost(p, 1.0, 1.0, ErrorMoments(0.0, 1.0))
    assert got == pytest.approx(2.0, rel=1e-12)
    rng = np.random.default_rng(0)
    d = rng.normal(0, 1, 2_000_000)
    mc = float(np.mean((1 + d) ** 2))
    assert got == pytest.approx(mc, abs=4 * float(np.std((1 + d) ** 2)) / math.sqrt(d.size))


def test_expected_cost_cubic_odd_moments_vanish():
    p = CostPolynomial((0.0, 0.0, 0.0, 1.0), g_min=0.0, g_max=10.0)
    got = expected_gen_cost(p, 0.0, 1.0, ErrorMoments(0.0, 1.0))
    assert got == pytest.approx(0.0, abs=1e-12)


def test_expected_cost_rejects_bad_phi():
    with pytest.raises(DomainError):
        expected_gen_cost(poly([0, 1]), 1.0, 1.5, ErrorMoments(0, 1))


def test_degree_cap_enforced():
    with pytest.raises(UnsupportedDegreeError):
        CostPolynomial((0, 1, 0, 0, 0, 1e-6), g_min=0, g_max=1)


# ---------------------------------------------------------------------------
# expected_storage_cost
# ---------------------------------------------------------------------------


def test_storage_cost_examples():
    free = StorageSpec(p_max=10, e_max=40, eta=1.0, marginal_cost=0.0, e_init=20)
    paid = StorageSpec(p_max=10, e_max=40, eta=0.9, marginal_cost=20.0, e_init=20)
    assert expected_storage_cost(free, 5.0, 0.5, 2.0) == 0.0
    assert expected_storage_cost(paid, 5.0, 0.5, 2.0) == pytest.approx(120.0)
    assert expected_storage_cost(paid, 0.0, 0.0, 7.0) == 0.0


# ---------------------------------------------------------------------------
# marginal_expected_cost vs central finite differences
# ---------------------------------------------------------------------------


def fd_marginal(p, g, phi, moments):
    h = 1e-4 * max(1.0, abs(g))
    return (expected_gen_cost(p, g + h, phi, moments) - expected_gen_cost(p, g - h, phi, moments)) / (2 * h)


def test_marginal_linear_poly():
    assert marginal_expected_cost(poly([0.0, 1.0]), 3.3, 0.7, ErrorMoments(1, 5)) == pytest.approx(1.0)


def test_marginal_quadratic_frozen():
    # FD oracle of 2(g + phi mu) at g=3, phi=1, mu=1 -> 8.
    got = marginal_expected_cost(poly([0, 0, 1]), 3.0, 1.0, ErrorMoments(1.0, 5.0))
    assert got == pytest.approx(8.0, rel=1e-12)


def test_marginal_cubic_frozen():
    # FD oracle of 3(g^2 + 2 g phi mu + phi^2 (mu^2 + sigma^2)) at g=0, phi=1 -> 3.
    p = CostPolynomial((0, 0, 0, 1.0), g_min=0.0, g_max=10.0)
    got = marginal_expected_cost(p, 0.0, 1.0, ErrorMoments(0.0, 1.0))
    assert got == pytest.approx(3.0, rel=1e-12)


def test_marginal_matches_fd_randomized():
    rng = np.random.default_rng(3)
    for _ in range(300):
        deg = int(rng.integers(1, 5))
        coeffs = np.abs(rng.normal(size=deg + 1)) * (10.0 ** -np.arange(deg + 1, dtype=float))
        p = CostPolynomial(tuple(coeffs), g_min=0.0, g_max=20.0)
        g = float(rng.uniform(0, 20))
        phi = float(rng.uniform(0, 1))
        m = ErrorMoments(float(rng.normal(0, 2)), float(rng.uniform(0, 3)))
        got = marginal_expected_cost(p, g, phi, m)
        ref = fd_marginal(p, g, phi, m)
        assert got == pytest.approx(ref, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# convexity gate
# ---------------------------------------------------------------------------


def test_convexity_gate_accepts_quadratic():
    check_expected_cost_convexity(poly([0, 10, 0.5]), [ErrorMoments(0, 2)], g_lo=0, g_hi=50)


def test_convexity_gate_rejects_concave_region():
    # Negative quadratic term: concave in g everywhere.
    p = CostPolynomial.__new__(CostPolynomial)
    object.__setattr__(p, "coeffs", (0.0, 10.0, -0.5))
    object.__setattr__(p, "g_min", 0.0)
    object.__setattr__(p, "g_max", 5.0)
    object.__setattr__(p, "rmse", None)
    with pytest.raises(DomainError):
        check_expected_cost_convexity(p, [ErrorMoments(0, 1)], g_lo=0, g_hi=5)


def test_marginal_must_be_nonnegative_on_domain():
    with pytest.raises(DomainError):
        CostPolynomial((0.0, -1.0), g_min=0.0, g_max=10.0)


# ---------------------------------------------------------------------------
# merit order
# ---------------------------------------------------------------------------


def two_segment_fleet():
    return FleetCurve((Segment(5.0, 3.0, 10.0), Segment(5.0, 0.0, 20.0)))


def test_merit_cost_zero():
    assert merit_order_cost(two_segment_fleet(), 0.0) == 0.0


def test_merit_cost_single_linear_segment():
    fleet = FleetCurve((Segment(10.0, 7.0, 10.0),))
    assert merit_order_cost(fleet, 5.0) == pytest.approx(50.0 + 7.0)


def test_merit_cost_continuous_at_boundary():
    fleet = two_segment_fleet()
    below = merit_order_cost(fleet, 5.0 - 1e-9)
    above = merit_order_cost(fleet, 5.0 + 1e-9)
    assert below == pytest.approx(above, abs=1e-6)


def test_merit_cost_out_of_range():
    with pytest.raises(DomainError):
        merit_order_cost(two_segment_fleet(), 11.0)
    with pytest.raises(DomainError):
        merit_order_cost(two_segment_fleet(), -1.0)


def test_merit_order_sorts_and_validates():
    fleet = FleetCurve((Segment(1.0, 0.0, 30.0), Segment(1.0, 0.0, 10.0)))
    assert [s.c1 for s in fleet.segments] == [10.0, 30.0]
    with pytest.raises(DomainError):
        # within-segment marginal tops out above the next segment's start
        FleetCurve((Segment(10.0, 0.0, 10.0, 2.0), Segment(10.0, 0.0, 11.0)))


# ---------------------------------------------------------------------------
# polynomial fitting
# ---------------------------------------------------------------------------


def test_fit_recovers_single_quadratic_segment():
    fleet = FleetCurve((Segment(100.0, 0.0, 5.0, 0.02),))
    fitted = fit_polynomial_to_merit_curve(fleet, degree=2)
    assert fitted.coeffs[0] == pytest.approx(0.0, abs=1e-8)
    assert fitted.coeffs[1] == pytest.approx(5.0, abs=1e-8)
    assert fitted.coeffs[2] == pytest.approx(0.02, abs=1e-10)
    assert fitted.rmse <= 1e-8


def test_fit_two_linear_segments_curves_upward():
    fleet = FleetCurve((Segment(50.0, 0.0, 10.0), Segment(50.0, 0.0, 20.0)))
    fitted = fit_polynomial_to_merit_curve(fleet, degree=2)
    assert fitted.coeffs[2] > 0.0
    # Independent least-squares oracle on the same grid.
    grid = np.linspace(0, 100, 200)
    y = np.array([merit_order_cost(fleet, q) for q in grid])
    ref = np.polynomial.polynomial.polyfit(grid, y, 2)
    assert fitted.coeffs[2] == pytest.approx(float(ref[2]), rel=1e-6)


def test_fit_degree_bounds():
    with pytest.raises(UnsupportedDegreeError):
        fit_polynomial_to_merit_curve(two_segment_fleet(), degree=0)
    with pytest.raises(UnsupportedDegreeError):
        fit_polynomial_to_merit_curve(two_segment_fleet(), degree=5)


def test_fit_rmse_non_increasing_in_degree():
    fleet = FleetCurve(tuple(Segment(10.0, 0.0, 10.0 * 1.3**i) for i in range(8)))
    domain = (0.1 * fleet.total_capacity, fleet.total_capacity)
    rmses = [fit_polynomial_to_merit_curve(fleet, degree=d, domain=domain).rmse for d in range(1, 5)]
    assert all(a >= b - 1e-12 for a, b in zip(rmses, rmses[1:]))


# ---------------------------------------------------------------------------
# StorageSpec validation and fleet CSV
# ---------------------------------------------------------------------------


def test_storage_spec_validation():
    with pytest.raises(DomainError):
        StorageSpec(p_max=0, e_max=10, eta=0.9, marginal_cost=1, e_init=0)
    with pytest.raises(DomainError):
        StorageSpec(p_max=5, e_max=10, eta=1.2, marginal_cost=1, e_init=0)
    with pytest.raises(DomainError):
        StorageSpec(p_max=5, e_max=10, eta=0.9, marginal_cost=1, e_init=11)


def test_fleet_csv_round_trip(tmp_path):
    path = tmp_path / "fleet.csv"
    path.write_text("gen_id, capacity_mw, c0, c1, c2\ng1,50,0,10,0.01\ng2,30,0,25,0\n")
    fleet = load_fleet_csv(path)
    assert fleet.total_capacity == pytest.approx(80.0)
    assert fleet.segments[0].c1 == 10.0


def test_fleet_csv_schema_errors(tmp_path):
    bad_header = tmp_path / "a.csv"
    bad_header.write_text("id,cap\n1,2\n")
    with pytest.raises(SchemaError):
        load_fleet_csv(bad_header)
    bad_row = tmp_path / "b.csv"
    bad_row.write_text("gen_id, capacity_mw, c0, c1, c2\ng1,50,0,ten,0\n")
    with pytest.raises(SchemaError, match=":2:"):
        load_fleet_csv(bad_row)
