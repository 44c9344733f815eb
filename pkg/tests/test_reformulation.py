"""Risk allocation and deterministic constraint rows."""

import numpy as np
import pytest

from storage_pricer.costs import StorageSpec
from storage_pricer.distributions import ErrorMoments, GaussianModel
from storage_pricer.errors import BuildError, DomainError
from storage_pricer.reformulation import (
    allocate_risk,
    build_deterministic_constraints,
    make_period_quantiles,
)


def storage():
    return StorageSpec(p_max=50.0, e_max=100.0, eta=1.0, marginal_cost=5.0, e_init=50.0)


# ---------------------------------------------------------------------------
# allocate_risk
# ---------------------------------------------------------------------------


def test_equal_split():
    alloc = allocate_risk(0.05, 5)
    assert alloc.epsilons == tuple([0.01] * 5)
    assert sum(alloc.epsilons) <= alloc.epsilon_total + 1e-15


def test_custom_weights():
    alloc = allocate_risk(0.05, 2, policy=[0.8, 0.2])
    assert alloc.epsilons == pytest.approx((0.04, 0.01))


def test_allocate_risk_domain_errors():
    with pytest.raises(DomainError):
        allocate_risk(0.05, 0)
    with pytest.raises(DomainError):
        allocate_risk(1.5, 3)
    with pytest.raises(DomainError):
        allocate_risk(0.05, 2, policy=[0.8, 0.3])
    with pytest.raises(DomainError):
        allocate_risk(0.05, 2, policy=[1.2, -0.2])


# ---------------------------------------------------------------------------
# quantile bundles
# ---------------------------------------------------------------------------


def test_bonferroni_split_levels():
    q = make_period_quantiles(ErrorMoments(0, 10), GaussianModel(), 0.05)
    assert q.gen.epsilon == pytest.approx(0.025)
    assert q.soc.epsilon == pytest.approx(0.025)
    assert q.power.epsilon == pytest.approx(0.05)
    assert q.power.d_tilde == pytest.approx(16.449, abs=2e-3)
    assert q.gen.d_tilde == pytest.approx(19.600, abs=2e-3)


# ---------------------------------------------------------------------------
# build_deterministic_constraints
# ---------------------------------------------------------------------------


def quantile_map(horizon, sigma, epsilon=0.05, mu=0.0):
    return {
        t: make_period_quantiles(ErrorMoments(mu, sigma), GaussianModel(), epsilon)
        for t in range(1, horizon + 1)
    }


def test_sigma_zero_collapses_to_nominal_rows():
    rows = build_deterministic_constraints(2, (10.0, 200.0), storage(), quantile_map(2, 0.0))
    by_tag = {r.tag: r for r in rows.rows}
    assert by_tag["nu_lo[1]"].coeffs == {"g[1]": -1.0, "phi[1]": -0.0}
    assert by_tag["nu_lo[1]"].rhs == -10.0
    assert by_tag["nu_hi[2]"].coeffs == {"g[2]": 1.0, "phi[2]": 0.0}
    assert by_tag["alpha_hi[1]"].rhs == 50.0
    assert by_tag["iota_lo[1]"].coeffs == {"p[1]": 1.0, "psi[1]": 0.0, "e[1]": -1.0}
    assert by_tag["iota_hi[2]"].coeffs == {"e[2]": 1.0, "b[2]": 1.0, "psi[2]": -0.0}


def test_discharge_row_matches_quantile_oracle():
    # d_tilde at the full epsilon=0.05 is 1.6449 * 10 = 16.449.
    rows = build_deterministic_constraints(1, (0.0, 500.0), storage(), quantile_map(1, 10.0))
    row = rows.row("beta_hi", 1)
    assert row.coeffs["p[1]"] == 1.0
    assert row.coeffs["psi[1]"] == pytest.approx(16.449, abs=2e-3)
    assert row.rhs == 50.0


def test_soc_upper_row_signs():
    # e_t + eta*b - eta*d_hat*psi <= E_max with d_hat = -19.6*sigma/10 at eps/2.
    rows = build_deterministic_constraints(1, (0.0, 500.0), storage(), quantile_map(1, 10.0))
    row = rows.row("iota_hi", 1)
    assert row.rhs == 100.0
    assert row.coeffs["e[1]"] == 1.0
    assert row.coeffs["b[1]"] == pytest.approx(1.0)
    # -eta * d_hat > 0 because d_hat < 0: tightening, never clamped.
    assert row.coeffs["psi[1]"] == pytest.approx(19.600, abs=2e-3)


def test_missing_quantiles_names_slot():
    qmap = quantile_map(3, 1.0)
    del qmap[2]
    with pytest.raises(BuildError, match="period 2"):
        build_deterministic_constraints(3, (0.0, 100.0), storage(), qmap)


def test_epsilon_tag_audit():
    """Equal split across the two sides of each joint group."""
    rows = build_deterministic_constraints(3, (0.0, 100.0), storage(), quantile_map(3, 2.0, epsilon=0.08))
    for r in rows.rows:
        if r.kind.startswith("nu") or r.kind.startswith("iota"):
            assert r.epsilon == pytest.approx(0.04)
        elif r.kind in ("alpha_hi", "beta_hi"):
            assert r.epsilon == pytest.approx(0.08)


def test_no_storage_emits_generator_rows_only():
    rows = build_deterministic_constraints(2, (0.0, 100.0), None, quantile_map(2, 1.0))
    assert sorted({r.kind for r in rows.rows}) == ["nu_hi", "nu_lo"]


def _violations(rows, point):
    out = []
    for r in rows.rows:
        lhs = sum(c * point.get(v, 0.0) for v, c in r.coeffs.items())
        out.append(max(0.0, lhs - r.rhs))
    return np.array(out)


def test_conservatism_larger_sigma_shrinks_feasible_set():
    """Any nonnegative point feasible at 2*sigma stays feasible at sigma."""
    rng = np.random.default_rng(8)
    small = build_deterministic_constraints(2, (0.0, 100.0), storage(), quantile_map(2, 5.0))
    big = build_deterministic_constraints(2, (0.0, 100.0), storage(), quantile_map(2, 10.0))
    for _ in range(200):
        point = {}
        for t in (1, 2):
            point[f"g[{t}]"] = float(rng.uniform(0, 120))
            point[f"p[{t}]"] = float(rng.uniform(0, 60))
            point[f"b[{t}]"] = float(rng.uniform(0, 60))
            point[f"phi[{t}]"] = float(rng.uniform(0, 1))
            point[f"psi[{t}]"] = float(rng.uniform(0, 1))
            point[f"e[{t}]"] = float(rng.uniform(0, 110))
        if np.all(_violations(big, point) <= 1e-12):
            assert np.all(_violations(small, point) <= 1e-9)
