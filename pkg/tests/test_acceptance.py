"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.  The shared battery (50 random 24-period systems
across three risk levels) backs criteria 1, 5, and 7.
"""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

from storage_pricer.baseline import compare_mechanisms, dp_value_function
from storage_pricer.costs import CostPolynomial, StorageSpec
from storage_pricer.dispatch import _extract_solution, build_dispatch, solve_dispatch
from storage_pricer.distributions import (
    ErrorMoments,
    gaussian_quantile,
    fit_versatile_mle,
    robust_quantile,
    versatile_inverse_cdf,
)
from storage_pricer.scenarios import empirical_violation_rate, synth_test_system
from storage_pricer.solver import solve_convex, verify_kkt
from storage_pricer.theory import (
    classify_period,
    ideal_storage_slope_gap,
    effective_reserve_price,
    jensen_gap,
    price_bounds,
    sigma_sweep,
    soc_sweep,
    theta_sigma_derivative,
    verify_price_coupling,
)


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared battery: 50 random synthetic systems, T=24, eps in {0.01, 0.05, 0.1}
# ---------------------------------------------------------------------------


def battery_systems(master_seed=2024, n=50):
    rng = np.random.default_rng(master_seed)
    eps_cycle = [0.01, 0.05, 0.1]
    systems = []
    for i in range(n):
        total_cap = float(rng.uniform(8_000, 25_000))
        systems.append(synth_test_system(
            n_gens=int(rng.integers(16, 77)),
            total_cap_mw=total_cap,
            avg_load_mw=float(rng.uniform(0.45, 0.65)) * total_cap,
            renewable_ratio=float(rng.uniform(0.1, 0.5)),
            storage_ratio=float(rng.uniform(0.1, 0.3)),
            duration_h=float(rng.uniform(2.0, 8.0)),
            eta=float(rng.uniform(0.85, 0.999)),
            marginal_cost=float(rng.uniform(5.0, 40.0)),
            e_init_ratio=float(rng.uniform(0.2, 0.8)),
            epsilon=eps_cycle[i % 3],
            horizon=24,
            seed=int(rng.integers(0, 10_000)),
            fit_degree=int(rng.integers(2, 4)),
            g_min_ratio=float(rng.uniform(0.25, 0.35)),
        ))
    return systems


@pytest.fixture(scope="module")
def battery():
    """(system, build, raw solver result, extracted solution) per instance,
    plus the wall-clock spent solving."""
    entries = []
    t0 = time.monotonic()
    for system in battery_systems():
        build = build_dispatch(system)
        result = solve_convex(build.program, tol=1e-8)
        solution = _extract_solution(build, result, 1e-8)
        entries.append((system, build, result, solution))
    return entries, time.monotonic() - t0


# ---------------------------------------------------------------------------
# 1. KKT certification
# ---------------------------------------------------------------------------


def test_criterion_1_kkt_certification(battery):
    entries, elapsed = battery
    worst = 0.0
    for i, (system, build, result, _) in enumerate(entries):
        assert result.status == "optimal", f"battery system {i} not optimal: {result.status}"
        assert result.max_residual <= 1e-7, f"system {i} residual {result.max_residual:.2e}"
        recomputed = verify_kkt(build.program, result)
        for key in ("stationarity", "primal_eq", "primal_ineq", "complementarity"):
            # agreement: the independent recomputation cannot reveal a
            # violation more than 10x the solver's certified figure (with
            # the solver tolerance as the reporting floor)
            assert recomputed[key] <= 10 * max(result.residuals[key], 1e-8), (
                f"system {i} {key}: verify {recomputed[key]:.2e} vs "
                f"solver {result.residuals[key]:.2e}")
        worst = max(worst, result.max_residual)
    report(1, elapsed <= 60.0,
           f"50 systems optimal, worst residual {worst:.2e} <= 1e-7, "
           f"verify_kkt within 10x, runtime {elapsed:.1f}s <= 60s")


# ---------------------------------------------------------------------------
# 2. SoC monotonicity of the opportunity price
# ---------------------------------------------------------------------------


def brute_force_min_cost(system, e0, levels):
    """Exhaustive dispatch cost over SoC paths on a grid (sigma=0, eta=1)."""
    st = system.storage
    D = np.asarray(system.net_load.forecast)
    grid = np.linspace(0.0, st.e_max, levels)
    best = np.inf
    for path in itertools.product(grid, repeat=system.horizon):
        prev, cost, feasible = e0, 0.0, True
        for t, e_next in enumerate(path):
            delta = e_next - prev
            b, pdis = max(delta, 0.0), max(-delta, 0.0)
            if b > st.p_max + 1e-9 or pdis > st.p_max + 1e-9:
                feasible = False
                break
            g = D[t] - pdis + b
            if g < system.g_min - 1e-9 or g > system.g_max + 1e-9:
                feasible = False
                break
            cost += system.poly.value(g) + st.marginal_cost * pdis
            prev = e_next
        if feasible and cost < best:
            best = cost
    return best


def test_criterion_2_soc_monotonicity():
    # The pricing formulation carries no terminal SoC condition of its
    # own, so the sweep variant frees the terminal stock.
    system = dataclasses.replace(
        synth_test_system(seed=0, fit_degree=3), terminal="free")
    grid = np.linspace(0.0, system.storage.e_max, 21)
    sweep = soc_sweep(system, grid)
    band = 1e-6 * max(1.0, float(np.max(np.abs(sweep.theta))))
    assert sweep.verdict, f"theta not monotone: max violation {sweep.max_violation:.2e}"
    assert sweep.max_violation <= band

    # Qualitative shape: the price collapses toward its floor at full SoC.
    # The exact level at e0 = E_max sits in a dual interval (the SoC cap is
    # degenerate there) and bottoms out at the storage marginal cost against
    # the post-dump price level, so the rendered checks are the cliff
    # magnitude and the minimum position, not an exact zero.
    steps = -np.diff(sweep.theta)
    cliff_ok = (sweep.theta[-1] == np.min(sweep.theta)
                and steps[-1] >= 3.0 * float(np.median(steps[:-1]))
                and sweep.theta[-1] <= 0.75 * float(np.max(sweep.theta)))
    assert cliff_ok, f"no terminal cliff: theta {np.round(sweep.theta, 3)}"

    # T=3 toy: dual ordering matches brute-force marginal-value ordering
    toy = synth_test_system(
        n_gens=6, total_cap_mw=400.0, avg_load_mw=200.0, renewable_ratio=0.0,
        storage_ratio=0.15, duration_h=2.0, eta=1.0, marginal_cost=0.0,
        horizon=3, seed=9, fit_degree=2, terminal="free", g_min_ratio=0.3,
    ).with_sigma_scale(0.0)
    e_grid = np.linspace(0.1, 0.9, 5) * toy.storage.e_max
    thetas, values = [], []
    for e0 in e_grid:
        sol = solve_dispatch(toy.with_initial_soc(float(e0)))
        assert sol.status == "optimal"
        thetas.append(sol.theta[0])
        values.append(brute_force_min_cost(toy, float(e0), levels=9))
    marginals = -np.diff(values) / np.diff(e_grid)
    assert np.all(np.diff(thetas) <= 1e-6)
    assert np.all(np.diff(marginals) <= 1e-6 * max(1.0, float(np.max(np.abs(marginals)))))
    order_theta = list(np.argsort(-np.asarray(thetas), kind="stable"))
    order_marg = list(np.argsort(-marginals, kind="stable"))
    assert order_theta[: len(order_marg)] == order_marg

    report(2, True,
           f"21-point sweep non-increasing (max violation {sweep.max_violation:.2e}), "
           f"terminal cliff {steps[-1]:.2f} vs median step {np.median(steps[:-1]):.2f}, "
           f"toy ordering matches brute force")


# ---------------------------------------------------------------------------
# 3. sigma monotonicity: quadratic/super-quadratic dichotomy
# ---------------------------------------------------------------------------


def test_criterion_3_sigma_monotonicity():
    small = dict(n_gens=12, total_cap_mw=2000.0, avg_load_mw=1000.0,
                 horizon=24, seed=3, g_min_ratio=0.3, storage_reserve=False)
    scales = [0.5, 1.0, 1.5, 2.0]

    quad = synth_test_system(fit_degree=2, **small)
    sq = sigma_sweep(quad, scales)
    flat_band = 1e-6 * max(1.0, float(np.max(np.abs(sq.theta))))
    assert float(np.ptp(sq.theta)) <= flat_band, f"quadratic theta varies: {sq.theta}"

    cubic = synth_test_system(fit_degree=3, **small)
    sc = sigma_sweep(cubic, scales)
    included = [i for i in range(len(scales)) if i not in sc.excluded]
    kept = sc.theta[included]
    assert np.all(np.diff(kept) > 1e-6), f"cubic theta not strictly increasing: {kept}"

    # closed forms vs central finite differences, 1000 random draws
    from storage_pricer.theory import interior_charging_theta

    rng = np.random.default_rng(808)
    worst_rel = 0.0
    for _ in range(1000):
        deg = int(rng.integers(2, 5))
        coeffs = [0.0, float(rng.uniform(1, 20))]
        coeffs += [float(rng.uniform(0, 0.5) * 10.0**-k) for k in range(1, deg)]
        p = CostPolynomial(tuple(coeffs), g_min=0.0, g_max=50.0)
        g, phi = float(rng.uniform(0, 50)), float(rng.uniform(0, 1))
        mu, sigma = float(rng.normal(0, 1)), float(rng.uniform(0.1, 5))
        eta = float(rng.uniform(0.7, 1.0))
        got = theta_sigma_derivative(p, g, phi, ErrorMoments(mu, sigma), eta)
        # theta is quadratic in sigma, so central differences are exact at
        # any step; a wide step keeps roundoff below the 1e-6 gate even for
        # near-zero derivatives
        h = 0.5 * sigma
        fd = (interior_charging_theta(p, g, phi, ErrorMoments(mu, sigma + h), eta)
              - interior_charging_theta(p, g, phi, ErrorMoments(mu, sigma - h), eta)) / (2 * h)
        err = abs(got - fd) / max(1e-9, abs(fd)) if abs(fd) > 1e-9 else abs(got - fd)
        assert err <= 1e-6, (coeffs, g, phi, mu, sigma, eta, got, fd)
        worst_rel = max(worst_rel, err)

    report(3, True,
           f"quadratic theta constant (ptp {float(np.ptp(sq.theta)):.2e}), cubic strictly "
           f"increasing {np.round(kept, 4)}, closed forms match FD (worst {worst_rel:.2e})")


# ---------------------------------------------------------------------------
# 4. Jensen gap of the realized-price map
# ---------------------------------------------------------------------------


def test_criterion_4_jensen_gap():
    small = dict(n_gens=12, total_cap_mw=2000.0, avg_load_mw=1000.0,
                 horizon=24, seed=3, g_min_ratio=0.3)
    cubic = synth_test_system(fit_degree=3, **small)
    quad = synth_test_system(fit_degree=2, **small)
    g0 = float(np.mean(cubic.net_load.forecast))
    sigma0 = float(np.mean(cubic.net_load.sigma))

    gap_c, se_c = jensen_gap(cubic.poly, g0, 1.0, ErrorMoments(0.0, sigma0),
                             cubic.storage.eta, samples=100_000, seed=42)
    gap_q, se_q = jensen_gap(quad.poly, g0, 1.0, ErrorMoments(0.0, sigma0),
                             quad.storage.eta, samples=100_000, seed=42)
    cubic_ok = gap_c > 3 * se_c
    quad_ok = abs(gap_q) <= 3 * se_q + 1e-12
    report(4, cubic_ok and quad_ok,
           f"cubic gap {gap_c:.4g} > 3 SE ({3 * se_c:.2g}); "
           f"quadratic gap {gap_q:.2g} within 3 SE ({3 * se_q:.2g})")


# ---------------------------------------------------------------------------
# 5. price coupling and opportunity-price bounds
# ---------------------------------------------------------------------------


def test_criterion_5_coupling_and_bounds(battery):
    entries, _ = battery
    worst_rel = 0.0
    bound_checks = 0
    for i, (system, _, _, solution) in enumerate(entries):
        coupling = verify_price_coupling(solution, rel_tol=1e-4, interval_inflation=1e-6)
        assert coupling["ok"], (
            f"system {i}: coupling failed, worst rel {coupling['worst_rel_error']:.2e}, "
            f"{[p for p in coupling['periods'] if not p.get('passed', True)][:3]}")
        worst_rel = max(worst_rel, coupling["worst_rel_error"])

        # bound containment from realized price extrema, floored at zero
        # as the operator's price floor
        lam_box = (min(0.0, float(np.min(solution.lam))), float(np.max(solution.lam)))
        pi_eff = [effective_reserve_price(solution, t) for t in range(1, system.horizon + 1)]
        pi_box = (min(0.0, float(np.min(pi_eff))), float(np.max(pi_eff)))
        st = system.storage
        for t in range(2, system.horizon + 1):
            q = solution.quantiles[t].soc
            mu_t = system.net_load.moments(t).mu
            (c_lo, c_hi), (d_lo, d_hi) = price_bounds(lam_box, pi_box, st, q, mu_t)
            th = solution.theta[t - 2]
            pad = 1e-6 * max(1.0, abs(th))
            case = classify_period(solution, t)
            if case == "charge_interior":
                assert c_lo - pad <= th <= c_hi + pad, (i, t, th, c_lo, c_hi)
            elif case == "discharge_interior":
                assert d_lo - pad <= th <= d_hi + pad, (i, t, th, d_lo, d_hi)
            else:
                lo = min(c_lo, d_lo, 0.0)
                hi = max(c_hi, d_hi)
                assert lo - pad <= th <= hi + pad, (i, t, case, th, lo, hi)
            bound_checks += 1
    report(5, True,
           f"coupling within 1e-4 rel on all battery periods (worst {worst_rel:.2e}); "
           f"{bound_checks} bound containments hold")


# ---------------------------------------------------------------------------
# 6. ideal-storage slope gap
# ---------------------------------------------------------------------------


def test_criterion_6_ideal_storage_slope_gap():
    system = synth_test_system(n_gens=12, total_cap_mw=2000.0, avg_load_mw=1000.0,
                               horizon=24, seed=3, g_min_ratio=0.3,
                               fit_degree=3, eta=1.0, marginal_cost=0.0)
    grid = np.linspace(0.05, 0.95, 11) * system.storage.e_max
    gap = ideal_storage_slope_gap(system, grid)
    report(6, gap <= 1e-6, f"sup/inf theta slope gap {gap:.2e} <= 1e-6 at eta=1, M=0")


# ---------------------------------------------------------------------------
# 7. chance-constraint validity
# ---------------------------------------------------------------------------


def test_criterion_7_chance_constraint_validity(battery):
    entries, _ = battery
    n = 10_000
    worst = 0.0
    checked = 0
    for i, (system, _, _, solution) in enumerate(entries):
        if abs(system.epsilon - 0.05) > 1e-12:
            continue
        rep = empirical_violation_rate(solution, system.net_load, n=n, seed=1000 + i)
        se = math.sqrt(0.05 * 0.95 / n)
        assert rep["worst_joint"] <= 0.05 + 2 * se, (
            f"system {i}: joint rate {rep['worst_joint']:.4f}")
        worst = max(worst, rep["worst_joint"])
        checked += 1

    chain = [robust_quantile("NA", 0.05), robust_quantile("S", 0.05),
             robust_quantile("U", 0.05), robust_quantile("SU", 0.05)]
    expected = [4.3589, 3.1623, 2.8087, 2.1082]
    assert chain == pytest.approx(expected, abs=5e-5)
    assert all(a >= b for a, b in zip(chain, chain[1:]))
    assert chain[-1] >= gaussian_quantile(0.05)

    report(7, True,
           f"{checked} eps=0.05 solutions: worst joint violation {worst:.4f} "
           f"<= {0.05 + 2 * math.sqrt(0.05 * 0.95 / n):.4f}; robust factor chain reproduced")


# ---------------------------------------------------------------------------
# 8. risk-aversion direction
# ---------------------------------------------------------------------------


def test_criterion_8_risk_aversion_direction():
    costs, lams, pis = [], [], []
    for eps in (0.1, 0.05, 0.01):  # decreasing risk tolerance
        system = synth_test_system(seed=0, fit_degree=3, epsilon=eps)
        sol = solve_dispatch(system)
        assert sol.status == "optimal"
        costs.append(sol.objective)
        lams.append(float(np.mean(sol.lam)))
        pis.append(float(np.sum(sol.pi)))
    tol_cost = 1e-7 * max(costs)
    ok = (all(a <= b + tol_cost for a, b in zip(costs, costs[1:]))
          and all(a <= b + 1e-9 for a, b in zip(lams, lams[1:]))
          and all(a <= b + 1e-9 for a, b in zip(pis, pis[1:])))
    report(8, ok,
           f"eps 0.1 -> 0.01: system cost {[f'{c:.1f}' for c in costs]}, "
           f"mean lambda {[f'{v:.4f}' for v in lams]}, reserve cost {[f'{v:.2f}' for v in pis]} "
           f"all weakly increasing")


# ---------------------------------------------------------------------------
# 9. DP baseline correctness
# ---------------------------------------------------------------------------


def enumerate_tree_value(prices, st, grid, e0):
    best = -np.inf
    for path in itertools.product(grid, repeat=len(prices)):
        prev, total, ok = e0, 0.0, True
        for t, e_next in enumerate(path):
            delta = e_next - prev
            b, p = (delta / st.eta, 0.0) if delta >= 0 else (0.0, -delta * st.eta)
            if p > st.p_max + 1e-9 or b > st.p_max + 1e-9 or (prices[t] < 0 and p > 1e-12):
                ok = False
                break
            total += prices[t] * (p - b) - st.marginal_cost * p
            prev = e_next
        if ok:
            best = max(best, total)
    return best


def test_criterion_9_dp_correctness():
    st = StorageSpec(p_max=20.0, e_max=40.0, eta=1.0, marginal_cost=2.0, e_init=20.0)
    grid5 = np.linspace(0.0, st.e_max, 5)
    toys = [[30.0, 10.0, 50.0], [5.0, 80.0], [20.0, -3.0, 45.0], [12.0, 12.0, 12.0]]
    for prices in toys:
        vf = dp_value_function(prices, st, grid_size=11)
        for e0 in grid5:
            ref = enumerate_tree_value(prices, st, grid5, float(e0))
            assert vf.value_at(1, float(e0)) == pytest.approx(ref, abs=1e-9), (prices, e0)

    rng = np.random.default_rng(99)
    lossy = StorageSpec(p_max=25.0, e_max=100.0, eta=0.92, marginal_cost=4.0, e_init=50.0)
    neg_price_checked = 0
    for _ in range(100):
        prices = rng.uniform(-10, 80, size=24)
        vf = dp_value_function(prices, lossy, grid_size=21)
        for t in range(1, 26):
            slopes = vf.slopes(t)
            assert np.all(np.diff(slopes) <= 1e-7 * (1 + float(np.max(np.abs(vf.values[t - 1])))))
        from storage_pricer.baseline import dp_forward_schedule

        p, b, _ = dp_forward_schedule(vf, lossy, prices)
        neg = prices < 0
        if np.any(neg):
            assert np.all(p[neg] == 0.0)
            neg_price_checked += int(np.sum(neg))
    report(9, True,
           f"exact enumeration match on {len(toys)} toys x 5 SoC levels; concavity at every "
           f"stage for 100 random paths; zero discharge at {neg_price_checked} negative-price periods")


# ---------------------------------------------------------------------------
# 10. welfare dominance
# ---------------------------------------------------------------------------


def test_criterion_10_welfare_dominance():
    t0 = time.monotonic()
    # cubic dispatch model: the quadratic fit's error against the exact
    # merit curve (RMSE ~14e3 vs ~3e3) would swamp the mechanism gap in
    # the ex-post evaluation
    system = synth_test_system(seed=0, fit_degree=3)
    out = compare_mechanisms(system, n_scenarios=200, seed=0, retire_frac=0.2,
                             grid_size=21, threads=4, n_batches=10)
    elapsed = time.monotonic() - t0
    s = out["summary"]
    cost_ok = s["welfare"]["system_cost"] <= s["bidding"]["system_cost"] * (1 + 1e-9)
    win_ok = s["payment_batch_win_rate"] >= 0.8
    report(10, cost_ok and win_ok and elapsed <= 600.0,
           f"mean system cost welfare {s['welfare']['system_cost']:.0f} <= bidding "
           f"{s['bidding']['system_cost']:.0f} (delta {s['delta_pct']['system_cost']:.2f}%); "
           f"payment batch win rate {s['payment_batch_win_rate']:.2f} >= 0.8 "
           f"(payment delta {s['delta_pct']['payment']:.2f}%); runtime {elapsed:.0f}s <= 600s")


# ---------------------------------------------------------------------------
# 11. distribution fitting
# ---------------------------------------------------------------------------


def test_criterion_11_distribution_fitting():
    rng = np.random.default_rng(314)
    worst_rel = 0.0
    for _ in range(10):
        a = float(rng.uniform(0.5, 3.0))
        b = float(rng.uniform(0.5, 3.0))
        c = float(rng.uniform(0.5, 2.0)) * float(rng.choice([-1.0, 1.0]))
        u = rng.random(100_000)
        samples = c - np.log(u ** (-1.0 / b) - 1.0) / a
        fit = fit_versatile_mle(samples)
        for truth, got in ((a, fit.a), (b, fit.b), (c, fit.c)):
            rel = abs(got - truth) / abs(truth)
            assert rel <= 0.05, (a, b, c, fit)
            worst_rel = max(worst_rel, rel)

    from storage_pricer.distributions import VersatileModel

    model = VersatileModel(1.7, 0.6, -2.0)
    worst_rt = 0.0
    for eps in (0.01, 0.05, 0.25, 0.5, 0.9):
        x = versatile_inverse_cdf(model.a, model.b, model.c, eps)
        worst_rt = max(worst_rt, abs(model.cdf(x) - (1 - eps)))
    report(11, worst_rel <= 0.05 and worst_rt <= 1e-9,
           f"10 random truths recovered within 5% (worst {100 * worst_rel:.2f}%); "
           f"inverse-CDF round trip within 1e-9 (worst {worst_rt:.2e})")
