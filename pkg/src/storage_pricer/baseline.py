"""Profit-maximizing bidding benchmark.

Pipeline: Monte Carlo price simulation (deterministic multi-period dispatch
on realized net loads), a backward dynamic program over the storage SoC
giving its opportunity value function, charge/discharge step bids from the
value-function slopes, bid-based market clearing, and a welfare comparison
between the two pricing mechanisms on common realized scenarios.

The stage maximization of the dynamic program is solved exactly over
continuous actions: with a piecewise-linear concave continuation value and
a linear stage payoff, the optimum lands either on a power bound or on an
action that maps the stock onto a knot, so scanning those candidates is
exact.  Exactness keeps the value function provably concave stage by stage,
which the bid construction relies on.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from ._parallel import parallel_map
from .costs import (
    expected_cost_derivatives,
    expected_gen_cost,
    fit_polynomial_to_merit_curve,
    marginal_expected_cost,
    merit_order_cost,
)
from .dispatch import solve_dispatch
from .errors import ConfigurationError, DomainError, SolverError
from .reformulation import make_period_quantiles
from .scenarios import sample_net_load
from .solver import ConvexProgram, solve_convex

_EVAL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class PriceScenarioSet:
    """Energy prices over (scenario x period) from Monte Carlo dispatch."""

    lam: np.ndarray
    seed: int
    source: str
    clipped: tuple = ()

    def mean_path(self):
        return np.mean(self.lam, axis=0)


def deterministic_variant(system, realized):
    """Same system with the forecast replaced by a realization and sigma = 0."""
    net = dataclasses.replace(
        system.net_load,
        forecast=tuple(float(v) for v in realized),
        sigma=tuple(0.0 for _ in realized),
    )
    return dataclasses.replace(system, net_load=net)


def simulate_price_scenarios(system, n_scenarios, seed, threads=None):
    """Solve the deterministic multi-period dispatch on each realized
    net-load trajectory and record the energy prices.

    Realizations outside the fleet's feasible band are clipped into
    [g_min, g_max] and the scenario index is flagged.
    """
    if n_scenarios < 1:
        raise DomainError(f"need n >= 1 scenarios, got {n_scenarios}")
    draws = sample_net_load(system.net_load, n_scenarios, seed)
    lo, hi = system.g_min, system.g_max
    clipped = tuple(int(i) for i in np.where(
        np.any((draws < lo) | (draws > hi), axis=1))[0])
    draws = np.clip(draws, lo, hi)

    def solve_one(i):
        sol = solve_dispatch(deterministic_variant(system, draws[i]), verify=False)
        if sol.status != "optimal":
            raise SolverError(f"price scenario {i} failed: {sol.status}", status=sol.status)
        return sol.lam

    lam = np.array(parallel_map(solve_one, range(n_scenarios), threads))
    return PriceScenarioSet(lam=lam, seed=seed, source="monte-carlo-dispatch", clipped=clipped)


@dataclass
class ValueFunction:
    """Piecewise-linear opportunity value V_t(e) per period, on a SoC grid.

    ``values[t - 1]`` holds V_t on the grid for t = 1 .. T+1; V_{T+1} is the
    terminal value.  Concavity (non-increasing slopes) holds at every stage.
    """

    grid: np.ndarray
    values: list

    @property
    def horizon(self):
        return len(self.values) - 1

    def value_at(self, t, e):
        return float(np.interp(e, self.grid, self.values[t - 1]))

    def slopes(self, t):
        return np.diff(self.values[t - 1]) / np.diff(self.grid)


def _stage_candidates(e, grid, p_cap, b_cap, eta):
    """(p, b, next_stock) candidate arrays for the exact stage maximization.

    The stage payoff is linear in the action and the continuation value is
    piecewise-linear concave, so the continuous-action optimum lands on a
    power bound or on an action that maps the stock onto a grid knot.
    """
    ps, bs, nxt = [0.0], [0.0], [e]
    p_max_here = min(p_cap, e * eta)
    if p_max_here > 0:
        ps.append(p_max_here)
        bs.append(0.0)
        nxt.append(e - p_max_here / eta)
        below = grid[(grid < e) & ((e - grid) * eta <= p_max_here + 1e-12)]
        ps.extend(np.minimum((e - below) * eta, p_max_here))
        bs.extend(0.0 for _ in below)
        nxt.extend(below)
    b_max_here = min(b_cap, (grid[-1] - e) / eta)
    if b_max_here > 0:
        ps.append(0.0)
        bs.append(b_max_here)
        nxt.append(e + b_max_here * eta)
        above = grid[(grid > e) & ((grid - e) / eta <= b_max_here + 1e-12)]
        ps.extend(0.0 for _ in above)
        bs.extend(np.minimum((above - e) / eta, b_max_here))
        nxt.extend(above)
    return np.asarray(ps), np.asarray(bs), np.asarray(nxt)


def dp_value_function(prices, storage, grid_size=21, terminal_value=0.0):
    """Backward recursion of the storage opportunity value on a SoC grid.

    ``prices`` is the energy-price path the price-taker plans against.
    Discharging is forbidden at negative prices.  Raises ConfigurationError
    when the grid cannot resolve a full-power move.
    """
    prices = np.asarray(prices, dtype=float)
    T = prices.size
    if grid_size < 11:
        raise ConfigurationError(f"grid_size must be >= 11, got {grid_size}")
    grid = np.linspace(0.0, storage.e_max, grid_size)
    de = grid[1] - grid[0]
    if de > storage.p_max * min(storage.eta, 1.0 / storage.eta) + 1e-12:
        raise ConfigurationError(
            f"grid spacing {de:.4g} too coarse for the {storage.p_max:.4g} MW power step")
    values = [None] * (T + 1)
    values[T] = np.full(grid_size, float(terminal_value))
    M, eta = storage.marginal_cost, storage.eta
    for t in range(T, 0, -1):
        lam = float(prices[t - 1])
        nxt = values[t]
        cur = np.empty(grid_size)
        p_cap = storage.p_max if lam >= 0.0 else 0.0
        for k, e in enumerate(grid):
            ps, bs, e_next = _stage_candidates(e, grid, p_cap, storage.p_max, eta)
            vals = lam * (ps - bs) - M * ps + np.interp(e_next, grid, nxt)
            cur[k] = float(np.max(vals))
        slopes = np.diff(cur) / de
        if np.any(np.diff(slopes) > 1e-7 * (1.0 + float(np.max(np.abs(cur))))):
            raise RuntimeError(f"value function lost concavity at stage {t}")
        values[t - 1] = cur
    return ValueFunction(grid=grid, values=values)


def dp_value_function_per_scenario(price_set, storage, grid_size=21, terminal_value=0.0):
    """Scenario-averaged value function: one backward pass per simulated
    price path, averaging the per-stage values across scenarios.

    The default pipeline runs the recursion once on the scenario-mean path;
    this is the documented alternative mode.
    """
    lam = np.atleast_2d(price_set.lam if hasattr(price_set, "lam") else np.asarray(price_set))
    vfs = [dp_value_function(row, storage, grid_size=grid_size, terminal_value=terminal_value)
           for row in lam]
    grid = vfs[0].grid
    values = [np.mean([vf.values[t] for vf in vfs], axis=0) for t in range(len(vfs[0].values))]
    return ValueFunction(grid=grid, values=values)


def dp_forward_schedule(vf, storage, prices):
    """Greedy forward pass: the DP-optimal (p, b, e) path from e_init."""
    T = vf.horizon
    prices = np.asarray(prices, dtype=float)
    e = storage.e_init
    path_p, path_b, path_e = [], [], [e]
    for t in range(1, T + 1):
        lam = float(prices[t - 1])
        p_cap = storage.p_max if lam >= 0.0 else 0.0
        ps, bs, e_next = _stage_candidates(e, vf.grid, p_cap, storage.p_max, storage.eta)
        vals = (lam * (ps - bs) - storage.marginal_cost * ps
                + np.interp(e_next, vf.grid, vf.values[t]))
        k = int(np.argmax(vals))
        p, b, e = float(ps[k]), float(bs[k]), float(e_next[k])
        path_p.append(p)
        path_b.append(b)
        path_e.append(e)
    return np.array(path_p), np.array(path_b), np.array(path_e)


@dataclass(frozen=True)
class BidCurve:
    """Step bids per period: lists of (quantity_width, price).

    Discharge offers are non-decreasing and charge bids non-increasing in
    cumulative quantity; a period with no discharge steps is withheld
    (negative planning price).
    """

    discharge: tuple   # per period: tuple of (width, price)
    charge: tuple

    @property
    def horizon(self):
        return len(self.discharge)

    def offer_cost(self, t, p):
        """Integral of the discharge offer curve up to quantity p."""
        total, remaining = 0.0, p
        for width, price in self.discharge[t - 1]:
            take = min(remaining, width)
            total += take * price
            remaining -= take
            if remaining <= 0:
                break
        return total

    def bid_value(self, t, b):
        total, remaining = 0.0, b
        for width, price in self.charge[t - 1]:
            take = min(remaining, width)
            total += take * price
            remaining -= take
            if remaining <= 0:
                break
        return total


def bids_from_value(vf, storage, prices=None):
    """Charge/discharge step bids from the value-function slopes.

    Offers for period t price depletion from the DP-optimal entering stock
    e*_{t-1}: step s covers the SoC segment [knot_{j-1}, knot_j] below it at
    price M + v_{t+1}/eta; charge bids symmetrically at eta * v_{t+1} along
    accumulation.  When ``prices`` is given, periods planned at a negative
    price withhold their discharge offer entirely.
    """
    T = vf.horizon
    storage_path = None
    if prices is not None:
        _, _, path_e = dp_forward_schedule(vf, storage, prices)
        storage_path = path_e
    grid = vf.grid
    eta, M = storage.eta, storage.marginal_cost
    discharge, charge = [], []
    for t in range(1, T + 1):
        e_start = storage.e_init if storage_path is None else float(storage_path[t - 1])
        slopes = vf.slopes(t + 1)
        offers, bids = [], []
        withheld = prices is not None and float(prices[t - 1]) < 0.0
        # depletion: walk down through the knots below e_start
        remaining_p = min(storage.p_max, e_start * eta)
        level = e_start
        j = int(np.searchsorted(grid, level, side="right")) - 1
        while remaining_p > 1e-12 and level > grid[0]:
            knot_below = grid[j] if grid[j] < level else grid[max(j - 1, 0)]
            seg_lo = max(knot_below, level - remaining_p / eta)
            slope_idx = min(max(int(np.searchsorted(grid, level - 1e-12, side="right")) - 1, 0),
                            len(slopes) - 1)
            width = (level - seg_lo) * eta
            if width > 1e-12 and not withheld:
                offers.append((width, M + slopes[slope_idx] / eta))
            remaining_p -= width
            level = seg_lo
            j = max(j - 1, 0)
        # accumulation: walk up through the knots above e_start
        remaining_b = min(storage.p_max, (grid[-1] - e_start) / eta)
        level = e_start
        while remaining_b > 1e-12 and level < grid[-1]:
            slope_idx = min(max(int(np.searchsorted(grid, level + 1e-12, side="right")) - 1, 0),
                            len(slopes) - 1)
            knot_above = grid[min(slope_idx + 1, len(grid) - 1)]
            seg_hi = min(knot_above, level + remaining_b * eta)
            width = (seg_hi - level) / eta
            if width > 1e-12:
                bids.append((width, eta * slopes[slope_idx]))
            remaining_b -= width
            level = seg_hi
        discharge.append(tuple(offers))
        charge.append(tuple(bids))
    return BidCurve(discharge=tuple(discharge), charge=tuple(charge))


def clear_with_bids(system, bids, tol=1e-8):
    """Market clearing against storage step bids.

    Generator expected cost plus offer cost minus bid value, subject to the
    power balance, the SoC recursion, and the reformulated bounds with the
    reserve assigned entirely to the generator.  Returns cleared quantities
    and the energy price from the balance dual.
    """
    T = system.horizon
    st = system.storage
    if st is None:
        raise DomainError("bid-based clearing requires storage")
    if bids.horizon != T:
        raise DomainError(f"bid horizon {bids.horizon} != system horizon {T}")

    moments_list = [system.net_load.moments(t) for t in range(1, T + 1)]
    quantiles = {
        t: make_period_quantiles(moments_list[t - 1], system.net_load.model,
                                 system.epsilon, system.risk_policy)
        for t in range(1, T + 1)
    }

    # variable layout: g (T) | p segments | b segments | e (T)
    p_segs = [list(bids.discharge[t - 1]) for t in range(1, T + 1)]
    b_segs = [list(bids.charge[t - 1]) for t in range(1, T + 1)]
    p_ofs, b_ofs = [], []
    pos = T
    for t in range(T):
        p_ofs.append(pos)
        pos += len(p_segs[t])
    for t in range(T):
        b_ofs.append(pos)
        pos += len(b_segs[t])
    e_of = pos
    n = pos + T

    lin = np.zeros(n)
    quad_idx = list(range(T))
    for t in range(T):
        for s, (_, price) in enumerate(p_segs[t]):
            lin[p_ofs[t] + s] = price
        for s, (_, price) in enumerate(b_segs[t]):
            lin[b_ofs[t] + s] = -price

    poly = system.poly

    def value(x):
        total = float(lin @ x)
        for t in quad_idx:
            total += expected_gen_cost(poly, float(x[t]), 1.0, moments_list[t])
        return total

    def grad(x):
        out = lin.copy()
        for t in quad_idx:
            out[t] += marginal_expected_cost(poly, float(x[t]), 1.0, moments_list[t])
        return out

    def hess(x):
        H = np.zeros((n, n))
        for t in quad_idx:
            H[t, t] = expected_cost_derivatives(poly, float(x[t]), 1.0, moments_list[t])[3]
        return H

    eq_rows, eq_rhs, eq_tags = [], [], []
    D = np.asarray(system.net_load.forecast)
    for t in range(T):
        row = np.zeros(n)
        row[t] = 1.0
        row[p_ofs[t]: p_ofs[t] + len(p_segs[t])] = 1.0
        row[b_ofs[t]: b_ofs[t] + len(b_segs[t])] = -1.0
        eq_rows.append(row)
        eq_rhs.append(float(D[t]))
        eq_tags.append(("balance", t + 1))
    for t in range(T):
        row = np.zeros(n)
        row[e_of + t] = 1.0
        rhs = 0.0
        if t == 0:
            rhs = st.e_init
        else:
            row[e_of + t - 1] = -1.0
        row[p_ofs[t]: p_ofs[t] + len(p_segs[t])] = 1.0 / st.eta
        row[b_ofs[t]: b_ofs[t] + len(b_segs[t])] = -st.eta
        eq_rows.append(row)
        eq_rhs.append(rhs)
        eq_tags.append(("soc", t + 1))
    if system.terminal in ("periodic", "fixed"):
        row = np.zeros(n)
        row[e_of + T - 1] = 1.0
        eq_rows.append(row)
        eq_rhs.append(st.e_init if system.terminal == "periodic" else float(system.terminal_value))
        eq_tags.append(("terminal", T + 1))

    ineq_rows, ineq_rhs = [], []

    def add_ineq(row, rhs):
        ineq_rows.append(row)
        ineq_rhs.append(rhs)

    for t in range(T):
        q = quantiles[t + 1]
        # generator bounds with the whole reserve (phi = 1)
        row = np.zeros(n)
        row[t] = -1.0
        add_ineq(row, -(system.g_min - q.gen.d_hat))
        row = np.zeros(n)
        row[t] = 1.0
        add_ineq(row, system.g_max - q.gen.d_tilde)
        # segment boxes
        for s, (width, _) in enumerate(p_segs[t]):
            row = np.zeros(n)
            row[p_ofs[t] + s] = 1.0
            add_ineq(row, width)
            row = np.zeros(n)
            row[p_ofs[t] + s] = -1.0
            add_ineq(row, 0.0)
        for s, (width, _) in enumerate(b_segs[t]):
            row = np.zeros(n)
            row[b_ofs[t] + s] = 1.0
            add_ineq(row, width)
            row = np.zeros(n)
            row[b_ofs[t] + s] = -1.0
            add_ineq(row, 0.0)
        # aggregate power caps
        row = np.zeros(n)
        row[p_ofs[t]: p_ofs[t] + len(p_segs[t])] = 1.0
        add_ineq(row, st.p_max)
        row = np.zeros(n)
        row[b_ofs[t]: b_ofs[t] + len(b_segs[t])] = 1.0
        add_ineq(row, st.p_max)
        # SoC band (psi = 0): p/eta <= e_t,  e_t <= E - b*eta
        row = np.zeros(n)
        row[p_ofs[t]: p_ofs[t] + len(p_segs[t])] = 1.0 / st.eta
        if t == 0:
            add_ineq(row, st.e_init)
        else:
            row[e_of + t - 1] = -1.0
            add_ineq(row, 0.0)
        row = np.zeros(n)
        row[b_ofs[t]: b_ofs[t] + len(b_segs[t])] = st.eta
        if t == 0:
            add_ineq(row, st.e_max - st.e_init)
        else:
            row[e_of + t - 1] = 1.0
            add_ineq(row, st.e_max)
    row = np.zeros(n)
    row[e_of + T - 1] = -1.0
    add_ineq(row, 0.0)
    row = np.zeros(n)
    row[e_of + T - 1] = 1.0
    add_ineq(row, st.e_max)

    program = ConvexProgram(
        n=n, value=value, grad=grad, hess=hess,
        A=np.array(eq_rows), b=np.array(eq_rhs),
        G=np.array(ineq_rows), h=np.array(ineq_rhs),
        quadratic=poly.degree <= 2,
    )
    result = solve_convex(program, tol=tol)
    if result.status != "optimal":
        raise SolverError(f"bid clearing failed: {result.status}", status=result.status,
                          result=result)
    x = result.x
    lam = np.zeros(T)
    theta = np.zeros(T)
    for tag, y in zip(eq_tags, result.eq_duals):
        kind, t = tag
        if kind == "balance":
            lam[t - 1] = -y
        elif kind == "soc":
            theta[t - 1] = y
    p = np.array([float(np.sum(x[p_ofs[t]: p_ofs[t] + len(p_segs[t])])) for t in range(T)])
    b = np.array([float(np.sum(x[b_ofs[t]: b_ofs[t] + len(b_segs[t])])) for t in range(T)])
    e = np.concatenate([[st.e_init], x[e_of: e_of + T]])
    return {
        "g": x[:T].copy(), "p": p, "b": b, "e": e,
        "lam": lam, "theta": theta,
        "objective": result.objective, "residuals": result.residuals,
        "status": result.status,
    }


# ---------------------------------------------------------------------------
# mechanism comparison
# ---------------------------------------------------------------------------


def comparison_system(system, retire_frac=0.0):
    """The common footing for the comparison: storage reserve excluded and
    an optional fraction of the fleet retired (capacity scaling)."""
    fleet = system.fleet.scaled(1.0 - retire_frac) if retire_frac else system.fleet
    poly = system.poly
    g_max = min(system.g_max, fleet.total_capacity)
    if retire_frac:
        poly = fit_polynomial_to_merit_curve(
            fleet, system.poly.degree, domain=(system.g_min, g_max))
    return dataclasses.replace(system, fleet=fleet, poly=poly, g_max=g_max,
                               storage_reserve=False)


def compare_mechanisms(system, n_scenarios=200, seed=0, retire_frac=0.0,
                       grid_size=21, threads=None, n_batches=10,
                       price_mode="mean"):
    """Welfare-priced vs profit-maximizing storage on common scenarios.

    ``price_mode`` selects how the bidder's value function consumes the
    simulated prices: ``"mean"`` (default) runs the recursion on the
    scenario-mean path; ``"per-scenario"`` averages per-path value
    functions.  Returns per-scenario metric rows for both mechanisms plus
    a summary with scenario means, paired percentage deltas, and the
    fraction of scenario batches where the welfare mechanism's electricity
    payment is strictly lower.
    """
    if price_mode not in ("mean", "per-scenario"):
        raise DomainError(f"unknown price mode {price_mode!r}")
    base = comparison_system(system, retire_frac)
    st = base.storage
    if st is None:
        raise DomainError("mechanism comparison requires storage")

    welfare = solve_dispatch(base)
    if welfare.status != "optimal":
        raise SolverError(f"welfare dispatch failed: {welfare.status}", status=welfare.status)

    prices = simulate_price_scenarios(base, n_scenarios, seed, threads=threads)
    mean_path = prices.mean_path()
    if price_mode == "mean":
        vf = dp_value_function(mean_path, st, grid_size=grid_size)
    else:
        vf = dp_value_function_per_scenario(prices, st, grid_size=grid_size)
    bids = bids_from_value(vf, st, prices=mean_path)
    cleared = clear_with_bids(base, bids)

    draws = sample_net_load(base.net_load, n_scenarios, seed + _EVAL_SEED_OFFSET)
    draws = np.clip(draws, base.g_min, base.g_max)

    def metrics(schedule_p, schedule_b, lam):
        rows = []
        for i in range(n_scenarios):
            g_real = draws[i] - schedule_p + schedule_b
            g_real = np.clip(g_real, 0.0, base.fleet.total_capacity)
            gen_cost = float(sum(merit_order_cost(base.fleet, float(gq)) for gq in g_real))
            storage_cost = float(st.marginal_cost * np.sum(schedule_p))
            profit = float(np.sum(lam * (schedule_p - schedule_b))
                           - st.marginal_cost * np.sum(schedule_p))
            payment = float(np.sum(lam * draws[i]))
            rows.append({
                "storage_profit": profit,
                "gen_cost": gen_cost,
                "system_cost": gen_cost + storage_cost,
                "payment": payment,
            })
        return rows

    rows_w = metrics(welfare.p, welfare.b, welfare.lam)
    rows_b = metrics(cleared["p"], cleared["b"], cleared["lam"])

    def mean(rows, key):
        return float(np.mean([r[key] for r in rows]))

    summary = {"welfare": {}, "bidding": {}, "delta_pct": {}}
    for key in ("storage_profit", "gen_cost", "system_cost", "payment"):
        mw, mb = mean(rows_w, key), mean(rows_b, key)
        summary["welfare"][key] = mw
        summary["bidding"][key] = mb
        summary["delta_pct"][key] = 100.0 * (mb - mw) / abs(mb) if mb != 0 else 0.0

    # batched payment comparison
    batch = max(1, n_scenarios // n_batches)
    wins = 0
    n_eff = 0
    for i in range(0, n_scenarios - batch + 1, batch):
        pw = np.mean([rows_w[j]["payment"] for j in range(i, i + batch)])
        pb = np.mean([rows_b[j]["payment"] for j in range(i, i + batch)])
        wins += 1 if pw < pb else 0
        n_eff += 1
    summary["payment_batch_win_rate"] = wins / max(n_eff, 1)
    summary["n_scenarios"] = n_scenarios
    summary["retire_frac"] = retire_frac

    table = []
    for i in range(n_scenarios):
        table.append({"mechanism": "welfare", "scenario": i, **rows_w[i]})
        table.append({"mechanism": "bidding", "scenario": i, **rows_b[i]})
    return {"table": table, "summary": summary,
            "welfare_solution": welfare, "cleared": cleared,
            "price_scenarios": prices, "value_function": vf, "bids": bids}


def export_metrics_csv(comparison, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mechanism", "scenario", "storage_profit", "gen_cost",
                         "system_cost", "payment"])
        for row in comparison["table"]:
            writer.writerow([row["mechanism"], row["scenario"],
                             f"{row['storage_profit']:.6f}", f"{row['gen_cost']:.6f}",
                             f"{row['system_cost']:.6f}", f"{row['payment']:.6f}"])


def export_summary_json(comparison, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(comparison["summary"], fh, indent=2, sort_keys=True)
