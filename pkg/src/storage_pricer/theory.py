"""Closed-form pricing results and their numerical verification.

Implements the price-coupling relations between consecutive opportunity
prices (charging / discharging / idle, with sup/inf variants when storage
power binds), the opportunity-price bounds from energy/reserve price boxes,
the closed-form sensitivity of the opportunity price to forecast-error
spread, the SoC and sigma sweep experiments, and the Jensen-gap estimator.

All coupling formulas consume the SoC-row quantile pair of the period and
the reserve price net of the reserve-ratio box rents (pi_eff below): when
the optimal reserve split parks at a corner, the split's box duals carry
mass that is interchangeable with pi along a degenerate dual ray, and the
combination pi - kappa_psi_hi + kappa_psi_lo is the ray-invariant quantity
the coupling relations are stated in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from ._parallel import parallel_map
from .costs import marginal_expected_cost
from .dispatch import solve_dispatch
from .errors import DegenerateQuantileError, DomainError, UnsupportedDegreeError

CHARGING = "charging"
DISCHARGING = "discharging"
IDLE = "idle"

# Five-way period classification by storage flow and power binding.
CASE_CHARGE_INTERIOR = "charge_interior"
CASE_DISCHARGE_INTERIOR = "discharge_interior"
CASE_DISCHARGE_MAX = "discharge_at_power_cap"
CASE_CHARGE_MAX = "charge_at_power_cap"
CASE_IDLE = "idle"


@dataclass(frozen=True)
class CouplingResult:
    """Predicted previous-period opportunity price.

    ``point`` is set for the interior charging/discharging cases; ``lo`` /
    ``hi`` bound the idle case; power-binding cases set exactly one of the
    bounds (sup for discharging at the cap, inf for charging at the cap).
    """

    state: str
    point: float | None = None
    lo: float | None = None
    hi: float | None = None


def _charge_expr(theta_t, lam, pi, eta, M, d_hat, d_tilde, mu):
    if d_tilde == 0.0:
        raise DegenerateQuantileError("charging coupling undefined: d_tilde = 0")
    return (eta / d_tilde) * (theta_t * eta * d_hat
                              + lam * (d_tilde / eta**2 - d_hat) + pi - M * mu)


def _discharge_expr(theta_t, lam, pi, eta, M, d_hat, d_tilde, mu):
    if d_hat == 0.0:
        raise DegenerateQuantileError("discharging coupling undefined: d_hat = 0")
    return (1.0 / (eta * d_hat)) * (theta_t * d_tilde / eta
                                    + lam * (eta**2 * d_hat - d_tilde)
                                    + pi + M * (d_tilde - eta**2 * d_hat - mu))


def coupling_price(state, theta_t, lam, pi, storage, quantiles, mu):
    """Previous-period opportunity price implied by period-t prices.

    ``quantiles`` is the SoC-row quantile triple (or any object with d_hat
    and d_tilde).  ``state`` is one of the module constants CHARGING,
    DISCHARGING, IDLE.
    """
    eta, M = storage.eta, storage.marginal_cost
    if not (0.0 < eta <= 1.0):
        raise DomainError(f"efficiency must lie in (0, 1], got {eta}")
    d_hat, d_tilde = quantiles.d_hat, quantiles.d_tilde
    if state == CHARGING:
        return CouplingResult(state, point=_charge_expr(theta_t, lam, pi, eta, M, d_hat, d_tilde, mu))
    if state == DISCHARGING:
        return CouplingResult(state, point=_discharge_expr(theta_t, lam, pi, eta, M, d_hat, d_tilde, mu))
    if state == IDLE:
        lo = _discharge_expr(theta_t, lam, pi, eta, M, d_hat, d_tilde, mu)
        hi = _charge_expr(theta_t, lam, pi, eta, M, d_hat, d_tilde, mu)
        return CouplingResult(state, lo=lo, hi=hi)
    raise DomainError(f"unknown state {state!r}")


def price_bounds(lam_bounds, pi_bounds, storage, quantiles, mu):
    """Opportunity-price intervals implied by energy/reserve price boxes.

    Returns (charge_interval, discharge_interval), each a (lo, hi) pair.
    """
    lam_lo, lam_hi = lam_bounds
    pi_lo, pi_hi = pi_bounds
    if lam_lo > lam_hi or pi_lo > pi_hi:
        raise DomainError("price bounds reversed")
    eta, M = storage.eta, storage.marginal_cost
    d_hat, d_tilde = quantiles.d_hat, quantiles.d_tilde
    if d_tilde == 0.0 or d_hat == 0.0:
        raise DegenerateQuantileError("price bounds undefined for zero quantiles")
    spread = d_tilde / eta**2 - d_hat
    charge_lo = (eta / d_tilde) * (lam_lo * spread + pi_lo - M * mu)
    charge_hi = (-1.0 / (eta * d_hat)) * (lam_hi * spread + pi_hi - M * mu)
    dis_term = d_tilde - eta**2 * d_hat - mu
    dis_lo = (1.0 / (eta * d_hat)) * (lam_lo * (eta**2 * d_hat - d_tilde) + pi_hi + M * dis_term)
    dis_hi = (-eta / d_tilde) * (lam_hi * (eta**2 * d_hat - d_tilde) + pi_lo + M * dis_term)
    return (charge_lo, charge_hi), (dis_lo, dis_hi)


def theta_sigma_derivative(poly, g, phi, moments, eta):
    """Closed-form d theta / d sigma for fleet polynomials of degree 2-4."""
    if poly.degree not in (2, 3, 4):
        raise UnsupportedDegreeError(f"degree {poly.degree} outside 2..4")
    if not (0.0 <= phi <= 1.0):
        raise DomainError(f"reserve ratio must lie in [0, 1], got {phi}")
    c = list(poly.coeffs) + [0.0] * (5 - len(poly.coeffs))
    sigma, mu = moments.sigma, moments.mu
    if poly.degree == 2:
        return 0.0
    if poly.degree == 3:
        return 6.0 * c[3] * phi**2 * sigma / eta
    return sigma * (6.0 * c[3] * phi**2 + 24.0 * c[4] * g * phi**2 + 24.0 * c[4] * phi**3 * mu) / eta


def interior_charging_theta(poly, g, phi, moments, eta):
    """Opportunity price in the interior-charging case: marginal cost / eta."""
    return marginal_expected_cost(poly, g, phi, moments) / eta


def jensen_gap(poly, g, phi, moments, eta, samples=100_000, seed=0):
    """Monte Carlo estimate of E[theta(d)] - theta(E[d]) with its standard error.

    theta(d) is the realized-marginal-cost price G'(g + phi d)/eta. The
    estimator averages theta(d) - theta(mu) - theta'(mu)(d - mu) pointwise;
    the linear term has zero mean, so this is unbiased for the gap while
    cancelling the first-order noise.
    """
    if samples < 10_000:
        raise DomainError(f"need at least 1e4 samples, got {samples}")
    rng = np.random.default_rng(seed)
    d = rng.normal(moments.mu, moments.sigma, size=samples)
    xs = g + phi * d
    gprime = poly.marginal(xs) / eta
    x0 = g + phi * moments.mu
    theta0 = float(poly.marginal(x0)) / eta
    # derivative of theta with respect to d at the mean
    h = 1e-5 * max(1.0, abs(x0))
    slope = (float(poly.marginal(x0 + h)) - float(poly.marginal(x0 - h))) / (2 * h * eta) * phi
    centered = gprime - theta0 - slope * (d - moments.mu)
    gap = float(np.mean(centered))
    se = float(np.std(centered)) / math.sqrt(samples)
    return gap, se


# ---------------------------------------------------------------------------
# period classification and whole-solution coupling audit
# ---------------------------------------------------------------------------


def classify_period(solution, t, rel=1e-6):
    """One of the five coupling cases for period t (1-based)."""
    st = solution.system.storage
    if st is None:
        return CASE_IDLE
    thr = rel * st.p_max
    b_t, p_t = solution.b[t - 1], solution.p[t - 1]
    psi_t = solution.psi[t - 1]
    q = solution.quantiles[t].power
    charge_slack = st.p_max - (b_t - psi_t * q.d_hat)
    discharge_slack = st.p_max - (p_t + psi_t * q.d_tilde)
    bind_tol = max(1e-9 * st.p_max, 100 * rel * st.p_max)
    if b_t > thr and p_t > thr:
        return CASE_IDLE  # simultaneous flow: relaxation artifact, reported elsewhere
    if b_t > thr:
        return CASE_CHARGE_MAX if charge_slack <= bind_tol else CASE_CHARGE_INTERIOR
    if p_t > thr:
        return CASE_DISCHARGE_MAX if discharge_slack <= bind_tol else CASE_DISCHARGE_INTERIOR
    return CASE_IDLE


def effective_reserve_price(solution, t):
    """Reserve price net of the reserve-split box rents (dual-ray invariant)."""
    return (solution.pi[t - 1]
            - solution.dual("kappa_psi_hi", t)
            + solution.dual("kappa_psi_lo", t))


def verify_price_coupling(solution, rel_tol=1e-4, interval_inflation=1e-6):
    """Check every period of a solved dispatch against the coupling relations.

    Interior charging/discharging periods must match the point formulas to
    ``rel_tol`` relative; idle periods must fall in the interval; power-
    binding periods must respect the one-sided sup/inf bound.  Returns a
    per-period report with the worst relative error.
    """
    system = solution.system
    st = system.storage
    periods = []
    worst = 0.0
    ok = True
    for t in range(2, system.horizon + 1):
        case = classify_period(solution, t)
        q = solution.quantiles[t].soc
        mu_t = system.net_load.moments(t).mu
        theta_t, theta_prev = solution.theta[t - 1], solution.theta[t - 2]
        lam = solution.lam[t - 1]
        pi_eff = effective_reserve_price(solution, t)
        scale = max(1.0, abs(theta_prev))
        entry = {"t": t, "case": case, "theta_prev": theta_prev}
        try:
            lo = _discharge_expr(theta_t, lam, pi_eff, st.eta, st.marginal_cost,
                                 q.d_hat, q.d_tilde, mu_t)
            hi = _charge_expr(theta_t, lam, pi_eff, st.eta, st.marginal_cost,
                              q.d_hat, q.d_tilde, mu_t)
        except DegenerateQuantileError:
            entry["skipped"] = "degenerate quantile"
            periods.append(entry)
            continue
        pad = interval_inflation * scale
        if case == CASE_CHARGE_INTERIOR:
            err = abs(theta_prev - hi) / scale
            entry.update(predicted=hi, rel_error=err, passed=err <= rel_tol)
        elif case == CASE_DISCHARGE_INTERIOR:
            err = abs(theta_prev - lo) / scale
            entry.update(predicted=lo, rel_error=err, passed=err <= rel_tol)
        elif case == CASE_DISCHARGE_MAX:
            err = max(0.0, theta_prev - hi) / scale
            entry.update(sup=hi, rel_error=err, passed=theta_prev <= hi + rel_tol * scale)
        elif case == CASE_CHARGE_MAX:
            err = max(0.0, lo - theta_prev) / scale
            entry.update(inf=lo, rel_error=err, passed=theta_prev >= lo - rel_tol * scale)
        else:
            err = max(0.0, lo - theta_prev, theta_prev - hi) / scale
            entry.update(lo=lo, hi=hi, rel_error=err,
                         passed=lo - pad <= theta_prev <= hi + pad)
        worst = max(worst, entry["rel_error"])
        ok = ok and entry["passed"]
        periods.append(entry)
    return {"periods": periods, "ok": ok, "worst_rel_error": worst}


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    axis: np.ndarray
    theta: np.ndarray
    sup_theta: np.ndarray
    inf_theta: np.ndarray
    case_labels: list
    verdict: bool
    max_violation: float
    excluded: list            # axis indices excluded from the verdict
    annotations: dict

    def __post_init__(self):
        if np.any(np.diff(self.axis) <= 0):
            raise DomainError("sweep axis must be strictly increasing")


def _sweep_point_records(solution, period):
    """theta dual plus the analytic sup/inf variants at the designated period."""
    system = solution.system
    t = period
    m = system.net_load.moments(t)
    phi = float(min(max(solution.phi[t - 1], 0.0), 1.0))
    H = marginal_expected_cost(system.poly, float(solution.g[t - 1]), phi, m)
    eta, M = system.storage.eta, system.storage.marginal_cost
    sup_theta = H / eta
    inf_theta = eta * (H - M)
    return float(solution.theta[t - 1]), sup_theta, inf_theta


def soc_sweep(system, soc_grid, period=1, tol=1e-8, threads=None):
    """Solve the dispatch across initial-SoC values and record the
    opportunity price at a designated period.

    Grid points solve independently (optionally in parallel) and merge in
    axis order.  Verdict: the theta sequence is non-increasing within
    1e-6 * max|theta|.
    """
    grid = np.asarray(sorted(float(v) for v in soc_grid))
    st = system.storage
    if st is None:
        raise DomainError("SoC sweep requires storage")
    if grid[0] < -1e-9 or grid[-1] > st.e_max + 1e-9:
        raise DomainError(f"SoC grid outside [0, {st.e_max}]")

    def solve_point(e0):
        sol = solve_dispatch(system.with_initial_soc(e0), tol=tol)
        if sol.status != "optimal":
            raise DomainError(f"sweep solve failed at e0={e0}: {sol.status}")
        return (*_sweep_point_records(sol, period), classify_period(sol, period))

    records = parallel_map(solve_point, grid, threads)
    thetas, sups, infs, cases = (list(v) for v in zip(*records))
    thetas = np.array(thetas)
    band = 1e-6 * max(1.0, float(np.max(np.abs(thetas))))
    diffs = np.diff(thetas)
    max_violation = float(max(0.0, np.max(diffs))) if diffs.size else 0.0
    return SweepResult(
        axis=grid, theta=thetas, sup_theta=np.array(sups), inf_theta=np.array(infs),
        case_labels=cases, verdict=bool(np.all(diffs <= band)),
        max_violation=max_violation, excluded=[], annotations={"band": band},
    )


def sigma_sweep(system, scale_grid, period=1, tol=1e-8, nu_threshold=1e-4, threads=None):
    """Solve the dispatch across sigma scale factors.

    Grid points where the generator lower bound binds (nu_lo dual above
    ``nu_threshold`` in any period) are annotated and excluded from the
    monotonicity verdict; that regime legitimately breaks it.  Verdict:
    non-decreasing theta over the included points (constant for quadratic
    fleets, which the caller asserts separately).
    """
    grid = np.asarray(sorted(float(v) for v in scale_grid))
    if np.any(grid < 0):
        raise DomainError("sigma scales must be >= 0")

    def solve_point(scale):
        sol = solve_dispatch(system.with_sigma_scale(scale), tol=tol)
        if sol.status != "optimal":
            raise DomainError(f"sweep solve failed at scale={scale}: {sol.status}")
        nu_lo_max = max((v for v in sol.duals.get("nu_lo", {}).values()), default=0.0)
        return (*_sweep_point_records(sol, period), classify_period(sol, period), nu_lo_max)

    records = parallel_map(solve_point, grid, threads)
    thetas, sups, infs, cases, nu_maxima = (list(v) for v in zip(*records))
    excluded = [i for i, v in enumerate(nu_maxima) if v > nu_threshold]
    thetas = np.array(thetas)
    band = 1e-6 * max(1.0, float(np.max(np.abs(thetas))))
    keep = [i for i in range(len(grid)) if i not in excluded]
    kept = thetas[keep]
    diffs = np.diff(kept)
    max_violation = float(max(0.0, np.max(-diffs))) if diffs.size else 0.0
    return SweepResult(
        axis=grid, theta=thetas, sup_theta=np.array(sups), inf_theta=np.array(infs),
        case_labels=cases, verdict=bool(np.all(diffs >= -band)),
        max_violation=max_violation, excluded=excluded, annotations={"band": band},
    )


def ideal_storage_slope_gap(system, soc_grid, period=1, tol=1e-8):
    """Max gap between the sup-theta and inf-theta slopes over a SoC sweep.

    With eta = 1 and zero storage marginal cost the two variants coincide
    and the gap is numerically zero.
    """
    sweep = soc_sweep(system, soc_grid, period=period, tol=tol)
    de = np.diff(sweep.axis)
    if not de.size:
        return 0.0
    slope_sup = np.diff(sweep.sup_theta) / de
    slope_inf = np.diff(sweep.inf_theta) / de
    return float(np.max(np.abs(slope_sup - slope_inf)))


def export_sweep_csv(sweep, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis_value", "theta", "sup_theta", "inf_theta", "case_label", "verdict"])
        for i in range(len(sweep.axis)):
            writer.writerow([
                f"{sweep.axis[i]:.10g}", f"{sweep.theta[i]:.10g}",
                f"{sweep.sup_theta[i]:.10g}", f"{sweep.inf_theta[i]:.10g}",
                sweep.case_labels[i], sweep.verdict,
            ])
