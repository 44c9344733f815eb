"""Test-system synthesis, CSV ingestion, net-load sampling, and empirical
chance-constraint validation.

The synthetic system mirrors the shape of a mid-size ISO fleet: 76 merit-
ordered thermal segments totalling 23.1 GW, a diurnal load profile around a
13 GW average, storage sized as a fraction of average load, and forecast
error proportional to the renewable share.  The load shape and fleet are
synthetic stand-ins, not utility data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .costs import FleetCurve, Segment, StorageSpec, fit_polynomial_to_merit_curve, load_fleet_csv
from .dispatch import SystemSpec
from .distributions import ErrorMoments, GaussianModel, standardized_draws
from .errors import DomainError, SchemaError

# Normalized diurnal net-load profile (24 points, mean exactly 1 after
# scaling): overnight trough, midday renewable belly, evening peak.
_DIURNAL = np.array([
    0.78, 0.74, 0.71, 0.70, 0.71, 0.75,
    0.84, 0.95, 1.02, 1.05, 1.03, 0.99,
    0.94, 0.90, 0.89, 0.92, 1.02, 1.14,
    1.24, 1.28, 1.22, 1.10, 0.97, 0.86,
])
_DIURNAL = _DIURNAL / _DIURNAL.mean()


@dataclass(frozen=True)
class NetLoadModel:
    """Per-period net-load forecast with error moments and a shared family."""

    forecast: tuple
    mu: tuple
    sigma: tuple
    model: object
    renewable_ratio: float = 0.0
    storage_ratio: float = 0.0

    def __post_init__(self):
        f = tuple(float(v) for v in self.forecast)
        mu = tuple(float(v) for v in self.mu)
        sg = tuple(float(v) for v in self.sigma)
        if not (len(f) == len(mu) == len(sg)):
            raise DomainError(
                f"length mismatch: forecast {len(f)}, mu {len(mu)}, sigma {len(sg)}")
        if any(not math.isfinite(v) for v in f):
            raise DomainError("forecast must be finite")
        if any(s < 0 for s in sg):
            raise DomainError("sigma must be >= 0")
        if self.renewable_ratio < 0 or self.storage_ratio < 0:
            raise DomainError("capacity ratios must be >= 0")
        object.__setattr__(self, "forecast", f)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sg)

    @property
    def horizon(self):
        return len(self.forecast)

    def moments(self, t):
        return ErrorMoments(self.mu[t - 1], self.sigma[t - 1])

    def scaled_sigma(self, scale):
        return replace(self, sigma=tuple(s * scale for s in self.sigma))


def diurnal_profile(horizon):
    """The shipped 24-point shape resampled (periodically) to any horizon."""
    if horizon == 24:
        return _DIURNAL.copy()
    base_x = np.arange(24)
    x = np.linspace(0.0, 24.0, horizon, endpoint=False)
    prof = np.interp(x, np.concatenate([base_x, [24]]), np.concatenate([_DIURNAL, [_DIURNAL[0]]]))
    return prof / prof.mean()


def synth_fleet(n_gens, total_cap_mw, seed, mc_lo=10.0, mc_hi=120.0):
    """Merit-ordered synthetic fleet with log-spaced marginal costs.

    The log spacing makes the cumulative cost curve convex and roughly
    super-quadratic; segment quadratic terms fill half of each cost gap so
    merit order holds exactly at the boundaries.
    """
    rng = np.random.default_rng([seed, 101])
    weights = rng.dirichlet(np.full(n_gens, 50.0))
    caps = total_cap_mw * weights
    c1 = mc_lo * (mc_hi / mc_lo) ** (np.arange(n_gens) / max(n_gens - 1, 1))
    gaps = np.diff(c1, append=c1[-1] + (c1[-1] - c1[-2] if n_gens > 1 else 1.0))
    segments = tuple(
        Segment(capacity=float(caps[i]), c0=0.0, c1=float(c1[i]),
                c2=float(0.25 * gaps[i] / caps[i]))
        for i in range(n_gens)
    )
    return FleetCurve(segments)


def synth_test_system(
    n_gens=76,
    total_cap_mw=23_100.0,
    avg_load_mw=13_000.0,
    renewable_ratio=0.30,
    storage_ratio=0.20,
    duration_h=4.0,
    eta=0.95,
    marginal_cost=20.0,
    e_init_ratio=0.5,
    epsilon=0.05,
    horizon=24,
    seed=0,
    fit_degree=2,
    g_min_ratio=0.12,
    model=None,
    storage_reserve=True,
    terminal="periodic",
    terminal_value=None,
):
    """Build a full SystemSpec from headline ratios.

    Defaults follow the canonical desk setup: 76 generators / 23.1 GW,
    13 GW average load, 30% renewables, 20% storage at 4 hours, 95%
    efficiency, $20/MWh storage marginal cost, 50% initial SoC, eps=0.05.
    """
    if avg_load_mw > 0.85 * total_cap_mw:
        raise DomainError(
            f"average load {avg_load_mw} too close to fleet capacity {total_cap_mw}")
    if n_gens < 1 or total_cap_mw <= 0 or avg_load_mw <= 0:
        raise DomainError("fleet and load sizes must be positive")

    fleet = synth_fleet(n_gens, total_cap_mw, seed)
    g_min = g_min_ratio * total_cap_mw
    g_max = total_cap_mw
    poly = fit_polynomial_to_merit_curve(fleet, fit_degree, domain=(g_min, g_max))

    profile = diurnal_profile(horizon)
    forecast = avg_load_mw * profile
    sigma_frac = 0.01 + 0.05 * renewable_ratio
    sigma = sigma_frac * forecast
    mu = np.zeros(horizon)

    storage = None
    if storage_ratio > 0:
        p_max = storage_ratio * avg_load_mw
        e_max = p_max * duration_h
        storage = StorageSpec(p_max=p_max, e_max=e_max, eta=eta,
                              marginal_cost=marginal_cost, e_init=e_init_ratio * e_max)

    net_load = NetLoadModel(
        forecast=tuple(forecast), mu=tuple(mu), sigma=tuple(sigma),
        model=model if model is not None else GaussianModel(),
        renewable_ratio=renewable_ratio, storage_ratio=storage_ratio,
    )
    return SystemSpec(
        horizon=horizon, net_load=net_load, poly=poly, fleet=fleet,
        storage=storage, g_min=g_min, g_max=g_max, epsilon=epsilon,
        terminal=terminal, terminal_value=terminal_value,
        storage_reserve=storage_reserve,
    )


def sample_net_load(net_load, n, seed, threads=1):
    """n independent net-load trajectories D_t + d_t, (n, T) matrix.

    Per-period errors are drawn independently; each scenario uses its own
    RNG stream derived from (seed, scenario index), so the matrix is
    reproducible row by row regardless of n or the worker count.  Drawing
    is cheap, so workers default to one; pass ``threads`` to spread very
    large batches.
    """
    if n < 1:
        raise DomainError(f"need n >= 1 scenarios, got {n}")
    T = net_load.horizon
    D = np.asarray(net_load.forecast)
    mu = np.asarray(net_load.mu)
    sigma = np.asarray(net_load.sigma)

    def draw(i):
        rng = np.random.default_rng([seed, i])
        return D + mu + sigma * standardized_draws(net_load.model, T, rng)

    from ._parallel import parallel_map

    return np.array(parallel_map(draw, range(n), threads))


def sample_errors(net_load, n, seed):
    """n x T matrix of forecast errors d_t (no forecast added)."""
    return sample_net_load(net_load, n, seed) - np.asarray(net_load.forecast)


def empirical_violation_rate(solution, net_load, n=10_000, seed=0):
    """Monte Carlo check of the original chance constraints at fixed
    first-stage decisions.

    Returns per-constraint violation frequencies and the joint frequency of
    each two-sided group (generator bounds, SoC bounds), all per period,
    plus the worst joint rate across groups.
    """
    system = solution.system
    d = sample_errors(net_load, n, seed)
    T = system.horizon
    g, p, b = solution.g, solution.p, solution.b
    phi, psi, e = solution.phi, solution.psi, solution.e

    rates = {"gen_lo": np.zeros(T), "gen_hi": np.zeros(T), "gen_joint": np.zeros(T)}
    has_storage = system.storage is not None
    if has_storage:
        for key in ("charge_hi", "discharge_hi", "soc_lo", "soc_hi", "soc_joint"):
            rates[key] = np.zeros(T)

    for t in range(T):
        x = g[t] + phi[t] * d[:, t]
        lo = x < system.g_min - 1e-9
        hi = x > system.g_max + 1e-9
        rates["gen_lo"][t] = np.mean(lo)
        rates["gen_hi"][t] = np.mean(hi)
        rates["gen_joint"][t] = np.mean(lo | hi)
        if has_storage:
            st = system.storage
            rates["charge_hi"][t] = np.mean(b[t] - psi[t] * d[:, t] > st.p_max + 1e-9)
            rates["discharge_hi"][t] = np.mean(p[t] + psi[t] * d[:, t] > st.p_max + 1e-9)
            s_lo = (psi[t] * d[:, t] + p[t]) / st.eta > e[t] + 1e-9
            s_hi = e[t] > st.e_max - (b[t] - psi[t] * d[:, t]) * st.eta + 1e-9
            rates["soc_lo"][t] = np.mean(s_lo)
            rates["soc_hi"][t] = np.mean(s_hi)
            rates["soc_joint"][t] = np.mean(s_lo | s_hi)

    joint_keys = ["gen_joint"] + (["soc_joint", "charge_hi", "discharge_hi"] if has_storage else [])
    worst = max(float(np.max(rates[k])) for k in joint_keys)
    return {"rates": rates, "worst_joint": worst, "n": n}


# ---------------------------------------------------------------------------
# CSV ingestion / export
# ---------------------------------------------------------------------------


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, [c.strip() for c in row]))
    return header, rows


def _parse_float(path, lineno, token):
    try:
        return float(token)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: not a number: {token!r}") from None


def load_system_csv(fleet_path, load_path, errors_path, *, storage=None,
                    epsilon=0.05, fit_degree=2, g_min=0.0, g_max=None,
                    model=None, storage_reserve=True, terminal="periodic",
                    terminal_value=None):
    """Assemble a SystemSpec from three CSV files.

    * fleet: ``gen_id, capacity_mw, c0, c1, c2``
    * load:  ``t, d_mw``
    * errors: ``t, mu_mw, sigma_mw`` or ``t, <sample columns...>`` (moments
      are then estimated from the per-period samples)
    """
    fleet = load_fleet_csv(fleet_path)

    header, rows = _read_csv(load_path)
    if header != ["t", "d_mw"]:
        raise SchemaError(f"{load_path}: expected header ['t', 'd_mw'], got {header}")
    forecast = {}
    for lineno, row in rows:
        if len(row) != 2:
            raise SchemaError(f"{load_path}:{lineno}: expected 2 columns")
        forecast[int(_parse_float(load_path, lineno, row[0]))] = _parse_float(load_path, lineno, row[1])

    header, rows = _read_csv(errors_path)
    mu, sigma = {}, {}
    if header[:1] != ["t"]:
        raise SchemaError(f"{errors_path}: first column must be 't', got {header}")
    if header == ["t", "mu_mw", "sigma_mw"]:
        for lineno, row in rows:
            if len(row) != 3:
                raise SchemaError(f"{errors_path}:{lineno}: expected 3 columns")
            t = int(_parse_float(errors_path, lineno, row[0]))
            mu[t] = _parse_float(errors_path, lineno, row[1])
            sigma[t] = _parse_float(errors_path, lineno, row[2])
    else:
        for lineno, row in rows:
            t = int(_parse_float(errors_path, lineno, row[0]))
            samples = [_parse_float(errors_path, lineno, tok) for tok in row[1:]]
            if len(samples) < 2:
                raise SchemaError(f"{errors_path}:{lineno}: need >= 2 samples to estimate moments")
            mu[t] = float(np.mean(samples))
            sigma[t] = float(np.std(samples))

    if sorted(forecast) != sorted(mu):
        raise SchemaError(
            f"horizon mismatch: load file has {len(forecast)} periods, "
            f"errors file has {len(mu)}")
    periods = sorted(forecast)
    if periods != list(range(1, len(periods) + 1)):
        raise SchemaError(f"{load_path}: periods must be 1..T, got {periods[:5]}...")

    g_max = fleet.total_capacity if g_max is None else g_max
    poly = fit_polynomial_to_merit_curve(fleet, fit_degree, domain=(g_min, g_max))
    net_load = NetLoadModel(
        forecast=tuple(forecast[t] for t in periods),
        mu=tuple(mu[t] for t in periods),
        sigma=tuple(sigma[t] for t in periods),
        model=model if model is not None else GaussianModel(),
    )
    return SystemSpec(
        horizon=len(periods), net_load=net_load, poly=poly, fleet=fleet,
        storage=storage, g_min=g_min, g_max=g_max, epsilon=epsilon,
        terminal=terminal, terminal_value=terminal_value,
        storage_reserve=storage_reserve,
    )


def export_system_csv(system, fleet_path, load_path, errors_path):
    """Write the three ingestion files for a system (inverse of load_system_csv)."""
    with open(fleet_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gen_id", "capacity_mw", "c0", "c1", "c2"])
        for i, seg in enumerate(system.fleet.segments):
            writer.writerow([f"g{i + 1}", f"{seg.capacity:.10g}", f"{seg.c0:.10g}",
                             f"{seg.c1:.10g}", f"{seg.c2:.10g}"])
    with open(load_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "d_mw"])
        for t in range(1, system.horizon + 1):
            writer.writerow([t, f"{system.net_load.forecast[t - 1]:.10g}"])
    with open(errors_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mu_mw", "sigma_mw"])
        for t in range(1, system.horizon + 1):
            writer.writerow([t, f"{system.net_load.mu[t - 1]:.10g}",
                             f"{system.net_load.sigma[t - 1]:.10g}"])
