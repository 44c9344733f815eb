"""Deterministic reformulation of the joint chance constraints.

Each joint two-sided chance constraint (generator bounds, SoC bounds) is
split by Bonferroni into its two one-sided parts, each carrying half the
period's risk budget under equal allocation; the one-sided storage power
constraints keep the full budget, as they are individual constraints.  The
probabilistic terms are then replaced by signed quantiles of the forecast
error, yielding linear rows tagged with their dual identity.
"""

from __future__ import annotations

from dataclasses import dataclass

from .distributions import quantile_pair
from .errors import BuildError, DomainError

# Dual-variable tags for emitted rows, in emission order per period.
ROW_KINDS = (
    "nu_lo", "nu_hi",           # generator lower/upper (joint group, two-sided)
    "alpha_lo", "alpha_hi",     # charge nonnegativity / charge power cap
    "beta_lo", "beta_hi",       # discharge nonnegativity / discharge power cap
    "iota_lo", "iota_hi",       # SoC lower/upper (joint group, two-sided)
)


@dataclass(frozen=True)
class RiskAllocation:
    """Per-constraint risk levels summing to at most the total budget."""

    epsilon_total: float
    epsilons: tuple
    policy: str

    def __post_init__(self):
        if any(e <= 0.0 for e in self.epsilons):
            raise DomainError("all allocated risk levels must be > 0")
        if sum(self.epsilons) > self.epsilon_total + 1e-12:
            raise DomainError("allocated risk exceeds the total budget")


def allocate_risk(epsilon, n, policy="equal"):
    """Split a joint risk budget over n constraints.

    ``policy`` is either the string ``"equal"`` (epsilon/n each) or a
    sequence of positive weights summing to 1 (w_i * epsilon each).
    """
    if not (0.0 < epsilon < 1.0):
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    if n < 1:
        raise DomainError(f"need at least one constraint, got n={n}")
    if isinstance(policy, str):
        if policy != "equal":
            raise DomainError(f"unknown risk policy {policy!r}")
        return RiskAllocation(epsilon, tuple(epsilon / n for _ in range(n)), "equal")
    weights = tuple(float(w) for w in policy)
    if len(weights) != n:
        raise DomainError(f"expected {n} weights, got {len(weights)}")
    if any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise DomainError("custom weights must be positive and sum to 1")
    return RiskAllocation(epsilon, tuple(w * epsilon for w in weights), "custom")


@dataclass(frozen=True)
class QuantileTriple:
    """Signed quantile pair and the risk level that produced it."""

    d_hat: float
    d_tilde: float
    epsilon: float


@dataclass(frozen=True)
class PeriodQuantiles:
    """Quantile triples for the three constraint groups of one period."""

    gen: QuantileTriple
    power: QuantileTriple
    soc: QuantileTriple


def make_period_quantiles(moments, model, epsilon, policy="equal"):
    """Quantiles for one period under the documented Bonferroni split.

    The two-sided generator and SoC groups each decompose into two one-sided
    constraints (risk epsilon/2 per side under equal allocation); the storage
    power caps are individual constraints at the full epsilon.
    """
    pair_alloc = allocate_risk(epsilon, 2, policy)
    eps_side = pair_alloc.epsilons[0]
    gen_hat, gen_tilde = quantile_pair(moments, eps_side, model)
    soc_hat, soc_tilde = quantile_pair(moments, pair_alloc.epsilons[1], model)
    pow_hat, pow_tilde = quantile_pair(moments, epsilon, model)
    return PeriodQuantiles(
        gen=QuantileTriple(gen_hat, gen_tilde, eps_side),
        power=QuantileTriple(pow_hat, pow_tilde, epsilon),
        soc=QuantileTriple(soc_hat, soc_tilde, pair_alloc.epsilons[1]),
    )


@dataclass(frozen=True)
class ConstraintRow:
    """One linear row: sum(coeffs[var] * var) <= / == rhs."""

    coeffs: dict
    sense: str
    rhs: float
    kind: str
    period: int
    epsilon: float | None = None

    @property
    def tag(self):
        return f"{self.kind}[{self.period}]"


@dataclass(frozen=True)
class LinearConstraintSet:
    rows: tuple

    def __post_init__(self):
        tags = [r.tag for r in self.rows]
        if len(set(tags)) != len(tags):
            raise BuildError("duplicate constraint tags")

    def by_kind(self, kind):
        return [r for r in self.rows if r.kind == kind]

    def row(self, kind, period):
        for r in self.rows:
            if r.kind == kind and r.period == period:
                return r
        raise KeyError(f"{kind}[{period}]")


def build_deterministic_constraints(horizon, gen_bounds, storage, quantiles):
    """Emit the per-period reformulated inequality rows.

    ``quantiles`` maps each period (1-based) to a PeriodQuantiles; a missing
    slot is a build error naming it.  ``storage`` may be None (no storage
    rows).  Variables are referenced symbolically: g[t], p[t], b[t], phi[t],
    psi[t], e[t] with e[1] the fixed initial stock (the caller substitutes).
    """
    g_lo, g_hi = gen_bounds
    if g_lo > g_hi:
        raise BuildError(f"generator bounds reversed: {g_lo} > {g_hi}")
    rows = []
    for t in range(1, horizon + 1):
        q = quantiles.get(t)
        if q is None:
            raise BuildError(f"missing quantiles for period {t}")
        rows.append(ConstraintRow(
            {f"g[{t}]": -1.0, f"phi[{t}]": -q.gen.d_hat}, "<=", -g_lo,
            "nu_lo", t, q.gen.epsilon))
        rows.append(ConstraintRow(
            {f"g[{t}]": 1.0, f"phi[{t}]": q.gen.d_tilde}, "<=", g_hi,
            "nu_hi", t, q.gen.epsilon))
        if storage is None:
            continue
        eta = storage.eta
        rows.append(ConstraintRow(
            {f"b[{t}]": -1.0}, "<=", 0.0, "alpha_lo", t, None))
        rows.append(ConstraintRow(
            {f"b[{t}]": 1.0, f"psi[{t}]": -q.power.d_hat}, "<=", storage.p_max,
            "alpha_hi", t, q.power.epsilon))
        rows.append(ConstraintRow(
            {f"p[{t}]": -1.0}, "<=", 0.0, "beta_lo", t, None))
        rows.append(ConstraintRow(
            {f"p[{t}]": 1.0, f"psi[{t}]": q.power.d_tilde}, "<=", storage.p_max,
            "beta_hi", t, q.power.epsilon))
        rows.append(ConstraintRow(
            {f"p[{t}]": 1.0 / eta, f"psi[{t}]": q.soc.d_tilde / eta, f"e[{t}]": -1.0},
            "<=", 0.0, "iota_lo", t, q.soc.epsilon))
        rows.append(ConstraintRow(
            {f"e[{t}]": 1.0, f"b[{t}]": eta, f"psi[{t}]": -eta * q.soc.d_hat},
            "<=", storage.e_max, "iota_hi", t, q.soc.epsilon))
    return LinearConstraintSet(tuple(rows))
