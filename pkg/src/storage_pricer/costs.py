"""Generator and storage cost models.

Two representations of fleet cost live side by side: an exact merit-order
piecewise curve built from per-generator segments (used for ex-post metric
evaluation) and a fitted polynomial of degree <= 4 (used inside dispatch,
where the expectation of a polynomial of an affine-Gaussian argument has a
closed form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import gaussian_raw_moment
from .errors import DomainError, SchemaError, UnsupportedDegreeError

MAX_DEGREE = 4


@dataclass(frozen=True)
class CostPolynomial:
    """Fleet cost as sum_i coeffs[i] * g**i, valid on [g_min, g_max].

    Construction verifies that marginal cost stays nonnegative on the
    declared operating domain (dense sampling plus a derivative sign check
    at the endpoints of monotone runs).
    """

    coeffs: tuple
    g_min: float = 0.0
    g_max: float = 1.0
    rmse: float | None = None

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        if len(coeffs) == 0:
            raise DomainError("cost polynomial needs at least a constant term")
        if len(coeffs) - 1 > MAX_DEGREE:
            raise UnsupportedDegreeError(f"degree {len(coeffs) - 1} exceeds the supported maximum {MAX_DEGREE}")
        if self.g_min > self.g_max:
            raise DomainError("empty operating domain")
        object.__setattr__(self, "coeffs", coeffs)
        grid = np.linspace(self.g_min, self.g_max, 257)
        marg = self.marginal(grid)
        if np.min(marg) < -1e-9 * max(1.0, float(np.max(np.abs(marg)))):
            raise DomainError(
                f"marginal cost dips to {float(np.min(marg)):.6g} on [{self.g_min}, {self.g_max}]"
            )

    @property
    def degree(self):
        return len(self.coeffs) - 1

    def value(self, g):
        out = np.zeros_like(np.asarray(g, dtype=float))
        for i, c in enumerate(self.coeffs):
            out = out + c * np.asarray(g, dtype=float) ** i
        return float(out) if np.ndim(g) == 0 else out

    def marginal(self, g):
        g = np.asarray(g, dtype=float)
        out = np.zeros_like(g)
        for i, c in enumerate(self.coeffs):
            if i >= 1:
                out = out + i * c * g ** (i - 1)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Segment:
    """One merit-order block: capacity and a per-unit quadratic cost c0 + c1 x + c2 x^2."""

    capacity: float
    c0: float
    c1: float
    c2: float = 0.0

    def __post_init__(self):
        if self.capacity <= 0:
            raise DomainError(f"segment capacity must be > 0, got {self.capacity}")

    def cost(self, x):
        return self.c0 + self.c1 * x + self.c2 * x * x

    def marginal_at(self, x):
        return self.c1 + 2.0 * self.c2 * x


@dataclass(frozen=True)
class FleetCurve:
    """Merit-order stack of segments with non-decreasing marginal cost."""

    segments: tuple

    def __post_init__(self):
        segs = tuple(sorted(self.segments, key=lambda s: s.c1))
        if not segs:
            raise DomainError("fleet has no segments")
        prev_top = -math.inf
        for s in segs:
            if s.marginal_at(0.0) < prev_top - 1e-9:
                raise DomainError(
                    "segments violate merit order: marginal cost decreases across a boundary"
                )
            prev_top = s.marginal_at(s.capacity)
        object.__setattr__(self, "segments", segs)

    @property
    def total_capacity(self):
        return sum(s.capacity for s in self.segments)

    def scaled(self, factor):
        """Fleet with every segment capacity multiplied by ``factor`` (e.g. retirement)."""
        if factor <= 0:
            raise DomainError(f"capacity scale must be > 0, got {factor}")
        return FleetCurve(tuple(Segment(s.capacity * factor, s.c0, s.c1, s.c2) for s in self.segments))


@dataclass(frozen=True)
class StorageSpec:
    """Aggregate storage: power/energy caps, efficiency, marginal cost, initial stock."""

    p_max: float
    e_max: float
    eta: float
    marginal_cost: float
    e_init: float

    def __post_init__(self):
        if self.p_max <= 0 or self.e_max <= 0:
            raise DomainError("storage power and energy capacity must be > 0")
        if not (0.0 < self.eta <= 1.0):
            raise DomainError(f"efficiency must lie in (0, 1], got {self.eta}")
        if not (0.0 <= self.e_init <= self.e_max):
            raise DomainError(f"initial SoC {self.e_init} outside [0, {self.e_max}]")
        if self.marginal_cost < 0:
            raise DomainError("storage marginal cost must be >= 0")


def _binom_terms(coeffs, g, phi, moments, dg=0, dphi=0):
    """Mixed partial d^(dg+dphi) E[G(g + phi d)] / dg^dg dphi^dphi, closed form.

    E[G(g + phi d)] = sum_i C_i sum_k C(i,k) g^(i-k) phi^k E[d^k]; derivatives
    just lower the powers with falling factorials.
    """
    total = 0.0
    for i, c in enumerate(coeffs):
        if c == 0.0:
            continue
        for k in range(i + 1):
            pg, pp = i - k, k
            fg = 1.0
            for _ in range(dg):
                fg *= pg
                pg -= 1
            fp = 1.0
            for _ in range(dphi):
                fp *= pp
                pp -= 1
            if fg == 0.0 or fp == 0.0:
                continue
            mk = gaussian_raw_moment(moments, k)
            total += c * math.comb(i, k) * fg * fp * (g**pg) * (phi**pp) * mk
    return total


def expected_gen_cost(poly, g, phi, moments):
    """Expected generator cost E[G(g + phi d)] with Gaussian raw moments."""
    if not (0.0 <= phi <= 1.0):
        raise DomainError(f"reserve ratio must lie in [0, 1], got {phi}")
    return _binom_terms(poly.coeffs, g, phi, moments)


def marginal_expected_cost(poly, g, phi, moments):
    """d E[G(g + phi d)] / dg — the marginal-cost map used by the pricing results."""
    if not (0.0 <= phi <= 1.0):
        raise DomainError(f"reserve ratio must lie in [0, 1], got {phi}")
    return _binom_terms(poly.coeffs, g, phi, moments, dg=1)


def expected_cost_derivatives(poly, g, phi, moments):
    """Value, gradient, and Hessian of E[G(g + phi d)] in (g, phi)."""
    f = _binom_terms(poly.coeffs, g, phi, moments)
    dg = _binom_terms(poly.coeffs, g, phi, moments, dg=1)
    dp = _binom_terms(poly.coeffs, g, phi, moments, dphi=1)
    dgg = _binom_terms(poly.coeffs, g, phi, moments, dg=2)
    dgp = _binom_terms(poly.coeffs, g, phi, moments, dg=1, dphi=1)
    dpp = _binom_terms(poly.coeffs, g, phi, moments, dphi=2)
    return f, dg, dp, dgg, dgp, dpp


def expected_storage_cost(storage, p, psi, mu):
    """Expected storage cost M (p + psi mu)."""
    if not (0.0 <= psi <= 1.0):
        raise DomainError(f"reserve ratio must lie in [0, 1], got {psi}")
    if p < 0:
        raise DomainError("discharge power must be >= 0")
    return storage.marginal_cost * (p + psi * mu)


def check_expected_cost_convexity(poly, moments_list, g_lo, g_hi, n_grid=15):
    """Convexity gate: Hessian of E[G] PSD over a (g, phi) grid for each period.

    Raises DomainError on failure; dispatch refuses such polynomials.
    """
    for moments in moments_list:
        for g in np.linspace(g_lo, g_hi, n_grid):
            for phi in np.linspace(0.0, 1.0, 7):
                _, _, _, dgg, dgp, dpp = expected_cost_derivatives(poly, float(g), float(phi), moments)
                tr = dgg + dpp
                det = dgg * dpp - dgp * dgp
                scale = max(1.0, abs(dgg), abs(dpp))
                if tr < -1e-9 * scale or det < -1e-9 * scale * scale:
                    raise DomainError(
                        f"expected cost not convex at g={g:.4g}, phi={phi:.3g} "
                        f"(trace={tr:.4g}, det={det:.4g})"
                    )


def merit_order_cost(fleet, q):
    """Exact fleet cost of producing q MW by stacking segments in merit order.

    Segment constants are incurred only for segments that actually run.
    """
    if q < -1e-9 or q > fleet.total_capacity + 1e-9:
        raise DomainError(f"output {q} outside [0, {fleet.total_capacity}]")
    remaining = min(max(q, 0.0), fleet.total_capacity)
    total = 0.0
    for seg in fleet.segments:
        if remaining <= 0.0:
            break
        x = min(remaining, seg.capacity)
        total += seg.cost(x)
        remaining -= x
    return total


def fit_polynomial_to_merit_curve(fleet, degree, n_grid=200, domain=None):
    """Least-squares polynomial fit of the cumulative merit cost curve.

    Uniform ``n_grid``-point grid over [0, total capacity].  ``domain``
    declares the operating range the fit must be valid on (marginal cost
    nonnegative); it defaults to the full [0, capacity] span.  The fitted
    polynomial carries the achieved RMSE.
    """
    if not (1 <= degree <= MAX_DEGREE):
        raise UnsupportedDegreeError(f"fit degree must lie in [1, {MAX_DEGREE}], got {degree}")
    cap = fleet.total_capacity
    if cap <= 0:
        raise DomainError("degenerate fleet with zero capacity")
    grid = np.linspace(0.0, cap, n_grid)
    y = np.array([merit_order_cost(fleet, float(qq)) for qq in grid])
    # Vandermonde least squares in a scaled variable for conditioning.
    scale = cap
    V = np.vander(grid / scale, degree + 1, increasing=True)
    sol, *_ = np.linalg.lstsq(V, y, rcond=None)
    coeffs = tuple(float(sol[i]) / scale**i for i in range(degree + 1))
    resid = V @ sol - y
    rmse = float(np.sqrt(np.mean(resid**2)))
    g_lo, g_hi = (0.0, cap) if domain is None else domain
    return CostPolynomial(coeffs=coeffs, g_min=g_lo, g_max=g_hi, rmse=rmse)


def load_fleet_csv(path):
    """Read a fleet from CSV columns ``gen_id, capacity_mw, c0, c1, c2``."""
    import csv

    expected = ["gen_id", "capacity_mw", "c0", "c1", "c2"]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != expected:
            raise SchemaError(f"{path}: expected header {expected}, got {header}")
        segments = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise SchemaError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                cap, c0, c1, c2 = (float(v) for v in row[1:])
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: non-numeric value in {row[1:]!r}") from None
            segments.append(Segment(capacity=cap, c0=c0, c1=c1, c2=c2))
    if not segments:
        raise SchemaError(f"{path}: no generator rows")
    return FleetCurve(tuple(segments))
