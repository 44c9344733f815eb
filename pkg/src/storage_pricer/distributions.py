"""Net-load forecast-error models: quantiles, raw moments, and MLE fitting.

Three interchangeable uncertainty realizations are supported for building
dispatch quantiles: a Gaussian assumption, distribution-free robust factors
(Cantelli-style bounds under shape information), and a three-parameter
"versatile" logistic family fitted to historical samples.  An empirical
model backed by raw samples is also provided for baseline comparisons.

All operations are pure functions; model objects are immutable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import DomainError, FitError

_SQRT2 = math.sqrt(2.0)

# Shape tags accepted by the robust factors: no assumption, symmetric,
# unimodal, symmetric-and-unimodal.
ROBUST_SHAPES = ("NA", "S", "U", "SU")


@dataclass(frozen=True)
class ErrorMoments:
    """First two moments of a forecast error, in MW."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not math.isfinite(self.mu) or not math.isfinite(self.sigma):
            raise DomainError("moments must be finite")
        if self.sigma < 0.0:
            raise DomainError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class GaussianModel:
    """Errors are normal with the per-period moments."""


@dataclass(frozen=True)
class RobustModel:
    """Distribution-free model: normalized robust factors applied to (mu, sigma)."""

    shape: str = "NA"

    def __post_init__(self):
        if self.shape not in ROBUST_SHAPES:
            raise DomainError(f"unknown robust shape {self.shape!r}; expected one of {ROBUST_SHAPES}")


@dataclass(frozen=True)
class VersatileModel:
    """Three-parameter logistic-family distribution with closed-form inverse CDF.

    CDF(x) = (1 + exp(-a (x - c)))**(-b) with a > 0, b > 0.
    """

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (self.a > 0.0 and self.b > 0.0):
            raise DomainError(f"versatile parameters require a > 0 and b > 0, got a={self.a}, b={self.b}")

    def cdf(self, x):
        u = -self.a * (np.asarray(x, dtype=float) - self.c)
        out = np.exp(-self.b * np.logaddexp(0.0, u))
        return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out

    def pdf(self, x):
        u = -self.a * (np.asarray(x, dtype=float) - self.c)
        logpdf = math.log(self.a) + math.log(self.b) + u - (self.b + 1.0) * np.logaddexp(0.0, u)
        out = np.exp(logpdf)
        return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out

    def mean(self):
        return self.c + (special.digamma(self.b) - special.digamma(1.0)) / self.a

    def std(self):
        var = (special.polygamma(1, self.b) + special.polygamma(1, 1.0)) / self.a**2
        return math.sqrt(var)


@dataclass(frozen=True)
class EmpiricalModel:
    """Errors described by raw historical samples (at least two)."""

    samples: tuple

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float)
        if arr.ndim != 1 or arr.size < 2:
            raise DomainError("empirical model needs at least 2 samples")
        if not np.all(np.isfinite(arr)):
            raise DomainError("empirical samples must be finite")
        object.__setattr__(self, "samples", tuple(float(v) for v in arr))

    def mean(self):
        return float(np.mean(self.samples))

    def std(self):
        return float(np.std(self.samples))


# Any of the four families above.
UncertaintyModel = GaussianModel | RobustModel | VersatileModel | EmpiricalModel


def _check_epsilon(epsilon, upper_inclusive=False):
    hi_ok = epsilon <= 1.0 if upper_inclusive else epsilon < 1.0
    if not (0.0 < epsilon and hi_ok):
        bound = "(0, 1]" if upper_inclusive else "(0, 1)"
        raise DomainError(f"epsilon must lie in {bound}, got {epsilon}")


def normal_cdf(x):
    """Standard normal CDF via erf."""
    return 0.5 * (1.0 + math.erf(x / _SQRT2))


def gaussian_quantile(epsilon):
    """Return z with Phi(z) = 1 - epsilon, by bisection on the erf-based CDF.

    Bisection trades speed for a directly auditable accuracy bound:
    |Phi(z) - (1 - epsilon)| <= 1e-10.
    """
    _check_epsilon(epsilon)
    target = 1.0 - epsilon
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    return 0.5 * (lo + hi)


def robust_quantile(shape, epsilon):
    """Normalized robust inverse-CDF factor under incomplete information.

    Branch boundaries are inclusive on the lower-epsilon side, exactly as
    tabulated; continuity across branches is not guaranteed and not required.
    """
    _check_epsilon(epsilon, upper_inclusive=True)
    if shape == "NA":
        return math.sqrt((1.0 - epsilon) / epsilon)
    if shape == "S":
        if epsilon <= 0.5:
            return math.sqrt(1.0 / (2.0 * epsilon))
        return 0.0
    if shape == "U":
        if epsilon <= 1.0 / 6.0:
            return math.sqrt((4.0 - 9.0 * epsilon) / (9.0 * epsilon))
        return math.sqrt((3.0 - 3.0 * epsilon) / (1.0 + 3.0 * epsilon))
    if shape == "SU":
        if epsilon <= 1.0 / 6.0:
            return math.sqrt(2.0 / (9.0 * epsilon))
        if epsilon <= 0.5:
            return math.sqrt(3.0) * (1.0 - 2.0 * epsilon)
        return 0.0
    raise DomainError(f"unknown robust shape {shape!r}; expected one of {ROBUST_SHAPES}")


def versatile_inverse_cdf(a, b, c, epsilon):
    """Closed-form quantile of the versatile family at level 1 - epsilon."""
    if not (a > 0.0 and b > 0.0):
        raise DomainError(f"versatile parameters require a > 0 and b > 0, got a={a}, b={b}")
    _check_epsilon(epsilon)
    return c - math.log((1.0 - epsilon) ** (-1.0 / b) - 1.0) / a


def empirical_quantile(samples, q):
    """Order-statistic quantile with linear interpolation between samples."""
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise DomainError("empirical quantile of an empty sample set")
    if not (0.0 < q < 1.0):
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    return float(np.quantile(arr, q, method="linear"))


def _versatile_negll_and_grad(theta, x):
    """Mean negative log-likelihood of the versatile family and its gradient.

    Parameterized as theta = (log a, log b, c) so positivity is structural.
    """
    ta, tb, c = theta
    a, b = math.exp(ta), math.exp(tb)
    u = -a * (x - c)
    sp = np.logaddexp(0.0, u)          # log(1 + e^u)
    sig = special.expit(u)             # e^u / (1 + e^u)
    ll = ta + tb + u - (b + 1.0) * sp
    w = 1.0 - (b + 1.0) * sig
    dll_da = 1.0 / a - (x - c) * w
    dll_db = 1.0 / b - sp
    dll_dc = a * w
    grad = -np.array([np.mean(dll_da) * a, np.mean(dll_db) * b, np.mean(dll_dc)])
    return -float(np.mean(ll)), grad


def _versatile_total_grad(a, b, c, x):
    """Gradient of the total log-likelihood in the original (a, b, c) space."""
    u = -a * (x - c)
    sp = np.logaddexp(0.0, u)
    sig = special.expit(u)
    w = 1.0 - (b + 1.0) * sig
    return np.array([
        np.sum(1.0 / a - (x - c) * w),
        np.sum(1.0 / b - sp),
        np.sum(a * w),
    ])


def fit_versatile_mle(samples, grad_tol=1e-6, max_polish=40):
    """Fit a VersatileModel by maximum likelihood.

    Quasi-Newton (L-BFGS-B) on the closed-form log-likelihood from three
    deterministic starts, followed by Newton polishing until the total
    log-likelihood gradient norm drops below ``grad_tol``.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < 50:
        raise DomainError(f"MLE fit requires at least 50 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DomainError("samples must be finite")

    m, s = float(np.mean(x)), float(np.std(x))
    if s <= 0.0:
        raise FitError("samples are constant; versatile fit is undefined", sample_std=s)
    a0 = math.pi / (s * math.sqrt(3.0))  # logistic (b=1) moment match
    starts = [
        (math.log(a0), 0.0, m),
        (math.log(2.0 * a0), math.log(3.0), m - s),
        (math.log(0.5 * a0), math.log(0.4), m + s),
    ]

    best = None
    for theta0 in starts:
        res = optimize.minimize(
            _versatile_negll_and_grad, np.array(theta0), args=(x,),
            jac=True, method="L-BFGS-B",
            options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-12},
        )
        if best is None or res.fun < best.fun:
            best = res

    # Newton polish on the total-gradient root; the quasi-Newton optimum is
    # close enough that a finite-difference Hessian of the analytic gradient
    # converges in a handful of steps.
    a, b = math.exp(best.x[0]), math.exp(best.x[1])
    c = float(best.x[2])
    n = x.size
    for _ in range(max_polish):
        g = _versatile_total_grad(a, b, c, x)
        if np.linalg.norm(g) <= 0.1 * grad_tol:
            break
        hstep = np.array([max(1e-7 * a, 1e-9), max(1e-7 * b, 1e-9), max(1e-7 * (1 + abs(c)), 1e-9)])
        H = np.empty((3, 3))
        for j, dj in enumerate(hstep):
            p = [a, b, c]
            q = [a, b, c]
            p[j] += dj
            q[j] -= dj
            H[:, j] = (_versatile_total_grad(*p, x) - _versatile_total_grad(*q, x)) / (2.0 * dj)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        while scale > 1e-6:
            na, nb, nc = a + scale * step[0], b + scale * step[1], c + scale * step[2]
            if na > 0 and nb > 0:
                if np.linalg.norm(_versatile_total_grad(na, nb, nc, x)) < np.linalg.norm(g):
                    a, b, c = na, nb, nc
                    break
            scale *= 0.5
        else:
            break

    gnorm = float(np.linalg.norm(_versatile_total_grad(a, b, c, x)))
    if gnorm > grad_tol:
        raise FitError(
            "versatile MLE did not converge",
            grad_norm=gnorm, n_samples=n, a=a, b=b, c=c,
        )
    return VersatileModel(a=a, b=b, c=c)


def gaussian_raw_moment(moments, k):
    """E[d^k] for d ~ N(mu, sigma^2); only even powers of sigma contribute."""
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise DomainError(f"moment order must be a nonnegative integer, got {k}")
    mu, sigma = moments.mu, moments.sigma
    total = 0.0
    for j in range(0, k + 1, 2):
        # (j-1)!! with the empty-product convention for j = 0.
        dfact = 1.0
        for v in range(j - 1, 1, -2):
            dfact *= v
        total += math.comb(k, j) * mu ** (k - j) * sigma**j * dfact
    return total


def _standardized_levels(model, epsilon):
    """Lower/upper epsilon-level points of the model, with its own mean/std."""
    if isinstance(model, VersatileModel):
        lo = versatile_inverse_cdf(model.a, model.b, model.c, 1.0 - epsilon)
        hi = versatile_inverse_cdf(model.a, model.b, model.c, epsilon)
        return lo, hi, model.mean(), model.std()
    if isinstance(model, EmpiricalModel):
        lo = empirical_quantile(model.samples, epsilon)
        hi = empirical_quantile(model.samples, 1.0 - epsilon)
        return lo, hi, model.mean(), model.std()
    raise DomainError(f"no standardized levels for model {type(model).__name__}")


def quantile_pair(moments, epsilon_i, model):
    """Lower/upper dispatch quantiles (d_hat, d_tilde) at risk level epsilon_i.

    Gaussian and robust families are symmetric factors around mu; versatile
    and empirical families keep their own asymmetric quantile shape, mapped
    affinely onto the per-period (mu, sigma).
    """
    _check_epsilon(epsilon_i)
    mu, sigma = moments.mu, moments.sigma
    if isinstance(model, GaussianModel):
        z = gaussian_quantile(epsilon_i)
        return mu - z * sigma, mu + z * sigma
    if isinstance(model, RobustModel):
        r = robust_quantile(model.shape, epsilon_i)
        return mu - r * sigma, mu + r * sigma
    if isinstance(model, (VersatileModel, EmpiricalModel)):
        lo, hi, m, s = _standardized_levels(model, epsilon_i)
        if s <= 0.0:
            return mu, mu
        return mu + sigma * (lo - m) / s, mu + sigma * (hi - m) / s
    raise DomainError(f"unknown uncertainty model {type(model).__name__}")


def standardized_draws(model, size, rng):
    """Zero-mean, unit-std draws shaped like the model's error distribution.

    The robust family is a bound, not a distribution; it falls back to
    Gaussian draws (its guarantee then holds a fortiori).
    """
    if isinstance(model, (GaussianModel, RobustModel)):
        return rng.standard_normal(size)
    if isinstance(model, VersatileModel):
        u = rng.random(size)
        raw = model.c - np.log(u ** (-1.0 / model.b) - 1.0) / model.a
        return (raw - model.mean()) / model.std()
    if isinstance(model, EmpiricalModel):
        arr = np.asarray(model.samples)
        raw = rng.choice(arr, size=size, replace=True)
        return (raw - model.mean()) / model.std()
    raise DomainError(f"unknown uncertainty model {type(model).__name__}")


def load_error_samples_csv(path):
    """Read historical error samples from a single-column CSV with header ``error_mw``."""
    import csv

    from .errors import SchemaError

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["error_mw"]:
            raise SchemaError(f"{path}: expected single header 'error_mw', got {header}")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 1:
                raise SchemaError(f"{path}:{lineno}: expected one column, got {len(row)}")
            try:
                values.append(float(row[0]))
            except ValueError:
                raise SchemaError(f"{path}:{lineno}: not a number: {row[0]!r}") from None
    return np.asarray(values, dtype=float)
