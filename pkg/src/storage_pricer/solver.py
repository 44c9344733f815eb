"""Dense primal-dual interior-point solver with certified KKT residuals.

Solves   min f(x)  s.t.  A x = b,  G x <= h
for smooth convex f supplied as (value, gradient, Hessian) callbacks.

Duals follow the fixed Lagrangian convention

    L(x, y, z) = f(x) + y^T (A x - b) + z^T (G x - h),   z >= 0,

so at an optimum  grad f + A^T y + G^T z = 0.  Under this convention the
marginal change of the optimal value per unit increase of an equality rhs
is -y.  Inequality duals are reported nonnegative.

The algorithm is an infeasible-start Mehrotra predictor-corrector on the
perturbed KKT system: full steps for quadratic objectives, and for
degree-3/4 objectives the same steps damped only against residual-merit
divergence (the step tracks the central path rather than descending the
residual norm).  A final active-set polish re-solves the equality-
constrained KKT system and pushes residuals toward machine precision.
Everything is dense; the target scale is a few thousand variables at most.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DomainError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITER_LIMIT = "iter_limit"


@dataclass
class ConvexProgram:
    """Smooth convex objective plus dense linear constraints."""

    n: int
    value: callable
    grad: callable
    hess: callable
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    quadratic: bool = False   # constant Hessian: enables undamped steps

    def __post_init__(self):
        self.A = np.zeros((0, self.n)) if self.A is None else np.atleast_2d(np.asarray(self.A, float))
        self.b = np.zeros(0) if self.b is None else np.atleast_1d(np.asarray(self.b, float))
        self.G = np.zeros((0, self.n)) if self.G is None else np.atleast_2d(np.asarray(self.G, float))
        self.h = np.zeros(0) if self.h is None else np.atleast_1d(np.asarray(self.h, float))
        if self.A.shape != (self.b.size, self.n):
            raise DomainError(f"equality block shape mismatch: A {self.A.shape}, b {self.b.shape}")
        if self.G.shape != (self.h.size, self.n):
            raise DomainError(f"inequality block shape mismatch: G {self.G.shape}, h {self.h.shape}")


def quadratic_program(Q, c, A=None, b=None, G=None, h=None):
    """Convenience constructor for min 0.5 x^T Q x + c^T x."""
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    return ConvexProgram(
        n=n,
        value=lambda x: float(0.5 * x @ Q @ x + c @ x),
        grad=lambda x: Q @ x + c,
        hess=lambda x: Q,
        A=A, b=b, G=G, h=h, quadratic=True,
    )


@dataclass
class SolveResult:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    slacks: np.ndarray
    status: str
    residuals: dict
    objective: float
    iterations: int
    degenerate_rows: tuple = ()

    @property
    def max_residual(self):
        return max(self.residuals.values()) if self.residuals else np.inf


def _residuals(prog, x, y, z, s):
    gx = prog.grad(x)
    r_d = gx + prog.A.T @ y + prog.G.T @ z
    r_p = prog.A @ x - prog.b
    r_g = prog.G @ x + s - prog.h
    comp = s * z if z.size else np.zeros(0)
    return r_d, r_p, r_g, comp


def _merit(prog, x, y, z, s, mu):
    r_d, r_p, r_g, comp = _residuals(prog, x, y, z, s)
    pieces = [r_d, r_p, r_g]
    if comp.size:
        pieces.append(comp - mu)
    return float(np.sqrt(sum(float(v @ v) for v in pieces)))


def _step_to_boundary(v, dv, cap=1.0):
    neg = dv < 0
    if not np.any(neg):
        return cap
    return min(cap, float(np.min(-v[neg] / dv[neg])))


def _polish_solve(prog, x0, active):
    """Newton on the equality-constrained KKT system of a fixed active set."""
    Ga = prog.G[active]
    ha = prog.h[active]
    p = prog.A.shape[0]
    ka = int(np.sum(active))
    xx = x0.copy()
    yy = np.zeros(p)
    za = np.zeros(ka)
    for _ in range(3):
        H = prog.hess(xx)
        gx = prog.grad(xx)
        K0 = np.zeros((prog.n + p + ka, prog.n + p + ka))
        K0[: prog.n, : prog.n] = H
        K0[: prog.n, prog.n : prog.n + p] = prog.A.T
        K0[prog.n : prog.n + p, : prog.n] = prog.A
        K0[: prog.n, prog.n + p :] = Ga.T
        K0[prog.n + p :, : prog.n] = Ga
        # Factor a lightly regularized copy (redundant active rows make K0
        # singular), then refine against the pure system so the
        # regularization does not leak into the active-row residuals.
        K = K0.copy()
        K[: prog.n, : prog.n] += 1e-14 * max(1.0, float(np.linalg.norm(H, np.inf))) * np.eye(prog.n)
        K[prog.n :, prog.n :] -= 1e-13 * np.eye(p + ka)
        rhs = np.concatenate([-gx, prog.b - prog.A @ xx, ha - Ga @ xx])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                lu = scipy.linalg.lu_factor(K)
                sol = scipy.linalg.lu_solve(lu, rhs)
                for _ in range(3):
                    sol += scipy.linalg.lu_solve(lu, rhs - K0 @ sol)
        except (scipy.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(sol)):
            return None
        xx = xx + sol[: prog.n]
        yy = sol[prog.n : prog.n + p]
        za = sol[prog.n + p :]
    return xx, yy, za


def _polish(prog, x, y, z, s, tol):
    """Active-set refinement from a near-optimal interior-point iterate.

    Starts from a complementarity-based guess and iterates: solve the
    equality-constrained KKT system, drop rows with clearly negative
    multipliers, add rows the candidate violates.  Degenerate faces leave
    weakly-active rows with near-zero multipliers, which is fine.  Returns
    an improved iterate or None when no consistent active set is found.
    """
    m = prog.h.size
    if m == 0:
        out = _polish_solve(prog, x, np.zeros(0, dtype=bool))
        if out is None:
            return None
        xx, yy, _ = out
        return xx, yy, np.zeros(0), np.zeros(0)
    scale_h = 1.0 + np.abs(prog.h)
    active = (z > s) | (s <= 1e3 * tol * scale_h)
    for _ in range(8):
        out = _polish_solve(prog, x, active)
        if out is None:
            return None
        xx, yy, za = out
        viol = prog.G @ xx - prog.h
        add = (viol > 10 * tol * scale_h) & ~active
        drop = np.zeros(m, dtype=bool)
        drop[active] = za < -10 * tol
        if not np.any(add) and not np.any(drop):
            break
        active = (active | add) & ~drop
    else:
        return None
    if za.size and np.min(za) < -10 * tol:
        return None
    zz = np.zeros(m)
    zz[active] = np.maximum(za, 0.0)
    ss = prog.h - prog.G @ xx
    if np.min(ss) < -10 * tol:
        return None
    ss = np.maximum(ss, 0.0)
    return xx, yy, zz, ss


def solve_convex(program, tol=1e-8, iter_cap=200, _diagnose=True):
    """Solve the program to absolute KKT residuals <= tol (sup-norm).

    Optimal results certify stationarity, primal feasibility, and
    complementarity; infeasibility is diagnosed with a phase-1 problem,
    and hitting the iteration cap returns the best iterate with residuals.
    """
    if tol <= 0:
        raise DomainError("tolerance must be > 0")
    prog = program
    n, p, m = prog.n, prog.A.shape[0], prog.G.shape[0]

    # Equality consistency gate: if Ax = b has no solution at all, stop here.
    if p:
        x_ls, *_ = np.linalg.lstsq(prog.A, prog.b, rcond=None)
        if np.linalg.norm(prog.A @ x_ls - prog.b, np.inf) > 1e-8 * (1.0 + np.linalg.norm(prog.b, np.inf)):
            return SolveResult(x_ls, np.zeros(p), np.zeros(m), np.zeros(m), INFEASIBLE,
                               {"stationarity": np.inf, "primal_eq": np.inf,
                                "primal_ineq": np.inf, "complementarity": np.inf},
                               np.nan, 0)
        x = x_ls
    else:
        x = np.zeros(n)

    if m:
        raw = prog.h - prog.G @ x
        shift = max(0.0, -float(np.min(raw))) + max(1.0, 0.01 * float(np.linalg.norm(prog.h, np.inf) if m else 1.0))
        s = raw + shift
        z = np.ones(m)
    else:
        s = np.zeros(0)
        z = np.zeros(0)
    y = np.zeros(p)

    best = None
    best_mu = np.inf
    status = ITER_LIMIT
    stall = 0
    it = 0
    for it in range(1, iter_cap + 1):
        H = prog.hess(x)
        r_d, r_p, r_g, comp = _residuals(prog, x, y, z, s)
        if not all(np.all(np.isfinite(v)) for v in (x, y, z, s, r_d, r_p, r_g)):
            break
        mu = float(np.mean(comp)) if m else 0.0
        res_now = max(
            float(np.linalg.norm(r_d, np.inf)),
            float(np.linalg.norm(r_p, np.inf)) if p else 0.0,
            float(np.linalg.norm(r_g, np.inf)) if m else 0.0,
            float(np.max(comp)) if m else 0.0,
        )
        improved = False
        if best is None or res_now < 0.999 * best[0]:
            best = (res_now, x.copy(), y.copy(), z.copy(), s.copy())
            improved = True
        if mu < 0.999 * best_mu:
            best_mu = mu
            improved = True
        if improved:
            stall = 0
        else:
            stall += 1
            if stall >= 30:
                break
        if res_now <= tol:
            status = OPTIMAL
            break
        # Divergence heuristics.
        if np.linalg.norm(x, np.inf) > 1e13 or prog.value(x) < -1e18:
            feas = max(float(np.linalg.norm(r_p, np.inf)) if p else 0.0,
                       float(np.max(np.maximum(prog.G @ x - prog.h, 0.0))) if m else 0.0)
            if feas <= 1e-5 * (1.0 + float(np.linalg.norm(prog.h, np.inf)) if m else 1.0):
                status = UNBOUNDED
                break

        w = np.minimum(z / np.maximum(s, 1e-300), 1e18) if m else np.zeros(0)
        K11 = H + (prog.G.T * w) @ prog.G if m else H.copy()
        # regularize on the objective scale only; the barrier term GtWG is
        # meant to be stiff near active rows and must not inflate reg
        reg = 1e-11 * max(1.0, float(np.linalg.norm(H, np.inf)))
        K = np.zeros((n + p, n + p))
        K[:n, :n] = K11 + reg * np.eye(n)
        if p:
            K[:n, n:] = prog.A.T
            K[n:, :n] = prog.A
            K[n:, n:] = -1e-12 * np.eye(p)
        if not np.all(np.isfinite(K)):
            break
        try:
            lu = scipy.linalg.lu_factor(K)
        except (scipy.linalg.LinAlgError, ValueError):
            K[:n, :n] += 1e-6 * np.eye(n)
            lu = scipy.linalg.lu_factor(K)

        def newton(r_c):
            if m:
                rhs1 = -r_d - prog.G.T @ ((-r_c + z * r_g) / s)
            else:
                rhs1 = -r_d
            rhs = np.concatenate([rhs1, -r_p])
            sol = scipy.linalg.lu_solve(lu, rhs)
            # one round of iterative refinement on the reduced system
            sol -= scipy.linalg.lu_solve(lu, K @ sol - rhs)
            dx, dy = sol[:n], sol[n:]
            if m:
                ds = -r_g - prog.G @ dx
                dz = (-r_c - z * ds) / s
            else:
                ds = np.zeros(0)
                dz = np.zeros(0)
            return dx, dy, dz, ds

        if m:
            # Mehrotra: affine predictor sets the centering weight.
            dxa, dya, dza, dsa = newton(comp)
            ap = _step_to_boundary(s, dsa)
            ad = _step_to_boundary(z, dza)
            mu_aff = float((s + ap * dsa) @ (z + ad * dza)) / m
            sigma = np.clip((mu_aff / mu) ** 3 if mu > 0 else 0.1, 1e-8, 0.9999)
            r_c = comp + dsa * dza - sigma * mu
            dx, dy, dz, ds = newton(r_c)
            frac = min(0.9999, max(0.995, 1.0 - 10.0 * mu))
            ap = _step_to_boundary(s, ds, cap=1.0) * frac if np.any(ds < 0) else 1.0
            ad = _step_to_boundary(z, dz, cap=1.0) * frac if np.any(dz < 0) else 1.0
            ap, ad = min(ap, 1.0), min(ad, 1.0)
        else:
            dx, dy, dz, ds = newton(np.zeros(0))
            ap = ad = 1.0
            sigma, mu = 0.0, 0.0

        if prog.quadratic:
            x = x + ap * dx
            s = s + ap * ds
            y = y + ad * dy
            z = z + ad * dz
        else:
            # Degree-3/4 objectives: the Mehrotra step is not a descent
            # direction for the residual norm (it tracks the central path),
            # so damp it only against outright divergence.  The expected
            # cost polynomials are near-quadratic over the operating range
            # and almost always accept the full step.
            target_mu = sigma * mu if m else 0.0
            m0 = _merit(prog, x, y, z, s, target_mu)
            scale_k = 1.0
            cand = None
            for _ in range(16):
                cand = (x + scale_k * ap * dx, y + scale_k * ad * dy,
                        z + scale_k * ad * dz, s + scale_k * ap * ds)
                if not m or (np.min(cand[3]) > 0 and np.min(cand[2]) > 0):
                    if _merit(prog, *cand, target_mu) <= 10.0 * m0:
                        break
                scale_k *= 0.5
            x, y, z, s = cand

    if status != OPTIMAL and best is not None:
        _, x, y, z, s = best

    # Active-set polish from any near-optimal iterate: re-solving the
    # equality-constrained KKT system sidesteps the ill-conditioning of the
    # barrier system at small mu.
    if status in (OPTIMAL, ITER_LIMIT) and best is not None and best[0] <= np.sqrt(tol):
        polished = _polish(prog, x, y, z, s, tol)
        if polished is not None:
            r_old = _report(prog, x, y, z, s)
            r_new = _report(prog, *polished)
            if max(r_new.values()) < max(r_old.values()):
                x, y, z, s = polished
        if max(_report(prog, x, y, z, s).values()) <= tol:
            status = OPTIMAL

    if status == ITER_LIMIT and m and _diagnose:
        # Diagnose: is the constraint system feasible at all?
        t_star = _phase1_min_violation(prog)
        if t_star > 1e-7 * (1.0 + float(np.linalg.norm(prog.h, np.inf))):
            status = INFEASIBLE

    report = _report(prog, x, y, z, s)
    if status == OPTIMAL and max(report.values()) > 10 * tol:
        status = ITER_LIMIT

    degenerate = ()
    if m and status == OPTIMAL:
        thr = np.sqrt(tol)
        scale_h = 1.0 + np.abs(prog.h)
        degenerate = tuple(int(i) for i in np.where((s <= thr * scale_h) & (z <= thr))[0])

    return SolveResult(
        x=x, eq_duals=y, ineq_duals=z, slacks=s, status=status,
        residuals=report, objective=float(prog.value(x)), iterations=it,
        degenerate_rows=degenerate,
    )


def _report(prog, x, y, z, s):
    r_d, r_p, r_g, comp = _residuals(prog, x, y, z, s)
    return {
        "stationarity": float(np.linalg.norm(r_d, np.inf)) if r_d.size else 0.0,
        "primal_eq": float(np.linalg.norm(r_p, np.inf)) if r_p.size else 0.0,
        "primal_ineq": float(np.linalg.norm(r_g, np.inf)) if r_g.size else 0.0,
        "complementarity": float(np.max(np.abs(comp))) if comp.size else 0.0,
    }


def _phase1_min_violation(prog):
    """Minimize the worst inequality violation subject to the equalities.

    Returns the optimal t of  min t  s.t.  A x = b,  G x - h <= t,  t >= -1.
    Strictly feasible by construction, so the IPM always converges on it.
    """
    n, m = prog.n, prog.G.shape[0]
    G1 = np.hstack([prog.G, -np.ones((m, 1))])
    G1 = np.vstack([G1, np.concatenate([np.zeros(n), [-1.0]])])
    h1 = np.concatenate([prog.h, [1.0]])
    A1 = np.hstack([prog.A, np.zeros((prog.A.shape[0], 1))]) if prog.A.shape[0] else None
    c = np.zeros(n + 1)
    c[-1] = 1.0
    aux = quadratic_program(np.zeros((n + 1, n + 1)), c, A=A1, b=prog.b if prog.A.shape[0] else None,
                            G=G1, h=h1)
    res = solve_convex(aux, tol=1e-9, iter_cap=100, _diagnose=False)
    if res.status not in (OPTIMAL, ITER_LIMIT):
        return np.inf
    return float(res.x[-1])


def verify_kkt(program, result):
    """Recompute the KKT residuals of a result from scratch.

    Returns per-row stationarity residuals plus feasibility and
    complementarity figures, independent of the solver's internal state.
    """
    x, y, z = result.x, result.eq_duals, result.ineq_duals
    if x.size != program.n or y.size != program.A.shape[0] or z.size != program.G.shape[0]:
        raise DomainError("result dimensions do not match the program")
    stationarity = program.grad(x) + program.A.T @ y + program.G.T @ z
    eq_violation = program.A @ x - program.b
    ineq_violation = np.maximum(program.G @ x - program.h, 0.0)
    comp = z * (program.h - program.G @ x)
    return {
        "stationarity_rows": stationarity,
        "eq_rows": eq_violation,
        "ineq_violation_rows": ineq_violation,
        "complementarity_rows": comp,
        "stationarity": float(np.linalg.norm(stationarity, np.inf)) if stationarity.size else 0.0,
        "primal_eq": float(np.linalg.norm(eq_violation, np.inf)) if eq_violation.size else 0.0,
        "primal_ineq": float(np.linalg.norm(ineq_violation, np.inf)) if ineq_violation.size else 0.0,
        "complementarity": float(np.linalg.norm(comp, np.inf)) if comp.size else 0.0,
    }
