"""Command-line orchestration with reproducible configs.

Every run writes a manifest.json capturing the fully-resolved configuration
(including seeds), sufficient to reproduce the outputs byte for byte.
Exit codes: 0 success, 1 domain/config error, 2 solver failure, 3 theory
check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import (
    bids_from_value,
    clear_with_bids,
    compare_mechanisms,
    dp_value_function,
    export_metrics_csv,
    export_summary_json,
    simulate_price_scenarios,
)
from .dispatch import export_dual_audit_json, export_solution_csv, solve_dispatch
from .distributions import fit_versatile_mle, load_error_samples_csv
from .errors import ConfigurationError, SolverError, StoragePricerError
from .scenarios import empirical_violation_rate, load_system_csv, synth_test_system
from .theory import (
    ideal_storage_slope_gap,
    export_sweep_csv,
    jensen_gap,
    sigma_sweep,
    soc_sweep,
    verify_price_coupling,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_THEORY = 3


def _add_common(parser):
    parser.add_argument("--out", default="run_out", help="output directory")
    parser.add_argument("--config", default=None, help="key=value config file; flags override")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: STORAGE_PRICER_THREADS or cores)")
    parser.add_argument("--seed", type=int, default=0, help="base RNG seed")
    parser.add_argument("--synthetic", action="store_true", help="use the synthetic test system")
    parser.add_argument("--fleet-csv", default=None)
    parser.add_argument("--load-csv", default=None)
    parser.add_argument("--errors-csv", default=None)
    parser.add_argument("--epsilon", type=float, default=0.05)
    parser.add_argument("--horizon", type=int, default=24)
    parser.add_argument("--fit-degree", type=int, default=2)
    parser.add_argument("--storage-ratio", type=float, default=0.2)
    parser.add_argument("--renewable-ratio", type=float, default=0.3)
    parser.add_argument("--no-storage-reserve", action="store_true",
                        help="assign the whole reserve to the generator")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="storage-pricer",
        description="Energy storage opportunity pricing from chance-constrained dispatch duals",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dispatch", help="solve the dispatch and export prices")
    _add_common(p)

    p = sub.add_parser("verify-theory", help="run the pricing-theory check suites")
    _add_common(p)

    p = sub.add_parser("baseline", help="run the profit-maximizing DP pipeline")
    _add_common(p)
    p.add_argument("--scenarios", type=int, default=100)
    p.add_argument("--grid-size", type=int, default=21)

    p = sub.add_parser("compare", help="welfare vs profit-maximizing mechanism comparison")
    _add_common(p)
    p.add_argument("--scenarios", type=int, default=200)
    p.add_argument("--retire-frac", type=float, default=0.2)
    p.add_argument("--grid-size", type=int, default=21)
    p.add_argument("--price-mode", choices=("mean", "per-scenario"), default="mean",
                   help="how the bidder's DP consumes the simulated prices")

    p = sub.add_parser("sweep", help="price sweeps over SoC / sigma / capacity axes")
    _add_common(p)
    p.add_argument("--axis", choices=("soc", "sigma", "storage-capacity", "renewable"),
                   default="soc")
    p.add_argument("--points", type=int, default=9)

    p = sub.add_parser("violations", help="empirical chance-constraint check")
    _add_common(p)
    p.add_argument("--samples", type=int, default=10_000)

    p = sub.add_parser("fit-dist", help="fit the versatile distribution by MLE")
    _add_common(p)
    p.add_argument("--samples-csv", required=True, help="CSV with an error_mw column")
    return parser


def _apply_config_file(args, argv):
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    overrides = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key.replace("-", "_")] = value
    # config supplies defaults; explicit flags win
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        if key in given or not hasattr(args, key):
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            setattr(args, key, value.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, key, int(value))
        elif isinstance(current, float):
            setattr(args, key, float(value))
        else:
            setattr(args, key, value)
    return args


def _system_from_args(args):
    csv_given = [args.fleet_csv, args.load_csv, args.errors_csv]
    if any(csv_given) and not all(csv_given):
        raise ConfigurationError("CSV source needs --fleet-csv, --load-csv, and --errors-csv")
    if all(csv_given) and args.synthetic:
        raise ConfigurationError("choose exactly one system source (synthetic or CSV)")
    if all(csv_given):
        from .costs import StorageSpec

        storage = None
        if args.storage_ratio > 0:
            # sized against the mean of the loaded profile, mirroring synthesis
            system = load_system_csv(args.fleet_csv, args.load_csv, args.errors_csv,
                                     epsilon=args.epsilon, fit_degree=args.fit_degree,
                                     storage_reserve=not args.no_storage_reserve)
            avg = float(np.mean(system.net_load.forecast))
            p_max = args.storage_ratio * avg
            storage = StorageSpec(p_max=p_max, e_max=4.0 * p_max, eta=0.95,
                                  marginal_cost=20.0, e_init=2.0 * p_max)
        return load_system_csv(args.fleet_csv, args.load_csv, args.errors_csv,
                               storage=storage, epsilon=args.epsilon,
                               fit_degree=args.fit_degree,
                               storage_reserve=not args.no_storage_reserve)
    if not args.synthetic:
        raise ConfigurationError("no system source: pass --synthetic or the CSV trio")
    return synth_test_system(
        epsilon=args.epsilon, horizon=args.horizon, seed=args.seed,
        fit_degree=args.fit_degree, storage_ratio=args.storage_ratio,
        renewable_ratio=args.renewable_ratio,
        storage_reserve=not args.no_storage_reserve,
    )


def _write_manifest(args, outdir, extra=None):
    manifest = {
        "version": __version__,
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "config"},
    }
    if extra:
        manifest.update(extra)
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _cmd_dispatch(args, outdir):
    system = _system_from_args(args)
    sol = solve_dispatch(system)
    if sol.status != "optimal":
        raise SolverError(f"dispatch not optimal: {sol.status}", status=sol.status)
    export_solution_csv(sol, outdir / "solution.csv")
    export_dual_audit_json(sol, outdir / "dual_audit.json")
    print(f"dispatch: optimal, objective {sol.objective:.2f} $, "
          f"mean lambda {float(np.mean(sol.lam)):.2f} $/MWh, "
          f"mean theta {float(np.mean(sol.theta)):.2f} $/MWh")
    return EXIT_OK


def _pass(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    return ok


def _theory_checks(args):
    """The pricing-theory check suites at desk scale."""
    small = dict(n_gens=12, total_cap_mw=2000.0, avg_load_mw=1000.0,
                 horizon=args.horizon, seed=args.seed, g_min_ratio=0.3)
    checks = {}

    cubic = synth_test_system(fit_degree=3, marginal_cost=10.0, **small)
    grid = np.linspace(0.0, cubic.storage.e_max, 9)
    sweep = soc_sweep(cubic, grid)
    checks["soc_monotonicity"] = {
        "ok": bool(sweep.verdict), "max_violation": sweep.max_violation,
        "theta": sweep.theta.tolist(),
    }

    quad = synth_test_system(fit_degree=2, storage_reserve=False, **small)
    sq = sigma_sweep(quad, [0.5, 1.0, 1.5, 2.0])
    flat = float(np.ptp(sq.theta)) <= 1e-6 * max(1.0, float(np.max(np.abs(sq.theta))))
    checks["sigma_constant_quadratic"] = {"ok": flat, "theta": sq.theta.tolist()}

    cubic_nr = synth_test_system(fit_degree=3, storage_reserve=False, **small)
    sc = sigma_sweep(cubic_nr, [0.5, 1.0, 1.5, 2.0])
    checks["sigma_increasing_cubic"] = {
        "ok": bool(sc.verdict and np.all(np.diff(sc.theta) > 0)),
        "theta": sc.theta.tolist(), "excluded": sc.excluded,
    }

    from .distributions import ErrorMoments

    gap, se = jensen_gap(cubic.poly, float(np.mean(cubic.net_load.forecast)), 1.0,
                         ErrorMoments(0.0, float(np.mean(cubic.net_load.sigma))),
                         cubic.storage.eta, samples=100_000, seed=args.seed)
    gap_q, se_q = jensen_gap(quad.poly, float(np.mean(quad.net_load.forecast)), 1.0,
                             ErrorMoments(0.0, float(np.mean(quad.net_load.sigma))),
                             quad.storage.eta, samples=100_000, seed=args.seed)
    checks["jensen_gap_sign"] = {
        "ok": bool(gap > 3 * se and abs(gap_q) <= 3 * se_q + 1e-12),
        "cubic_gap": gap, "cubic_se": se, "quad_gap": gap_q, "quad_se": se_q,
    }

    ideal = synth_test_system(fit_degree=3, eta=1.0, marginal_cost=0.0, **small)
    gap1 = ideal_storage_slope_gap(ideal, np.linspace(0.1, 0.9, 5) * ideal.storage.e_max)
    checks["ideal_slope_gap"] = {"ok": bool(gap1 <= 1e-6), "gap": gap1}

    full = synth_test_system(seed=args.seed, fit_degree=3,
                             epsilon=args.epsilon, horizon=args.horizon)
    sol = solve_dispatch(full)
    coupling = verify_price_coupling(sol)
    checks["price_coupling"] = {
        "ok": bool(sol.status == "optimal" and coupling["ok"]),
        "worst_rel_error": coupling["worst_rel_error"],
    }
    return checks


def _cmd_verify_theory(args, outdir):
    checks = _theory_checks(args)
    all_ok = True
    for name, result in checks.items():
        all_ok &= _pass(name, result["ok"])
    with open(outdir / "verify_theory.json", "w", encoding="utf-8") as fh:
        json.dump(checks, fh, indent=2, sort_keys=True)
    return EXIT_OK if all_ok else EXIT_THEORY


def _cmd_baseline(args, outdir):
    import csv as _csv

    system = _system_from_args(args)
    prices = simulate_price_scenarios(system, args.scenarios, args.seed, threads=args.threads)
    mean_path = prices.mean_path()
    vf = dp_value_function(mean_path, system.storage, grid_size=args.grid_size)
    bids = bids_from_value(vf, system.storage, prices=mean_path)
    cleared = clear_with_bids(system, bids)
    with open(outdir / "price_scenarios.csv", "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["scenario"] + [f"lambda_{t}" for t in range(1, system.horizon + 1)])
        for i in range(prices.lam.shape[0]):
            writer.writerow([i] + [f"{v:.6f}" for v in prices.lam[i]])
    with open(outdir / "cleared.csv", "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["t", "g", "p", "b", "e", "lambda", "theta"])
        for t in range(system.horizon):
            writer.writerow([t + 1, f"{cleared['g'][t]:.6f}", f"{cleared['p'][t]:.6f}",
                             f"{cleared['b'][t]:.6f}", f"{cleared['e'][t]:.6f}",
                             f"{cleared['lam'][t]:.6f}", f"{cleared['theta'][t]:.6f}"])
    print(f"baseline: {args.scenarios} price scenarios, cleared objective "
          f"{cleared['objective']:.2f} $")
    return EXIT_OK


def _cmd_compare(args, outdir):
    system = _system_from_args(args)
    out = compare_mechanisms(system, n_scenarios=args.scenarios, seed=args.seed,
                             retire_frac=args.retire_frac, grid_size=args.grid_size,
                             threads=args.threads, price_mode=args.price_mode)
    export_metrics_csv(out, outdir / "metrics.csv")
    export_summary_json(out, outdir / "summary.json")
    s = out["summary"]
    print("compare: mean system cost welfare "
          f"{s['welfare']['system_cost']:.2f} vs bidding {s['bidding']['system_cost']:.2f} "
          f"(payment batch win rate {s['payment_batch_win_rate']:.2f})")
    return EXIT_OK


def _cmd_sweep(args, outdir):
    system = _system_from_args(args)
    if args.axis == "soc":
        grid = np.linspace(0.0, system.storage.e_max, args.points)
        sweep = soc_sweep(system, grid, threads=args.threads)
        export_sweep_csv(sweep, outdir / "sweep.csv")
    elif args.axis == "sigma":
        grid = np.linspace(0.5, 2.0, args.points)
        sweep = sigma_sweep(system, grid, threads=args.threads)
        export_sweep_csv(sweep, outdir / "sweep.csv")
    else:
        import csv as _csv

        key = "storage_ratio" if args.axis == "storage-capacity" else "renewable_ratio"
        values = np.linspace(0.1, 0.9, args.points)
        with open(outdir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["axis_value", "mean_lambda", "mean_theta",
                             "total_reserve_cost", "system_cost"])
            for v in values:
                sysv = synth_test_system(
                    epsilon=args.epsilon, horizon=args.horizon, seed=args.seed,
                    fit_degree=args.fit_degree, **{key: float(v)})
                sol = solve_dispatch(sysv)
                if sol.status != "optimal":
                    raise SolverError(f"sweep point {v} failed: {sol.status}")
                writer.writerow([f"{v:.4f}", f"{float(np.mean(sol.lam)):.6f}",
                                 f"{float(np.mean(sol.theta)):.6f}",
                                 f"{float(np.sum(sol.pi)):.6f}",
                                 f"{sol.objective:.4f}"])
    print(f"sweep: axis {args.axis} written to sweep.csv")
    return EXIT_OK


def _cmd_violations(args, outdir):
    system = _system_from_args(args)
    sol = solve_dispatch(system)
    if sol.status != "optimal":
        raise SolverError(f"dispatch not optimal: {sol.status}", status=sol.status)
    report = empirical_violation_rate(sol, system.net_load, n=args.samples, seed=args.seed)
    payload = {
        "worst_joint": report["worst_joint"],
        "epsilon": system.epsilon,
        "n": report["n"],
        "rates": {k: v.tolist() for k, v in report["rates"].items()},
    }
    with open(outdir / "violations.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"violations: worst joint rate {report['worst_joint']:.4f} "
          f"(epsilon {system.epsilon})")
    return EXIT_OK


def _cmd_fit_dist(args, outdir):
    samples = load_error_samples_csv(args.samples_csv)
    model = fit_versatile_mle(samples)
    payload = {"a": model.a, "b": model.b, "c": model.c,
               "mean": model.mean(), "std": model.std(), "n_samples": int(samples.size)}
    with open(outdir / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"fit-dist: a={model.a:.6f} b={model.b:.6f} c={model.c:.6f}")
    return EXIT_OK


_COMMANDS = {
    "dispatch": _cmd_dispatch,
    "verify-theory": _cmd_verify_theory,
    "baseline": _cmd_baseline,
    "compare": _cmd_compare,
    "sweep": _cmd_sweep,
    "violations": _cmd_violations,
    "fit-dist": _cmd_fit_dist,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the documented contract is 1
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        args = _apply_config_file(args, argv)
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        code = _COMMANDS[args.command](args, outdir)
        _write_manifest(args, outdir, extra={"exit_code": code})
        return code
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except StoragePricerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
