"""Command-line entry point: ``h2storage {fit,solve,simulate,sweep,report}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .experiments import (
    ExperimentPlan,
    GridSpec,
    SolverSpec,
    bm1_config,
    benchmark_table,
    desk_plans,
    run_sweep,
    stationary_instance,
    write_sweep_csv,
)
from .model import SystemConfig
from .simulator import KpiReport, SimConfig, paired_difference, simulate, write_traces_csv
from .solver import (
    audit_policy,
    build_instance,
    export_policy_csv,
    load_policy,
    percentile_level,
    save_policy,
    save_table,
    solve_periodic,
)
from .stochastics import (
    BASE_CAPACITY_MWP,
    Calibration,
    NonStationaryFit,
    SeasonalityVariant,
    daily_profile,
    day_of_year,
    fit_ar1,
    fit_demand,
    fit_weekly_beta,
    make_grids,
    packaged_calibration_path,
    read_consumption,
    read_prices,
    read_production,
    scale_betas,
    week_of_day,
)

log = logging.getLogger("h2storage")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 2, 3


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_paths: dict[str, str | None]
    seed: int | None
    grid: dict | None
    tool_version: str = __version__
    duration_s: float = 0.0
    outputs: dict[str, str] = field(default_factory=dict)

    def add_output(self, path: Path) -> None:
        self.outputs[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest_{self.command}.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def grid_summary(grids) -> dict:
    return {
        "dx": grids.dx,
        "dc": grids.dc,
        "dj": grids.dj,
        "x_max": float(grids.x_grid[-1]),
        "c_max": float(grids.c_grid[-1]),
        "y_range": [float(grids.y_lattice[0]), float(grids.y_lattice[-1])],
    }


# --- input helpers ------------------------------------------------------------


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} file not found: {p}")
    return p


def _load_config(path: str | None) -> SystemConfig:
    p = _existing(path, "config")
    if p is None:
        return SystemConfig()
    try:
        return SystemConfig.from_json(p)
    except (ValueError, TypeError) as exc:
        raise InputError(f"{p}: {exc}") from exc


def _load_calibration(path: str | None) -> Calibration:
    p = _existing(path, "calibration") or packaged_calibration_path()
    try:
        return Calibration.from_json(p)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{p}: invalid calibration ({exc})") from exc


def _grid_spec(args) -> GridSpec:
    for name in ("dx", "dc", "c_max", "dj"):
        if getattr(args, name) <= 0:
            raise InputError(f"--{name.replace('_', '-')} must be positive")
    return GridSpec(args.dx, args.dc, args.c_max, args.dj)


def parse_slices(text: str) -> tuple[list[int], list[float]]:
    """Parse ``"day=1,180 percentiles=25,75"`` into 1-based days and percentiles."""
    parts = dict(item.split("=", 1) for item in text.split() if "=" in item)
    if set(parts) != {"day", "percentiles"}:
        raise InputError("--export-policy-slices expects 'day=D1,D2 percentiles=P1,P2'")
    try:
        days = [int(v) for v in parts["day"].split(",")]
        pcts = [float(v) for v in parts["percentiles"].split(",")]
    except ValueError as exc:
        raise InputError(f"--export-policy-slices: {exc}") from exc
    if any(not 0 < p < 100 for p in pcts):
        raise InputError("percentiles must lie strictly between 0 and 100")
    return days, pcts


# --- commands -----------------------------------------------------------------


def cmd_fit(args, out: Path, manifest: RunManifest) -> int:
    if args.synthetic:
        dst = out / "calibration.json"
        shutil.copyfile(packaged_calibration_path(), dst)
        manifest.add_output(dst)
        return EXIT_OK

    prices = _existing(args.prices, "prices")
    production = _existing(args.production, "production")
    consumption = _existing(args.consumption, "consumption")
    if not (prices and production and consumption):
        raise InputError("fit needs --prices, --production and --consumption (or --synthetic)")

    dates, values = read_prices(prices)
    fits = {}
    for variant in SeasonalityVariant:
        try:
            fits[variant] = fit_ar1(values, variant, dates)
        except NonStationaryFit as exc:
            log.warning("%s: %s", variant.value, exc)
            fits[variant] = exc.fit
    chosen = fits[SeasonalityVariant(args.variant)]
    if not chosen.params.is_stationary:
        raise InputError(f"chosen price variant {args.variant} is non-stationary")

    p_dates, p_values = read_production(production)
    betas = fit_weekly_beta(week_of_day(day_of_year(p_dates)), p_values, min_obs=args.min_obs)
    betas = scale_betas(betas, BASE_CAPACITY_MWP, base_w=args.capacity)

    c_dates, c_values = read_consumption(consumption)
    demand = fit_demand(daily_profile(c_dates, c_values))

    cal = Calibration(chosen.params, betas, demand, synthetic=False, notes=f"fitted; price variant {args.variant}")
    paths = [out / "calibration.json", out / "price_fit.csv", out / "demand_fit.csv", out / "weekly_beta.csv"]
    cal.to_json(paths[0])
    with paths[1].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "phi", "theta", "sigma_c", "std_error", "stationary"])
        for variant, fit in fits.items():
            p = fit.params
            w.writerow([variant.value, repr(p.phi), repr(p.theta), repr(p.sigma_c), repr(fit.std_error), p.is_stationary])
    with paths[2].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split_day", "intercept_1", "slope_1", "intercept_2", "slope_2", "sigma_d"])
        w.writerow([demand.split_day, *map(repr, demand.seg1), *map(repr, demand.seg2), repr(demand.sigma_d)])
    with paths[3].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["week", "a", "b", "scale", "fallback"])
        for b in betas:
            w.writerow([b.week, repr(b.a), repr(b.b), repr(b.scale), b.fallback])
    for p in paths:
        manifest.add_output(p)
    return EXIT_OK


def _variant_instance(variant: str, cfg: SystemConfig, cal: Calibration, spec: GridSpec):
    """MDP instance for the base system or a benchmark."""
    cal = cal.for_capacity(cfg.w)
    if variant == "bm1":
        cfg = bm1_config(cfg)
    grids = spec.build(cfg, cal)
    return stationary_instance(cfg, cal, grids) if variant == "bm2" else build_instance(cfg, cal, grids)


def cmd_solve(args, out: Path, manifest: RunManifest) -> int:
    cfg = _load_config(args.config)
    cal = _load_calibration(args.calibration)
    spec = _grid_spec(args)
    if args.epsilon <= 0 or args.iters < 1:
        raise InputError("--epsilon must be positive and --iters at least 1")
    slices = parse_slices(args.export_policy_slices) if args.export_policy_slices else None
    inst = _variant_instance(args.variant, cfg, cal, spec)
    manifest.grid = grid_summary(inst.grids)
    policy, report, values = solve_periodic(
        inst, args.epsilon, args.iters, args.fixed_iters, threads=args.threads, keep_values=True
    )
    audit = audit_policy(policy, inst.cfg)

    written = [out / "policy.bin", out / "values.bin", out / "convergence.json"]
    save_policy(written[0], policy)
    save_table(written[1], values.V[: inst.grids.T], inst.grids, "values")
    summary = report.to_dict() | {"audit_feasible_fraction": audit, "variant": args.variant, "config": inst.cfg.to_dict()}
    written[-1].write_text(json.dumps(summary, indent=2) + "\n")

    if slices is not None:
        days, pcts = slices
        for d in days:
            if not 1 <= d <= inst.grids.T:
                raise InputError(f"slice day {d} outside 1..{inst.grids.T}")
            t = d - 1
            support = inst.grids.y_lattice
            for q in pcts:
                level = percentile_level(inst.pmfs[t], support, q / 100.0)
                path = out / f"policy_slice_day{d}_p{q:g}.csv"
                export_policy_csv(path, policy, values, days=[t], y_levels={t: [level]})
                written.append(path)
    for p in written:
        manifest.add_output(p)
    if args.strict and not report.converged:
        log.error("solver did not converge: span %.3g after %d iterations", report.span, report.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _sim_config(args) -> SimConfig:
    try:
        return SimConfig(args.years, args.warmup, args.seed, args.block)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_simulate(args, out: Path, manifest: RunManifest) -> int:
    policy_path = _existing(args.policy, "policy")
    cfg = _load_config(args.config)
    cal = _load_calibration(args.calibration)
    try:
        policy = load_policy(policy_path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.variant == "bm1":
        cfg = bm1_config(cfg)
    cal = cal.for_capacity(cfg.w)
    pg = policy.grids
    grids = make_grids(cfg, cal, pg.dx, pg.dc, float(pg.c_grid[-1]), pg.dj)
    sim = _sim_config(args)
    manifest.grid = grid_summary(grids)
    try:
        kpi = simulate(policy, cal, cfg, grids, sim, args.threads)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    written = [out / "kpi.json", out / "traces.csv"]
    kpi.to_json(written[0])
    write_traces_csv(written[1], kpi)
    for p in written:
        manifest.add_output(p)
    return EXIT_OK


def cmd_sweep(args, out: Path, manifest: RunManifest) -> int:
    if args.plan:
        try:
            plan = ExperimentPlan.from_json(_existing(args.plan, "plan"))
        except (ValueError, TypeError) as exc:
            raise InputError(f"{args.plan}: {exc}") from exc
    else:
        presets = desk_plans()
        if args.preset not in presets:
            raise InputError(f"unknown preset {args.preset!r}; choose from {', '.join(presets)}")
        plan = presets[args.preset]
    cal = _load_calibration(args.calibration)
    sim = _sim_config(args)
    solver = SolverSpec(args.epsilon, args.iters, args.fixed_iters, args.threads)
    manifest.grid = asdict(plan.grid)
    rows = run_sweep(plan, cal, sim, solver)
    path = out / f"sweep_{plan.name}.csv"
    write_sweep_csv(path, rows)
    plan_path = out / f"plan_{plan.name}.json"
    plan_path.write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    manifest.add_output(path)
    manifest.add_output(plan_path)
    if args.strict and not all(r.convergence["converged"] for r in rows):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_report(args, out: Path, manifest: RunManifest) -> int:
    runs: dict[str, KpiReport] = {}
    for item in args.runs:
        name, _, path = item.partition("=")
        if name not in ("base", "bm1", "bm2") or not path:
            raise InputError(f"--runs entries look like base=PATH, bm1=PATH, bm2=PATH; got {item!r}")
        p = Path(path)
        p = p / "kpi.json" if p.is_dir() else p
        _existing(str(p), f"{name} KPI")
        runs[name] = KpiReport.from_json(p)
    missing = {"base", "bm1", "bm2"} - set(runs)
    if missing:
        raise InputError(f"report needs runs for: {', '.join(sorted(missing))}")

    table = out / "summary_table.csv"
    with table.open("w", newline="") as fh:
        csv.writer(fh).writerows(benchmark_table(runs))
    gap = out / "bm2_gap.json"
    base, bm2 = runs["base"], runs["bm2"]
    info = {"gap_pct": 100.0 * (base.mean_profit_per_year - bm2.mean_profit_per_year) / abs(base.mean_profit_per_year)}
    if base.year_profits and len(base.year_profits) == len(bm2.year_profits):
        info["paired_mean"], info["paired_se"] = paired_difference(base, bm2)
    gap.write_text(json.dumps(info, indent=2) + "\n")
    daily = out / "daily_traces.csv"
    with daily.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "day", "metric", "value"])
        for name, k in runs.items():
            for d in range(len(k.mean_inventory_by_day)):
                w.writerow([name, d + 1, "mean_inventory", repr(k.mean_inventory_by_day[d])])
                w.writerow([name, d + 1, "congestion_buy", repr(k.congestion_buy_by_day[d])])
                w.writerow([name, d + 1, "congestion_sell", repr(k.congestion_sell_by_day[d])])
    for p in (table, gap, daily):
        manifest.add_output(p)
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=".", help="directory for outputs (created if missing)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--strict", action="store_true", help="exit 3 when the solver does not converge")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--config", help="SystemConfig JSON (default: base case)")
    model.add_argument("--calibration", help="calibration JSON (default: packaged synthetic)")
    model.add_argument("--variant", choices=("base", "bm1", "bm2"), default="base")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--dx", type=float, default=10.0)
    grid.add_argument("--dc", type=float, default=3.0)
    grid.add_argument("--c-max", type=float, default=90.0)
    grid.add_argument("--dj", type=float, default=5.0)

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--epsilon", type=float, default=1e-3)
    solver.add_argument("--iters", type=int, default=500, help="maximum yearly sweeps")
    solver.add_argument("--fixed-iters", type=int, help="run exactly this many yearly sweeps")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--seed", type=int, default=7)
    sim.add_argument("--years", type=int, default=11000, help="simulated years including warmup")
    sim.add_argument("--warmup", type=int, default=1000)
    sim.add_argument("--block", type=int, default=110, help="years per independent random stream")

    parser = argparse.ArgumentParser(prog="h2storage", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit price, production and demand models")
    p.add_argument("--prices", help="CSV with columns date, price_eur_mwh")
    p.add_argument("--production", help="CSV with columns date, mwh")
    p.add_argument("--consumption", help="CSV with columns date, mwh")
    p.add_argument("--capacity", type=float, default=BASE_CAPACITY_MWP, help="MWp behind the production data")
    p.add_argument("--variant", choices=[v.value for v in SeasonalityVariant], default="raw")
    p.add_argument("--min-obs", type=int, default=10)
    p.add_argument("--synthetic", action="store_true", help="write the packaged synthetic calibration")

    p = sub.add_parser("solve", parents=[common, model, grid, solver], help="solve for the periodic policy")
    p.add_argument("--export-policy-slices", help="e.g. 'day=1,180 percentiles=25,75'")

    p = sub.add_parser("simulate", parents=[common, model, sim], help="simulate a solved policy")
    p.add_argument("--policy", required=True)

    p = sub.add_parser("sweep", parents=[common, solver, sim], help="run a sensitivity sweep")
    p.add_argument("--plan", help="ExperimentPlan JSON")
    p.add_argument("--preset", default="distribution", help=f"built-in plan: {', '.join(desk_plans())}")
    p.add_argument("--calibration")

    p = sub.add_parser("report", parents=[common], help="summarise base and benchmark runs")
    p.add_argument("--runs", nargs="+", required=True, help="base=DIR bm1=DIR bm2=DIR")
    return parser


COMMANDS = {"fit": cmd_fit, "solve": cmd_solve, "simulate": cmd_simulate, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: getattr(args, k, None) for k in ("config", "calibration", "policy", "plan")}
    manifest = RunManifest(args.command, argv, paths, getattr(args, "seed", None), None)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, out, manifest)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    manifest.duration_s = time.perf_counter() - start
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
