"""Base case, storage benchmarks and one-at-a-time sensitivity sweeps."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import FuelCellMode, Grids, SystemConfig
from .simulator import KpiReport, SimConfig, paired_difference, simulate
from .solver import ConvergenceReport, MdpInstance, PolicyTable, build_instance, solve_periodic
from .stochastics import Calibration, make_grids, pmf_table, synthetic_calibration

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("k_c", "m", "k_plus", "alpha", "c_plus", "w")


@dataclass(frozen=True)
class GridSpec:
    dx: float = 10.0
    dc: float = 3.0
    c_max: float = 90.0
    dj: float = 5.0

    def build(self, cfg: SystemConfig, cal: Calibration) -> Grids:
        return make_grids(cfg, cal, self.dx, self.dc, self.c_max, self.dj)


@dataclass(frozen=True)
class SolverSpec:
    epsilon: float = 1e-3
    max_iters: int = 500
    fixed_iters: int | None = None
    threads: int = 1


def base_case_config(cal: Calibration | None = None, spec: GridSpec = GridSpec()) -> tuple[SystemConfig, Grids]:
    """5 MWp park, 30 MWh/day cable, 50 MWh/day converters, 1000 MWh store, alpha 0.5."""
    cfg = SystemConfig(w=5.0, m=1000.0, k_c=30.0, k_plus=50.0, k_minus=50.0, c_plus=5.0, alpha=0.5, T=365)
    cal = synthetic_calibration() if cal is None else cal
    return cfg, spec.build(cfg, cal)


@dataclass
class RunResult:
    cfg: SystemConfig
    policy: PolicyTable
    convergence: ConvergenceReport
    kpi: KpiReport


def solve_config(cfg: SystemConfig, cal: Calibration, spec: GridSpec = GridSpec(), solver: SolverSpec = SolverSpec()):
    """Solve the periodic MDP for ``cfg``; returns (policy, report, grids)."""
    cal = cal.for_capacity(cfg.w)
    grids = spec.build(cfg, cal)
    inst = build_instance(cfg, cal, grids)
    policy, report, _ = solve_periodic(inst, solver.epsilon, solver.max_iters, solver.fixed_iters, threads=solver.threads)
    return policy, report, grids


def stationary_instance(cfg: SystemConfig, cal: Calibration, grids: Grids) -> MdpInstance:
    """Instance whose every day uses the year-average net-production pmf.

    Its grids cover the union of all daily supports, so the resulting
    policy can be simulated under the seasonal processes on ``grids``.
    """
    avg = pmf_table(cal, grids).mean(axis=0)
    wide = copy.deepcopy(grids)
    wide.y_lo[:] = grids.y_lo.min()
    wide.y_hi[:] = grids.y_hi.max()
    return build_instance(cfg, cal, wide, pmfs=np.tile(avg, (grids.T, 1)))


def solve_stationary(cfg: SystemConfig, cal: Calibration, spec: GridSpec = GridSpec(), solver: SolverSpec = SolverSpec()):
    """Seasonality-blind policy; returns (policy, report, seasonal grids)."""
    cal = cal.for_capacity(cfg.w)
    grids = spec.build(cfg, cal)
    inst = stationary_instance(cfg, cal, grids)
    policy, report, _ = solve_periodic(inst, solver.epsilon, solver.max_iters, solver.fixed_iters, threads=solver.threads)
    return policy, report, grids


def run_config(
    cfg: SystemConfig,
    cal: Calibration,
    sim: SimConfig,
    spec: GridSpec = GridSpec(),
    solver: SolverSpec = SolverSpec(),
    stationary: bool = False,
    cache: dict | None = None,
) -> RunResult:
    """Solve then simulate; ``cache`` memoises solves keyed on (cfg, grid, solver, stationary)."""
    key = (cfg, spec, solver, stationary)
    if cache is not None and key in cache:
        policy, report, grids = cache[key]
    else:
        solve = solve_stationary if stationary else solve_config
        policy, report, grids = solve(cfg, cal, spec, solver)
        if cache is not None:
            cache[key] = (policy, report, grids)
    kpi = simulate(policy, cal.for_capacity(cfg.w), cfg, grids, sim, solver.threads)
    return RunResult(cfg, policy, report, kpi)


def bm1_config(cfg: SystemConfig) -> SystemConfig:
    """No storage: overages are sold or curtailed, shortages bought, all within the cable."""
    return cfg.replace(m=0.0, k_plus=0.0, k_minus=0.0, fuel_cell_mode=FuelCellMode.DISCHARGE)


@dataclass
class BenchmarkResult:
    base: RunResult
    bm1: RunResult
    bm2: RunResult

    @property
    def bm2_gap(self) -> tuple[float, float]:
        """Paired (mean, se) of base minus BM2 yearly profit."""
        return paired_difference(self.base.kpi, self.bm2.kpi)

    @property
    def bm2_gap_pct(self) -> float:
        return 100.0 * self.bm2_gap[0] / abs(self.base.kpi.mean_profit_per_year)

    def table(self) -> list[list]:
        """Rows of the three-column benchmark summary."""
        return benchmark_table({"base": self.base.kpi, "bm1": self.bm1.kpi, "bm2": self.bm2.kpi})


def benchmark_table(kpis: dict[str, KpiReport]) -> list[list]:
    def util(k: KpiReport):
        return round(k.electrolyzer_utilization_pct, 1) if k.utilization_defined else "-"

    def cong(k: KpiReport):
        return round(k.pct_time_congestion, 1)

    cols = [kpis[name] for name in ("base", "bm1", "bm2")]
    return [
        ["KPI", "Base-case system", "BM1 (no storage)", "BM2 (ignoring seasonality)"],
        ["Mean profit per year"] + [round(k.mean_profit_per_year, 1) for k in cols],
        ["Std. error of mean profit"] + [round(k.se_profit, 1) for k in cols],
        ["Mean electrolyzer utilization (%)"] + [util(k) for k in cols],
        ["Mean % time congestion (%)"] + [cong(k) for k in cols],
        ["Mean % time buying congestion (%)"] + [round(k.pct_time_congestion_buying, 1) for k in cols],
        ["Mean % time selling congestion (%)"] + [round(k.pct_time_congestion_selling, 1) for k in cols],
        ["Mean % days unmet demand (%)"] + [round(k.pct_unmet_demand, 3) for k in cols],
    ]


def run_benchmarks(
    cal: Calibration,
    sim: SimConfig = SimConfig(),
    spec: GridSpec = GridSpec(),
    solver: SolverSpec = SolverSpec(),
    cfg: SystemConfig | None = None,
) -> BenchmarkResult:
    """Base case, BM1 (no storage) and BM2 (seasonality ignored) on one seed."""
    cfg = base_case_config(cal, spec)[0] if cfg is None else cfg
    base = run_config(cfg, cal, sim, spec, solver)
    bm1 = run_config(bm1_config(cfg), cal, sim, spec, solver)
    bm2 = run_config(cfg, cal, sim, spec, solver, stationary=True)
    return BenchmarkResult(base, bm1, bm2)


@dataclass
class ExperimentPlan:
    name: str
    sweep_param: str
    values: list[float]
    cross_param: str | None = None
    cross_values: list[float] = field(default_factory=list)
    base: dict = field(default_factory=dict)
    grid: GridSpec = GridSpec()

    def __post_init__(self) -> None:
        if self.sweep_param not in SWEEP_PARAMS:
            raise ValueError(f"sweep_param must be one of {SWEEP_PARAMS}, got {self.sweep_param!r}")
        if not self.values or any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("sweep values must be nonempty and strictly increasing")
        if self.cross_param is not None:
            if self.cross_param not in SWEEP_PARAMS or self.cross_param == self.sweep_param:
                raise ValueError(f"invalid cross_param {self.cross_param!r}")
            if not self.cross_values:
                raise ValueError("cross_param needs cross_values")
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        SystemConfig().replace(**self.base)

    def configs(self) -> list[tuple[dict, SystemConfig]]:
        base = SystemConfig().replace(**self.base)
        crosses = self.cross_values if self.cross_param else [None]
        out = []
        for cv in crosses:
            for v in self.values:
                params = {self.sweep_param: v}
                if self.cross_param:
                    params[self.cross_param] = cv
                out.append((params, base.replace(**params)))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = asdict(self.grid)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        known = {"name", "sweep_param", "values", "cross_param", "cross_values", "base", "grid"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown plan field(s): {', '.join(unknown)}")
        data = dict(data)
        if "grid" in data:
            data["grid"] = GridSpec(**data["grid"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_plans() -> dict[str, ExperimentPlan]:
    """Coarse four-point sweeps around the base case."""
    return {
        "distribution": ExperimentPlan("distribution", "k_c", [10.0, 20.0, 40.0, 80.0]),
        "storage": ExperimentPlan("storage", "m", [250.0, 500.0, 750.0, 1000.0], base={"k_c": 40.0}),
        "storage_x_distribution": ExperimentPlan(
            "storage_x_distribution", "m", [300.0, 600.0, 1000.0], cross_param="k_c", cross_values=[10.0, 40.0, 80.0]
        ),
        "electrolyzer": ExperimentPlan("electrolyzer", "k_plus", [5.0, 10.0, 25.0, 50.0]),
        "efficiency": ExperimentPlan("efficiency", "alpha", [0.3, 0.5, 0.7, 0.9]),
        "markup": ExperimentPlan("markup", "c_plus", [0.0, 1.0, 3.0, 5.0]),
        "production": ExperimentPlan("production", "w", [3.0, 5.0, 7.0, 9.0]),
    }


def row_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class SweepResultRow:
    params: dict
    seed: int
    kpi: dict
    convergence: dict
    infeasible: bool

    def flat(self) -> dict:
        row = {f"param_{k}": v for k, v in self.params.items()}
        row["seed"] = self.seed
        row.update(self.kpi)
        row.update({f"solver_{k}": v for k, v in self.convergence.items() if k != "span_trace"})
        row["infeasible"] = self.infeasible
        return row


def run_sweep(
    plan: ExperimentPlan,
    cal: Calibration,
    sim: SimConfig = SimConfig(),
    solver: SolverSpec = SolverSpec(),
    cache: dict | None = None,
) -> list[SweepResultRow]:
    """Re-solve and re-simulate every configuration of the plan.

    Rows keep their configuration order.  Configurations with simulated
    unmet demand are flagged infeasible rather than dropped.  Pass the
    same ``cache`` to several sweeps to share solves of identical
    configurations; the calibration must then be the same too.
    """
    rows = []
    for i, (params, cfg) in enumerate(plan.configs()):
        seed = row_seed(sim.seed, i)
        row_sim = SimConfig(sim.years, sim.warmup_years, seed, sim.replication_block)
        log.info("sweep %s row %d: %s", plan.name, i, params)
        res = run_config(cfg, cal, row_sim, plan.grid, solver, cache=cache)
        rows.append(
            SweepResultRow(params, seed, res.kpi.summary(), res.convergence.to_dict(), res.kpi.pct_unmet_demand > 0)
        )
    return rows


def write_sweep_csv(path: str | Path, rows: list[SweepResultRow]) -> None:
    """One row per configuration; header is the union of flattened keys in first-row order."""
    flat = [r.flat() for r in rows]
    header = list(flat[0]) if flat else []
    with Path(path).open("w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=header)
        out.writeheader()
        for r in flat:
            out.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_sweep_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
