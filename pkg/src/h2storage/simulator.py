"""Monte Carlo evaluation of a policy table."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .model import Grids, SystemConfig, transition_arrays
from .solver import PolicyTable
from .stochastics import Calibration, NetProductionSampler, discretize_ar1, sample_price, stream


class ActionClass(IntEnum):
    SELL_EXACT_OVERAGE = 0
    SELL_OVERAGE_PLUS_INVENTORY = 1
    SELL_PART_STORE_REST = 2
    STORE_OVERAGE_AND_BUY = 3
    BUY_EXACT_SHORTAGE = 4
    BUY_MORE_STORE_REST = 5
    BUY_LESS_DRAW_STORAGE = 6
    SELL_DESPITE_SHORTAGE = 7


N_CLASSES = len(ActionClass)


def classify_codes(y_bar, u, dx: float, dj: float) -> np.ndarray:
    """Vectorised action classes; -1 marks days with (near) zero net production."""
    y = np.asarray(y_bar, dtype=float)
    u = np.asarray(u, dtype=float)
    exact = np.abs(u - y) < dx / 2
    over = np.select(
        [exact, u > y, u >= 0],
        [ActionClass.SELL_EXACT_OVERAGE, ActionClass.SELL_OVERAGE_PLUS_INVENTORY, ActionClass.SELL_PART_STORE_REST],
        ActionClass.STORE_OVERAGE_AND_BUY,
    )
    short = np.select(
        [exact, u < y, u <= 0],
        [ActionClass.BUY_EXACT_SHORTAGE, ActionClass.BUY_MORE_STORE_REST, ActionClass.BUY_LESS_DRAW_STORAGE],
        ActionClass.SELL_DESPITE_SHORTAGE,
    )
    codes = np.where(y > 0, over, short)
    return np.where(np.abs(y) < dj / 2, -1, codes)


def classify_action(y_bar: float, u: float, grids: Grids) -> ActionClass | None:
    """Class of action ``u`` given net production ``y_bar``; None when y_bar is ~0."""
    code = int(classify_codes(y_bar, u, grids.dx, grids.dj))
    return None if code < 0 else ActionClass(code)


@dataclass(frozen=True)
class SimConfig:
    """Simulation size.

    ``years`` counts every simulated year including warm-up.  The years are
    split into independent blocks of ``replication_block`` consecutive years,
    each on its own random stream; every block discards its first
    ``ceil(warmup_years / n_blocks)`` years.
    """

    years: int = 11000
    warmup_years: int = 1000
    seed: int = 7
    replication_block: int = 110

    def __post_init__(self) -> None:
        if not self.years > self.warmup_years >= 0:
            raise ValueError("need years > warmup_years >= 0")
        if self.replication_block < 1 or self.years % self.replication_block:
            raise ValueError("replication_block must divide years")
        if self.block_warmup >= self.replication_block:
            raise ValueError("warm-up leaves no measured years in a block")

    @property
    def n_blocks(self) -> int:
        return self.years // self.replication_block

    @property
    def block_warmup(self) -> int:
        return math.ceil(self.warmup_years / self.n_blocks)


@dataclass
class KpiReport:
    mean_profit_per_year: float
    se_profit: float
    mean_profit_excl_penalty: float
    electrolyzer_utilization_pct: float
    utilization_defined: bool
    utilization_all_periods_pct: float
    pct_time_congestion: float
    pct_time_congestion_buying: float
    pct_time_congestion_selling: float
    pct_unmet_demand: float
    unmet_mwh_per_year: float
    years_measured: int
    mean_inventory_by_day: list[float] = field(repr=False)
    action_class_freq_by_day: list[list[float]] = field(repr=False)
    congestion_buy_by_day: list[float] = field(repr=False)
    congestion_sell_by_day: list[float] = field(repr=False)
    year_profits: list[float] = field(default_factory=list, repr=False)

    SUMMARY_FIELDS = (
        "mean_profit_per_year",
        "se_profit",
        "mean_profit_excl_penalty",
        "electrolyzer_utilization_pct",
        "utilization_defined",
        "utilization_all_periods_pct",
        "pct_time_congestion",
        "pct_time_congestion_buying",
        "pct_time_congestion_selling",
        "pct_unmet_demand",
        "unmet_mwh_per_year",
        "years_measured",
    )

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in self.SUMMARY_FIELDS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "KpiReport":
        return cls(**data)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "KpiReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _run_lanes(lanes, policy, cal, cfg, grids, sim: SimConfig) -> dict[str, np.ndarray]:
    T = grids.T
    L = len(lanes)
    sampler = NetProductionSampler(cal, grids)
    chain = discretize_ar1(cal.ar1, grids.c_grid)
    cum = chain.cumulative()
    start_c = int(np.argmin(np.abs(grids.c_grid - chain.stationary() @ grids.c_grid)))
    rngs = [stream(sim.seed, int(b)) for b in lanes]
    measured = sim.replication_block - sim.block_warmup
    days = np.arange(T)

    acc = {
        "profit": np.zeros((L, measured)),
        "penalty": np.zeros((L, measured)),
        "unmet_mwh": np.zeros((L, measured)),
        "util_sum": np.zeros((L, T)),
        "used": np.zeros((L, T), dtype=np.int64),
        "buy_cong": np.zeros((L, T), dtype=np.int64),
        "sell_cong": np.zeros((L, T), dtype=np.int64),
        "unmet_days": np.zeros((L, T), dtype=np.int64),
        "inventory": np.zeros((L, T)),
        "classes": np.zeros((L, T, N_CLASSES), dtype=np.int64),
    }
    xi = np.zeros(L, dtype=np.int64)
    ci = np.full(L, start_c, dtype=np.int64)
    lane_idx = np.arange(L)
    k_plus = cfg.k_plus if cfg.k_plus > 0 else np.inf
    for year in range(sim.replication_block):
        y_draw = np.empty((L, T), dtype=np.int64)
        c_draw = np.empty((L, T))
        for j, rng in enumerate(rngs):
            y_draw[j] = sampler.draw(rng, days)
            c_draw[j] = rng.random(T)
        k = year - sim.block_warmup
        for t in range(T):
            ci = sample_price(cum, ci, c_draw[:, t])
            yi = y_draw[:, t]
            u = policy[t, xi, yi, ci].astype(float)
            x = grids.x_grid[xi]
            y = grids.y_lattice[yi]
            c = grids.c_grid[ci]
            xn, unmet, _, charged, _ = transition_arrays(x, y, u, cfg, grids)
            if k >= 0:
                price = np.where(u < 0, c + cfg.c_plus, c)
                gross = u * price
                acc["profit"][:, k] += gross - cfg.s * unmet
                acc["penalty"][:, k] += cfg.s * unmet
                acc["unmet_mwh"][:, k] += unmet
                used = charged > 0
                acc["used"][:, t] += used
                acc["util_sum"][:, t] += charged / k_plus
                if cfg.k_c > 0:
                    acc["buy_cong"][:, t] += u == -cfg.k_c
                    acc["sell_cong"][:, t] += u == cfg.k_c
                acc["unmet_days"][:, t] += unmet > 1e-9
                acc["inventory"][:, t] += x
                codes = classify_codes(y, u, grids.dx, grids.dj)
                ok = codes >= 0
                acc["classes"][lane_idx[ok], t, codes[ok]] += 1
            xi = xn
    return acc


def simulate(
    policy: PolicyTable,
    cal: Calibration,
    cfg: SystemConfig,
    grids: Grids,
    sim: SimConfig = SimConfig(),
    threads: int = 1,
) -> KpiReport:
    """Simulate ``policy`` under the processes of ``cal`` on ``grids``.

    ``grids`` defines the daily net-production supports used for sampling;
    the policy may have been solved on wider supports of the same lattice.
    Inventory and price carry over between years.
    """
    pg = policy.grids
    if not (np.array_equal(pg.y_lattice, grids.y_lattice) and np.array_equal(pg.x_grid, grids.x_grid)
            and np.array_equal(pg.c_grid, grids.c_grid)):
        raise ValueError("policy grids do not match the simulation grids")
    lanes = np.arange(sim.n_blocks)
    groups = [g for g in np.array_split(lanes, max(1, min(threads, len(lanes)))) if len(g)]
    table = policy.u_star
    if len(groups) == 1:
        parts = [_run_lanes(groups[0], table, cal, cfg, grids, sim)]
    else:
        with ThreadPoolExecutor(len(groups)) as pool:
            parts = list(pool.map(lambda g: _run_lanes(g, table, cal, cfg, grids, sim), groups))
    acc = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return _report(acc, cfg)


def _report(acc: dict[str, np.ndarray], cfg: SystemConfig) -> KpiReport:
    profit = acc["profit"].ravel()
    n_years = profit.size
    per_day = acc["inventory"].shape[1]
    n_periods = n_years * per_day
    used = int(acc["used"].sum())
    util_sum = float(acc["util_sum"].sum())
    buy = acc["buy_cong"].sum(axis=0)
    sell = acc["sell_cong"].sum(axis=0)
    classes = acc["classes"].sum(axis=0).astype(float)
    freq = np.zeros_like(classes)
    for branch in (slice(0, 4), slice(4, 8)):
        tot = classes[:, branch].sum(axis=1, keepdims=True)
        freq[:, branch] = np.divide(classes[:, branch], tot, out=np.zeros_like(classes[:, branch]), where=tot > 0)
    defined = used > 0 and cfg.k_plus > 0
    return KpiReport(
        mean_profit_per_year=float(profit.mean()),
        se_profit=float(profit.std(ddof=1) / math.sqrt(n_years)) if n_years > 1 else float("nan"),
        mean_profit_excl_penalty=float((profit + acc["penalty"].ravel()).mean()),
        electrolyzer_utilization_pct=100.0 * util_sum / used if defined else 0.0,
        utilization_defined=defined,
        utilization_all_periods_pct=100.0 * util_sum / n_periods if cfg.k_plus > 0 else 0.0,
        pct_time_congestion=100.0 * float(buy.sum() + sell.sum()) / n_periods,
        pct_time_congestion_buying=100.0 * float(buy.sum()) / n_periods,
        pct_time_congestion_selling=100.0 * float(sell.sum()) / n_periods,
        pct_unmet_demand=100.0 * float(acc["unmet_days"].sum()) / n_periods,
        unmet_mwh_per_year=float(acc["unmet_mwh"].sum() / n_years),
        years_measured=n_years,
        mean_inventory_by_day=(acc["inventory"].sum(axis=0) / n_years).tolist(),
        action_class_freq_by_day=freq.tolist(),
        congestion_buy_by_day=(buy / n_years).tolist(),
        congestion_sell_by_day=(sell / n_years).tolist(),
        year_profits=profit.tolist(),
    )


def paired_difference(a: KpiReport, b: KpiReport) -> tuple[float, float]:
    """Mean and standard error of per-year profit ``a - b`` from runs sharing a seed."""
    d = np.asarray(a.year_profits) - np.asarray(b.year_profits)
    if d.size < 2:
        raise ValueError("per-year profits are not available")
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


def congestion_trace(report: KpiReport) -> list[tuple[float, float]]:
    """Per day of year: (buying-induced, selling-induced) congestion fraction."""
    return list(zip(report.congestion_buy_by_day, report.congestion_sell_by_day))


def write_traces_csv(path: str | Path, report: KpiReport) -> None:
    """Long-format per-day traces with columns (day, metric, value); day is 1-based."""
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["day", "metric", "value"])
        for t, inv in enumerate(report.mean_inventory_by_day):
            out.writerow([t + 1, "mean_inventory", repr(inv)])
            out.writerow([t + 1, "congestion_buy", repr(report.congestion_buy_by_day[t])])
            out.writerow([t + 1, "congestion_sell", repr(report.congestion_sell_by_day[t])])
            for cls in ActionClass:
                out.writerow([t + 1, f"class_{cls.name.lower()}", repr(report.action_class_freq_by_day[t][cls])])
