"""Seasonal hydrogen storage and grid-trading decisions for a solar park.

A periodic Markov decision model of a PV park with local demand, a
hydrogen store (electrolyzer, tank, fuel cell) and a capacity-limited
grid connection, solved by yearly backward induction and evaluated by
Monte Carlo simulation.
"""

__version__ = "0.1.0"

from .model import FuelCellMode, Grids, State, SystemConfig, apply_action, feasible_actions, reward
from .simulator import ActionClass, KpiReport, SimConfig, classify_action, congestion_trace, simulate
from .solver import (
    ConvergenceReport,
    PolicyTable,
    ValueTable,
    audit_policy,
    bellman_backup,
    build_instance,
    extract_action,
    load_policy,
    save_policy,
    solve_periodic,
)
from .stochastics import (
    Ar1Params,
    Calibration,
    DemandModel,
    PriceChain,
    WeeklyBeta,
    discretize_ar1,
    fit_ar1,
    fit_demand,
    fit_weekly_beta,
    make_grids,
    net_production_pmf,
    synthetic_calibration,
)

__all__ = [
    "ActionClass", "Ar1Params", "Calibration", "ConvergenceReport", "DemandModel", "FuelCellMode", "Grids",
    "KpiReport", "PolicyTable", "PriceChain", "SimConfig", "State", "SystemConfig", "ValueTable", "WeeklyBeta",
    "apply_action", "audit_policy", "bellman_backup", "build_instance", "classify_action", "congestion_trace",
    "discretize_ar1", "extract_action", "feasible_actions", "fit_ar1", "fit_demand", "fit_weekly_beta",
    "load_policy", "make_grids", "net_production_pmf", "reward", "save_policy", "simulate", "solve_periodic",
    "synthetic_calibration",
]
