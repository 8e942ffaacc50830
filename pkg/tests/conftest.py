"""Shared fixtures: tiny hand-built instances and one cached base-case solve."""

from __future__ import annotations

import numpy as np
import pytest

from h2storage.experiments import base_case_config
from h2storage.model import Grids, SystemConfig
from h2storage.simulator import SimConfig, simulate
from h2storage.solver import MdpInstance, build_instance, solve_periodic
from h2storage.stochastics import PriceChain, synthetic_calibration

ACCEPTANCE_LINES: list[str] = []


def tiny_instance(
    T: int = 3,
    seed: int = 0,
    cfg: SystemConfig | None = None,
    y_lattice=(-5.0, 0.0, 5.0, 10.0),
    supports=None,
) -> MdpInstance:
    """Instance with |X| = 3, |C| = 2 and two net-production levels per day."""
    rng = np.random.default_rng(seed)
    cfg = cfg or SystemConfig(m=20, k_c=10, k_plus=10, k_minus=10, c_plus=2, alpha=0.5, s=100, T=T)
    lattice = np.asarray(y_lattice)
    if supports is None:
        lo = rng.integers(0, len(lattice) - 1, size=T)
        supports = [(int(a), int(a) + 1) for a in lo]
    y_lo = np.array([s[0] for s in supports])
    y_hi = np.array([s[1] for s in supports])
    dx = cfg.m / 2 if cfg.m > 0 else 10.0
    grids = Grids(dx, 30.0, 5.0, np.linspace(0, cfg.m, 3) if cfg.m > 0 else np.zeros(1),
                  np.array([0.0, 30.0]), lattice, y_lo, y_hi)
    P = rng.dirichlet([1.0, 1.0], size=2)
    pmfs = np.zeros((T, len(lattice)))
    for t in range(T):
        p = rng.dirichlet([1.0, 1.0])
        pmfs[t, y_lo[t]] = p[0]
        pmfs[t, y_hi[t]] += p[1]
    return MdpInstance(cfg, grids, PriceChain(grids.c_grid, P), pmfs)


@pytest.fixture(scope="session")
def calibration():
    return synthetic_calibration()


@pytest.fixture(scope="session")
def base_solution(calibration):
    """Converged base-case solve with the full value table."""
    cfg, grids = base_case_config(calibration)
    inst = build_instance(cfg, calibration, grids)
    policy, report, values = solve_periodic(inst, keep_values=True)
    return inst, policy, report, values


@pytest.fixture(scope="session")
def base_kpi(calibration, base_solution):
    """10,000 measured years of the base policy on the default seed."""
    inst, policy, _, _ = base_solution
    return simulate(policy, calibration, inst.cfg, inst.grids, SimConfig())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
