"""Backward induction, periodic convergence, persistence and policy queries."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import tiny_instance
from oracle import tree_values
from h2storage.model import Grids, State, SystemConfig, buy_bound, sell_bound
from h2storage.solver import (
    MdpInstance,
    PolicyTable,
    bellman_backup,
    evaluate_policy,
    export_policy_csv,
    extract_action,
    load_policy,
    load_table,
    percentile_level,
    save_policy,
    solve_periodic,
    solve_year,
)
from h2storage.stochastics import PriceChain


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    mask = ~np.isnan(b)
    return float(np.max(np.abs(a[mask] - b[mask]) / np.maximum(np.abs(b[mask]), 1e-12)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dp_matches_scenario_tree(seed):
    inst = tiny_instance(T=3, seed=seed)
    V_term = np.random.default_rng(seed).normal(0, 50, inst.grids.shape)
    V0, _, _ = solve_year(V_term, inst)
    assert _rel_err(V0, tree_values(inst, V_term)) <= 1e-9


def test_dp_matches_scenario_tree_discharge_mode():
    cfg = SystemConfig(m=20, k_c=10, k_plus=5, k_minus=5, c_plus=2, alpha=0.5, s=100, T=3, fuel_cell_mode="discharge")
    inst = tiny_instance(T=3, seed=7, cfg=cfg)
    V0, _, _ = solve_year(np.zeros(inst.grids.shape), inst)
    assert _rel_err(V0, tree_values(inst, np.zeros(inst.grids.shape))) <= 1e-9


def _single_day(cfg: SystemConfig, x_grid, c_grid, y_lattice) -> MdpInstance:
    y = np.asarray(y_lattice, dtype=float)
    g = Grids(10.0, 30.0, 5.0, np.asarray(x_grid, float), np.asarray(c_grid, float), y,
              np.array([0]), np.array([len(y) - 1]))
    n = len(g.c_grid)
    return MdpInstance(cfg, g, PriceChain(g.c_grid, np.full((n, n), 1.0 / n)), np.full((1, len(y)), 1.0 / len(y)))


def test_myopic_backup_sells_to_the_cable():
    cfg = SystemConfig(m=100, T=1)
    inst = _single_day(cfg, np.arange(11) * 10, [0, 30, 60, 90], [0.0])
    state = State(0, 100, 0, 60)
    assert buy_bound(state, cfg) == 0 and sell_bound(state, cfg) == 30
    V, U = bellman_backup(0, np.zeros(inst.grids.shape), inst.chain, inst.pmfs[0], cfg, inst.grids)
    assert V[10, 0, 2] == 1800
    assert U[10, 0, 2] == 30


def test_single_action_chain_rule():
    cfg = SystemConfig(m=20, k_c=0, T=1)
    inst = _single_day(cfg, [0, 10, 20], [0, 30], [-5.0, 0.0])
    V_next = np.arange(12, dtype=float).reshape(3, 2, 2)
    V, U = bellman_backup(0, V_next, inst.chain, inst.pmfs[0], cfg, inst.grids)
    assert np.all(U == 0)
    # x=10, y=-5: lossless draw to x'=5 snaps down to 0; no unmet demand.
    expected = 0.25 * V_next[0].sum()
    assert V[1, 0, 0] == pytest.approx(expected)


def test_single_period_year_is_myopic_backup():
    inst = tiny_instance(T=1, seed=3)
    V_year, pol, _ = solve_year(np.zeros(inst.grids.shape), inst)
    V_day, U_day = bellman_backup(0, np.zeros(inst.grids.shape), inst.chain, inst.pmfs[0], inst.cfg, inst.grids)
    assert np.array_equal(V_year, V_day, equal_nan=True)
    assert np.array_equal(pol.u_star[0], U_day.astype(np.float32), equal_nan=True)


def test_constant_shift_of_terminal_values():
    inst = tiny_instance(T=4, seed=5)
    base = np.random.default_rng(1).normal(0, 10, inst.grids.shape)
    V0, p0, _ = solve_year(base, inst)
    V1, p1, _ = solve_year(base + 250.0, inst)
    assert np.nanmax(np.abs(V1 - V0 - 250.0)) < 1e-9
    assert np.array_equal(p0.u_star, p1.u_star, equal_nan=True)


def test_degenerate_model_has_zero_gain():
    cfg = SystemConfig(m=20, k_c=0, T=5)
    g = Grids(10.0, 30.0, 5.0, np.array([0.0, 10.0, 20.0]), np.array([30.0]), np.array([0.0]),
              np.zeros(5, int), np.zeros(5, int))
    inst = MdpInstance(cfg, g, PriceChain(g.c_grid, np.ones((1, 1))), np.ones((5, 1)))
    _, report, _ = solve_periodic(inst)
    assert report.g == 0
    assert report.converged
    assert report.iterations <= 2


def test_gain_independent_of_initial_values():
    inst = tiny_instance(T=4, seed=2)
    p0, r0, _ = solve_periodic(inst, epsilon=1e-9)
    p1, r1, _ = solve_periodic(inst, epsilon=1e-9, V_init=500.0)
    assert r0.converged and r1.converged
    assert r0.g == pytest.approx(r1.g, abs=1e-6)
    assert np.array_equal(p0.u_star, p1.u_star, equal_nan=True)


def test_fixed_iteration_mode_runs_exactly():
    inst = tiny_instance(T=4, seed=2)
    _, report, _ = solve_periodic(inst, fixed_iters=6)
    assert report.iterations == 6
    assert report.converged == (report.span <= 1e-3)
    policy, report, values = solve_periodic(inst, max_iters=1, epsilon=1e-12, keep_values=True)
    assert not report.converged and report.iterations == 1
    assert values is not None
    assert np.array_equal(policy.u_star, solve_year(np.zeros(inst.grids.shape), inst)[1].u_star, equal_nan=True)
    with pytest.raises(ValueError):
        solve_periodic(inst, epsilon=0)
    with pytest.raises(ValueError):
        solve_periodic(inst, max_iters=0)


@pytest.mark.slow
def test_threaded_backup_bit_identical(base_solution):
    inst = base_solution[0]
    V_next = np.random.default_rng(0).normal(0, 1000, inst.grids.shape)
    one = bellman_backup(180, V_next, inst.chain, inst.pmfs[181], inst.cfg, inst.grids, inst.actions, threads=1)
    four = bellman_backup(180, V_next, inst.chain, inst.pmfs[181], inst.cfg, inst.grids, inst.actions, threads=4)
    assert one[0].tobytes() == four[0].tobytes()
    assert one[1].tobytes() == four[1].tobytes()


@pytest.mark.slow
def test_base_case_converges_with_shrinking_span(base_solution):
    _, _, report, _ = base_solution
    assert report.converged and report.iterations <= 200
    trace = report.span_trace
    assert all(b <= a for a, b in zip(trace[1:], trace[2:]))


@pytest.mark.slow
def test_evaluate_policy_reproduces_gain(base_solution):
    inst, policy, report, _ = base_solution
    assert evaluate_policy(inst, policy).g == pytest.approx(report.g, rel=1e-6)


@pytest.mark.slow
def test_winter_shortage_at_low_price_buys(base_solution):
    _, policy, _, _ = base_solution
    assert extract_action(policy, State(0, 0.0, -10.0, 0.0)) < 0


@pytest.mark.slow
def test_summer_overage_at_high_price_sells_maximum(base_solution):
    inst, policy, _, _ = base_solution
    state = State(180, 1000.0, 20.0, 60.0)
    assert extract_action(policy, state) == sell_bound(state, inst.cfg)


@pytest.mark.slow
def test_extract_action_rejects_off_grid(base_solution):
    _, policy, _, _ = base_solution
    with pytest.raises(ValueError):
        extract_action(policy, State(0, 5.0, -10.0, 0.0))
    with pytest.raises(ValueError):
        extract_action(policy, State(0, 0.0, 40.0, 0.0))


def test_policy_round_trip(tmp_path):
    inst = tiny_instance(T=3, seed=0)
    policy, _, _ = solve_periodic(inst)
    save_policy(tmp_path / "p.bin", policy)
    loaded = load_policy(tmp_path / "p.bin")
    assert loaded.u_star.tobytes() == policy.u_star.tobytes()
    assert loaded.grids.to_dict() == policy.grids.to_dict()
    (tmp_path / "bad.bin").write_bytes(b"nonsense")
    with pytest.raises(ValueError, match="not a table"):
        load_table(tmp_path / "bad.bin")


def test_export_policy_csv_rows(tmp_path):
    inst = tiny_instance(T=3, seed=0)
    policy, _, values = solve_periodic(inst, keep_values=True)
    n = export_policy_csv(tmp_path / "s.csv", policy, values, days=[1])
    with (tmp_path / "s.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert n == len(rows) == 3 * 2 * 2
    assert {r["day"] for r in rows} == {"2"}
    assert list(rows[0]) == ["day", "x", "y_bar", "c", "u_star", "V"]


def test_percentile_level():
    support = np.array([-5.0, 0.0, 5.0, 10.0])
    pmf = np.array([0.2, 0.2, 0.4, 0.2])
    assert percentile_level(pmf, support, 0.25) == 0.0
    assert percentile_level(pmf, support, 0.75) == 5.0


def test_policy_table_lookup_alias():
    inst = tiny_instance(T=2, seed=4)
    policy, _, _ = solve_periodic(inst)
    assert isinstance(policy, PolicyTable)
    g = inst.grids
    y = float(g.y_grid(0)[0])
    assert policy.lookup(State(0, 10.0, y, 30.0)) == extract_action(policy, State(0, 10.0, y, 30.0))
