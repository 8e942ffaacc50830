"""Backward dynamic programming over a periodic year."""

from __future__ import annotations

import csv
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Grids, State, SystemConfig, _is_feasible, action_candidates, transition_arrays
from .stochastics import Calibration, PriceChain, discretize_ar1, pmf_table

# Two action values closer than this are treated as equally good.
TIE_TOL = 1e-9


@dataclass
class ActionSet:
    """Day-independent candidate actions with their transitions.

    Arrays are indexed ``[candidate, x, y]`` (plus ``c`` for rewards).  The
    last candidate is the balancing action ``u = y_bar``.
    """

    u: np.ndarray
    feasible: np.ndarray
    x_next: np.ndarray
    unmet: np.ndarray
    reward: np.ndarray

    @classmethod
    def build(cls, cfg: SystemConfig, grids: Grids) -> "ActionSet":
        lattice = action_candidates(cfg, grids)
        nx, ny, _ = grids.shape
        x = grids.x_grid[None, :, None]
        y = grids.y_lattice[None, None, :]
        u = np.concatenate(
            [np.broadcast_to(lattice[:, None, None], (len(lattice), nx, ny)), np.broadcast_to(y, (1, nx, ny))]
        )
        feasible = _is_feasible(u, x, y, cfg, grids.dx)
        # The balancing candidate duplicates a lattice action when y_bar sits on the lattice.
        feasible[-1] &= ~np.any(np.isclose(lattice[:, None, None], y), axis=0)
        xn, unmet, *_ = transition_arrays(x, y, u, cfg, grids)
        c = grids.c_grid[None, None, None, :]
        price = np.where(u[..., None] < 0, c + cfg.c_plus, c)
        rew = u[..., None] * price - cfg.s * unmet[..., None]
        return cls(u, feasible, np.broadcast_to(xn, u.shape).copy(), np.broadcast_to(unmet, u.shape).copy(), rew)


@dataclass
class MdpInstance:
    cfg: SystemConfig
    grids: Grids
    chain: PriceChain
    pmfs: np.ndarray
    actions: ActionSet = field(init=False)

    def __post_init__(self) -> None:
        self.actions = ActionSet.build(self.cfg, self.grids)


def build_instance(cfg: SystemConfig, cal: Calibration, grids: Grids, pmfs: np.ndarray | None = None) -> MdpInstance:
    chain = discretize_ar1(cal.ar1, grids.c_grid)
    return MdpInstance(cfg, grids, chain, pmf_table(cal, grids) if pmfs is None else pmfs)


@dataclass
class PolicyTable:
    """Optimal action per (day, x, y, c); NaN outside each day's support."""

    u_star: np.ndarray
    grids: Grids

    def lookup(self, state: State) -> float:
        return extract_action(self, state)


@dataclass
class ValueTable:
    V: np.ndarray
    grids: Grids


@dataclass
class ConvergenceReport:
    g: float
    span: float
    iterations: int
    converged: bool
    span_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "g": self.g,
            "span": self.span,
            "iterations": self.iterations,
            "converged": self.converged,
            "span_trace": self.span_trace,
        }


def expected_next_value(V_next: np.ndarray, P: np.ndarray, pmf: np.ndarray) -> np.ndarray:
    """``E[V_next(x', y', c') | c]`` as an (x', c) array.

    The net-production sum is taken first, then the price row.
    """
    pmf = np.where(pmf > 0, pmf, 0.0)
    V = np.where(pmf[None, :, None] > 0, V_next, 0.0)
    w = np.einsum("y,xyk->xk", pmf, V, optimize=False)
    return np.einsum("xk,ck->xc", w, P, optimize=False)


def _backup_block(acts: ActionSet, G: np.ndarray, xs: slice, ys: slice) -> tuple[np.ndarray, np.ndarray]:
    feas = acts.feasible[:, xs, ys]
    q = acts.reward[:, xs, ys, :] + G[acts.x_next[:, xs, ys]]
    q = np.where(feas[..., None], q, -np.inf)
    best = q.max(axis=0)
    near = q >= best - TIE_TOL * np.maximum(1.0, np.abs(best))
    u = acts.u[:, xs, ys, None]
    absu = np.where(near, np.abs(u), np.inf)
    chosen = near & (np.abs(u) <= absu.min(axis=0) + 1e-12)
    u_star = np.where(chosen, u, -np.inf).max(axis=0)
    return best, u_star


def bellman_backup(
    day: int,
    V_next: np.ndarray,
    chain: PriceChain,
    pmf: np.ndarray,
    cfg: SystemConfig,
    grids: Grids,
    actions: ActionSet | None = None,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """One backward step for ``day``.

    ``pmf`` is the next day's net-production pmf over ``grids.y_lattice``.
    Returns value and policy arrays of shape (X, Y, C) with NaN outside the
    day's support.  Ties go to the smallest |u|, then to selling.
    """
    acts = ActionSet.build(cfg, grids) if actions is None else actions
    G = expected_next_value(V_next, chain.P, np.asarray(pmf))
    nx, ny, nc = grids.shape
    V = np.full((nx, ny, nc), np.nan)
    U = np.full((nx, ny, nc), np.nan)
    ys = slice(int(grids.y_lo[day]), int(grids.y_hi[day]) + 1)
    bounds = np.linspace(0, nx, max(1, min(threads, nx)) + 1).astype(int)
    blocks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def run(xs: slice) -> None:
        V[xs, ys], U[xs, ys] = _backup_block(acts, G, xs, ys)

    if len(blocks) == 1:
        run(blocks[0])
    else:
        with ThreadPoolExecutor(len(blocks)) as pool:
            list(pool.map(run, blocks))
    return V, U


def solve_year(
    V_terminal: np.ndarray,
    inst: MdpInstance,
    threads: int = 1,
    keep_values: bool = False,
) -> tuple[np.ndarray, PolicyTable, ValueTable | None]:
    """Backward sweep from the last day of the year to the first.

    ``V_terminal`` is the value at the start of the following year.
    """
    grids = inst.grids
    T = grids.T
    nx, ny, nc = grids.shape
    policy = np.full((T, nx, ny, nc), np.nan, dtype=np.float32)
    values = np.full((T + 1, nx, ny, nc), np.nan) if keep_values else None
    V_next = V_terminal
    if values is not None:
        values[T] = V_terminal
    for day in range(T - 1, -1, -1):
        pmf = inst.pmfs[(day + 1) % T]
        V_next, U = bellman_backup(day, V_next, inst.chain, pmf, inst.cfg, grids, inst.actions, threads)
        policy[day] = U
        if values is not None:
            values[day] = V_next
    return V_next, PolicyTable(policy, grids), None if values is None else ValueTable(values, grids)


def _support_mask(grids: Grids, day: int) -> np.ndarray:
    mask = np.zeros(len(grids.y_lattice), dtype=bool)
    mask[grids.y_lo[day] : grids.y_hi[day] + 1] = True
    return mask


def solve_periodic(
    inst: MdpInstance,
    epsilon: float = 1e-3,
    max_iters: int = 500,
    fixed_iters: int | None = None,
    V_init: np.ndarray | float = 0.0,
    threads: int = 1,
    keep_values: bool = False,
) -> tuple[PolicyTable, ConvergenceReport, ValueTable | None]:
    """Repeat yearly sweeps until every start-of-year value moves by the same amount.

    With ``fixed_iters`` the loop runs exactly that many years and reports
    the final span without stopping early.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grids = inst.grids
    mask = _support_mask(grids, 0)
    V_term = np.zeros(grids.shape) + V_init
    V_term[:, ~mask, :] = 0.0
    limit = fixed_iters if fixed_iters is not None else max_iters
    if limit < 1:
        raise ValueError("at least one yearly sweep is required")
    trace: list[float] = []
    policy = values = None
    g, span, converged = float("nan"), float("inf"), False
    for k in range(1, limit + 1):
        last = fixed_iters is not None and k == limit
        V0, policy, values = solve_year(V_term, inst, threads, keep_values and last)
        delta = (V0 - V_term)[:, mask, :]
        span = float(delta.max() - delta.min())
        g = float(delta.mean())
        trace.append(span)
        V0 = np.where(np.isnan(V0), 0.0, V0)
        if fixed_iters is None and span <= epsilon:
            converged = True
            if keep_values:
                _, policy, values = solve_year(V_term, inst, threads, True)
            break
        V_start, V_term = V_term, V0
    else:
        if keep_values and values is None:
            _, policy, values = solve_year(V_start, inst, threads, True)
    if fixed_iters is not None:
        converged = span <= epsilon
    return policy, ConvergenceReport(g, span, len(trace), converged, trace), values


def extract_action(policy: PolicyTable, state: State) -> float:
    g = policy.grids
    u = policy.u_star[state.t, g.x_index(state.x), g.y_index(state.t, state.y_bar), g.c_index(state.c)]
    return float(u)


def audit_policy(policy: PolicyTable, cfg: SystemConfig) -> float:
    """Fraction of in-support states whose stored action is feasible."""
    g = policy.grids
    x = g.x_grid[:, None]
    ok = total = 0
    for day in range(g.T):
        ys = slice(g.y_lo[day], g.y_hi[day] + 1)
        y = g.y_lattice[None, ys]
        u = policy.u_star[day][:, ys, :].astype(float)
        feas = _is_feasible(u, x[..., None], y[..., None], cfg, g.dx)
        ok += int(feas.sum())
        total += feas.size
    return ok / total


# --- persistence --------------------------------------------------------------

_MAGIC = b"H2DPTBL1"


def save_table(path: str | Path, array: np.ndarray, grids: Grids, kind: str) -> None:
    """Flat binary: magic, header length, JSON header (dims, grids), row-major body."""
    arr = np.ascontiguousarray(array)
    header = json.dumps(
        {"kind": kind, "dtype": arr.dtype.str, "shape": list(arr.shape), "grids": grids.to_dict()},
        sort_keys=True,
    ).encode()
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_table(path: str | Path) -> tuple[np.ndarray, Grids, str]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a table file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    arr = np.frombuffer(data[16 + n :], dtype=np.dtype(header["dtype"])).reshape(header["shape"])
    return arr.copy(), Grids.from_dict(header["grids"]), header["kind"]


def save_policy(path: str | Path, policy: PolicyTable) -> None:
    save_table(path, policy.u_star, policy.grids, "policy")


def load_policy(path: str | Path) -> PolicyTable:
    arr, grids, kind = load_table(path)
    if kind != "policy":
        raise ValueError(f"{path}: expected a policy table, found {kind}")
    return PolicyTable(arr, grids)


def percentile_level(pmf: np.ndarray, support: np.ndarray, q: float) -> float:
    """Smallest support point whose cumulative mass reaches ``q``."""
    cdf = np.cumsum(pmf)
    return float(support[min(int(np.searchsorted(cdf, q - 1e-12)), len(support) - 1)])


def export_policy_csv(
    path: str | Path,
    policy: PolicyTable,
    values: ValueTable | None,
    days: list[int] | None = None,
    y_levels: dict[int, list[float]] | None = None,
) -> int:
    """Write (day, x, y_bar, c, u_star, V) rows; ``day`` is 1-based.

    ``days`` are 0-based indices.  ``y_levels`` optionally restricts the
    net-production levels per day.  Returns the number of rows written.
    """
    g = policy.grids
    days = list(range(g.T)) if days is None else days
    rows = 0
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["day", "x", "y_bar", "c", "u_star", "V"])
        for t in days:
            levels = g.y_grid(t) if y_levels is None else y_levels[t]
            for y in levels:
                yi = g.y_index(t, y)
                for xi, x in enumerate(g.x_grid):
                    for ci, c in enumerate(g.c_grid):
                        v = "" if values is None else repr(float(values.V[t, xi, yi, ci]))
                        out.writerow([t + 1, repr(float(x)), repr(float(y)), repr(float(c)), repr(float(policy.u_star[t, xi, yi, ci])), v])
                        rows += 1
    return rows


def evaluate_policy(
    inst: MdpInstance,
    policy: PolicyTable,
    epsilon: float = 1e-3,
    max_iters: int = 500,
) -> ConvergenceReport:
    """Long-run average yearly reward of a fixed policy on ``inst``.

    The policy must cover every in-support state of ``inst.grids``.
    """
    grids = inst.grids
    nx, ny, nc = grids.shape
    xs = np.arange(nx)[:, None, None]
    cs = np.arange(nc)[None, None, :]
    plans = []
    for day in range(grids.T):
        ys = np.arange(grids.y_lo[day], grids.y_hi[day] + 1)[None, :, None]
        u = policy.u_star[day][:, ys[0, :, 0], :].astype(float)
        if np.isnan(u).any():
            raise ValueError(f"policy undefined on the support of day {day}")
        y = grids.y_lattice[ys]
        x_next, unmet, *_ = transition_arrays(grids.x_grid[xs], y, u, inst.cfg, grids)
        c = grids.c_grid[cs]
        r = u * np.where(u < 0, c + inst.cfg.c_plus, c) - inst.cfg.s * unmet
        plans.append((slice(grids.y_lo[day], grids.y_hi[day] + 1), np.broadcast_to(x_next, u.shape), r))
    mask = _support_mask(grids, 0)
    V_term = np.zeros(grids.shape)
    trace: list[float] = []
    g, span = float("nan"), float("inf")
    for _ in range(max_iters):
        V_next = V_term
        for day in range(grids.T - 1, -1, -1):
            G = expected_next_value(V_next, inst.chain.P, inst.pmfs[(day + 1) % grids.T])
            ys, x_next, r = plans[day]
            V = np.full(grids.shape, np.nan)
            V[:, ys, :] = r + G[x_next, cs]
            V_next = V
        delta = (V_next - V_term)[:, mask, :]
        span = float(delta.max() - delta.min())
        g = float(delta.mean())
        trace.append(span)
        V_term = np.where(np.isnan(V_next), 0.0, V_next)
        if span <= epsilon:
            break
    return ConvergenceReport(g, span, len(trace), span <= epsilon, trace)
