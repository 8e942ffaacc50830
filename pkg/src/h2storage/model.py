"""System parameters, grids and the deterministic one-day mechanics.

Sign convention: ``u`` is the energy exchanged with the grid at the end of a
day, positive when selling and negative when buying.  The energy flowing
toward storage is ``f = y_bar - u``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

# Float slack used when rounding bounds onto a lattice.
_LATTICE_EPS = 1e-9


class FuelCellMode(str, Enum):
    LITERAL = "literal"
    DISCHARGE = "discharge"


@dataclass(frozen=True)
class SystemConfig:
    """Physical and economic parameters of the solar park with storage.

    Capacities are energy per day (MWh), prices in money/MWh.
    """

    w: float = 5.0
    m: float = 1000.0
    k_c: float = 30.0
    k_plus: float = 50.0
    k_minus: float = 50.0
    c_plus: float = 5.0
    alpha: float = 0.5
    s: float = 1000.0
    T: int = 365
    fuel_cell_mode: FuelCellMode = FuelCellMode.LITERAL

    def __post_init__(self) -> None:
        if not isinstance(self.fuel_cell_mode, FuelCellMode):
            object.__setattr__(self, "fuel_cell_mode", FuelCellMode(self.fuel_cell_mode))
        for name in ("m", "k_c", "k_plus", "k_minus", "c_plus"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if not self.w > 0:
            raise ValueError(f"w must be > 0, got {self.w!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha!r}")
        if not self.s > 0:
            raise ValueError(f"s must be > 0, got {self.s!r}")

    def replace(self, **changes) -> "SystemConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return SystemConfig(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["fuel_cell_mode"] = self.fuel_cell_mode.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown SystemConfig field(s): {', '.join(unknown)}")
        return cls(**data)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "SystemConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _uniform_grid(upper: float, step: float, name: str) -> np.ndarray:
    n = upper / step
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"{name} upper bound {upper} is not a multiple of step {step}")
    return np.arange(int(round(n)) + 1) * step


@dataclass
class Grids:
    """Discretised inventory, price and net-production supports.

    Net production lives on one year-wide lattice ``y_lattice``; day ``t``
    uses the contiguous slice ``y_lo[t]:y_hi[t] + 1`` of it.
    """

    dx: float
    dc: float
    dj: float
    x_grid: np.ndarray
    c_grid: np.ndarray
    y_lattice: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray

    @classmethod
    def build(
        cls,
        m: float,
        dx: float,
        c_max: float,
        dc: float,
        dj: float,
        l_minus: np.ndarray,
        l_plus: np.ndarray,
    ) -> "Grids":
        """Build grids; per-day bounds are rounded outward onto the dj lattice."""
        if dx <= 0 or dc <= 0 or dj <= 0:
            raise ValueError("grid steps must be positive")
        x_grid = _uniform_grid(m, dx, "m") if m > 0 else np.zeros(1)
        c_grid = _uniform_grid(c_max, dc, "c_max")
        lo = np.floor(np.asarray(l_minus, dtype=float) / dj + _LATTICE_EPS).astype(int)
        hi = np.ceil(np.asarray(l_plus, dtype=float) / dj - _LATTICE_EPS).astype(int)
        hi = np.maximum(hi, lo)
        base = lo.min()
        y_lattice = np.arange(base, hi.max() + 1) * dj
        return cls(dx, dc, dj, x_grid, c_grid, y_lattice, lo - base, hi - base)

    @property
    def T(self) -> int:
        return len(self.y_lo)

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.x_grid), len(self.y_lattice), len(self.c_grid)

    def y_grid(self, day: int) -> np.ndarray:
        return self.y_lattice[self.y_lo[day] : self.y_hi[day] + 1]

    def x_index(self, x: float) -> int:
        return _grid_index(self.x_grid, self.dx, x, "x")

    def c_index(self, c: float) -> int:
        return _grid_index(self.c_grid, self.dc, c, "c")

    def y_index(self, day: int, y_bar: float) -> int:
        i = _grid_index(self.y_lattice, self.dj, y_bar, "y_bar")
        if not self.y_lo[day] <= i <= self.y_hi[day]:
            raise ValueError(f"y_bar={y_bar} outside the support of day {day}")
        return i

    def snap_x(self, x):
        """Round inventory to the nearest grid level (ties go down) and clamp."""
        idx = np.ceil(np.asarray(x, dtype=float) / self.dx - 0.5 - _LATTICE_EPS)
        return np.clip(idx, 0, len(self.x_grid) - 1).astype(np.int64)

    def snap_y(self, y_bar, day: int | np.ndarray):
        """Nearest net-production lattice index, clipped to the day's support."""
        idx = np.rint((np.asarray(y_bar, dtype=float) - self.y_lattice[0]) / self.dj)
        return np.clip(idx, self.y_lo[day], self.y_hi[day]).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "dx": self.dx,
            "dc": self.dc,
            "dj": self.dj,
            "m": float(self.x_grid[-1]),
            "c_max": float(self.c_grid[-1]),
            "y_min": float(self.y_lattice[0]),
            "y_lo": self.y_lo.tolist(),
            "y_hi": self.y_hi.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Grids":
        dx, dc, dj = data["dx"], data["dc"], data["dj"]
        y_lo = np.asarray(data["y_lo"], dtype=np.int64)
        y_hi = np.asarray(data["y_hi"], dtype=np.int64)
        y0 = round(data["y_min"] / dj)
        return cls(
            dx,
            dc,
            dj,
            _uniform_grid(data["m"], dx, "m") if data["m"] > 0 else np.zeros(1),
            _uniform_grid(data["c_max"], dc, "c_max"),
            (y0 + np.arange(int(y_hi.max()) + 1)) * dj,
            y_lo,
            y_hi,
        )


def _grid_index(grid: np.ndarray, step: float, value: float, name: str) -> int:
    pos = (value - grid[0]) / step
    i = int(round(pos))
    if abs(pos - i) > 1e-6 or not 0 <= i < len(grid):
        raise ValueError(f"{name}={value} is not a grid point")
    return i


@dataclass(frozen=True)
class State:
    t: int
    x: float
    y_bar: float
    c: float


@dataclass(frozen=True)
class TransitionOutcome:
    x_next: float
    unmet: float
    spilled: float
    charged: float
    discharged: float


def buy_bound(state: State, cfg: SystemConfig) -> float:
    """Largest energy that may be bought: cable, storage headroom, electrolyzer."""
    return float(_buy_bound(state.x, state.y_bar, cfg))


def sell_bound(state: State, cfg: SystemConfig) -> float:
    """Largest energy that may be sold: cable, available energy, fuel cell."""
    return float(_sell_bound(state.x, state.y_bar, cfg))


def _buy_bound(x, y_bar, cfg: SystemConfig):
    headroom = (cfg.m - x - cfg.alpha * y_bar) / cfg.alpha
    b = np.minimum(np.minimum(cfg.k_c, headroom), cfg.k_plus - y_bar)
    return np.maximum(b, 0.0)


def _sell_bound(x, y_bar, cfg: SystemConfig):
    if cfg.fuel_cell_mode is FuelCellMode.LITERAL:
        cell = cfg.k_minus
    else:
        cell = np.maximum(y_bar, 0.0) + cfg.k_minus
    s = np.minimum(np.minimum(cfg.k_c, x + y_bar), cell)
    return np.maximum(s, 0.0)


def action_candidates(cfg: SystemConfig, grids: Grids) -> np.ndarray:
    """Every lattice action that can ever be feasible, ordered by value."""
    k = math.floor(cfg.k_c / grids.dx + _LATTICE_EPS)
    return np.arange(-k, k + 1) * grids.dx


def feasible_actions(state: State, cfg: SystemConfig, grids: Grids) -> list[float]:
    """Feasible actions of a state, ascending.

    The dx lattice points inside ``[-B, S]`` plus the exact balancing action
    ``u = y_bar`` whenever it lies in that interval.
    """
    b = buy_bound(state, cfg)
    s = sell_bound(state, cfg)
    lo = -math.floor(b / grids.dx + _LATTICE_EPS)
    hi = math.floor(s / grids.dx + _LATTICE_EPS)
    actions = {k * grids.dx for k in range(lo, hi + 1)}
    if -b - _LATTICE_EPS <= state.y_bar <= s + _LATTICE_EPS:
        actions.add(float(state.y_bar))
    return sorted(actions)


def _is_feasible(u, x, y_bar, cfg: SystemConfig, dx: float):
    """Vectorised membership test matching ``feasible_actions``."""
    b = _buy_bound(x, y_bar, cfg)
    s = _sell_bound(x, y_bar, cfg)
    tol = _LATTICE_EPS * max(dx, 1.0)
    inside = (u >= -b - tol) & (u <= s + tol)
    on_lattice = np.abs(u / dx - np.rint(u / dx)) < _LATTICE_EPS
    lattice_ok = on_lattice & (u >= -np.floor(b / dx + _LATTICE_EPS) * dx - tol) & (
        u <= np.floor(s / dx + _LATTICE_EPS) * dx + tol
    )
    balancing = np.abs(u - y_bar) < tol
    return lattice_ok | (inside & balancing)


def transition_arrays(x, y_bar, u, cfg: SystemConfig, grids: Grids):
    """Vectorised one-day transition.

    Returns ``(x_next_index, unmet, spilled, charged, discharged)``; all
    inputs broadcast against each other.
    """
    x = np.asarray(x, dtype=float)
    flow = np.asarray(y_bar, dtype=float) - np.asarray(u, dtype=float)
    pos = np.maximum(flow, 0.0)
    neg = np.maximum(-flow, 0.0)
    charged = np.minimum(np.minimum(pos, cfg.k_plus), (cfg.m - x) / cfg.alpha)
    charged = np.maximum(charged, 0.0)
    spilled = pos - charged
    discharged = np.minimum(np.minimum(neg, x), cfg.k_minus)
    unmet = neg - discharged
    x_next = grids.snap_x(x + cfg.alpha * charged - discharged)
    return x_next, unmet, spilled, charged, discharged


def apply_action(x: float, y_bar: float, u: float, cfg: SystemConfig, grids: Grids) -> TransitionOutcome:
    xi, unmet, spilled, charged, discharged = transition_arrays(x, y_bar, u, cfg, grids)
    return TransitionOutcome(
        x_next=float(grids.x_grid[int(xi)]),
        unmet=float(unmet),
        spilled=float(spilled),
        charged=float(charged),
        discharged=float(discharged),
    )


def reward(u, c, unmet, cfg: SystemConfig):
    """Grid revenue minus purchase cost (with markup) minus unmet-demand penalty."""
    u = np.asarray(u, dtype=float)
    price = np.where(u < 0, np.asarray(c, dtype=float) + cfg.c_plus, c)
    r = u * price - cfg.s * np.asarray(unmet, dtype=float)
    return r if r.ndim else float(r)


__all__ = [
    "FuelCellMode",
    "SystemConfig",
    "Grids",
    "State",
    "TransitionOutcome",
    "buy_bound",
    "sell_bound",
    "feasible_actions",
    "action_candidates",
    "apply_action",
    "transition_arrays",
    "reward",
]
