"""Calibration and discretisation of prices, solar production and demand."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import special

from .model import Grids, SystemConfig

WEEKS = 52
# Demand support is cut at this many standard deviations around the mean.
DEMAND_SPAN_SD = 4.0
# Internal convolution grid is this many times finer than dj.
FINE_FACTOR = 10
BASE_CAPACITY_MWP = 5.0


class SeasonalityVariant(str, Enum):
    REMOVE_MONTH_AND_WEEKDAY = "remove_month_and_weekday"
    REMOVE_WEEKDAY = "remove_weekday"
    RAW = "raw"


@dataclass(frozen=True)
class Ar1Params:
    phi: float
    theta: float
    sigma_c: float

    @property
    def is_stationary(self) -> bool:
        return abs(self.theta) < 1

    @property
    def stationary_mean(self) -> float:
        return self.phi / (1 - self.theta)


@dataclass(frozen=True)
class PriceSeasonalityModel:
    variant: SeasonalityVariant
    gamma1: float = 0.0
    gamma2: tuple[float, ...] = ()
    gamma3: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", SeasonalityVariant(self.variant))
        n_month, n_weekday = {
            SeasonalityVariant.REMOVE_MONTH_AND_WEEKDAY: (11, 6),
            SeasonalityVariant.REMOVE_WEEKDAY: (0, 6),
            SeasonalityVariant.RAW: (0, 0),
        }[self.variant]
        if len(self.gamma2) != n_month or len(self.gamma3) != n_weekday:
            raise ValueError(f"coefficient lengths do not match variant {self.variant.value}")

    def evaluate(self, dates: np.ndarray) -> np.ndarray:
        """Seasonal component f'(t) at the given dates (constant included)."""
        if self.variant is SeasonalityVariant.RAW:
            return np.zeros(len(dates))
        design = _dummy_design(dates, self.variant)
        coef = np.concatenate([[self.gamma1], self.gamma2, self.gamma3])
        return design @ coef


@dataclass(frozen=True)
class Ar1Fit:
    params: Ar1Params
    seasonality: PriceSeasonalityModel
    std_error: float


class NonStationaryFit(ValueError):
    """The fitted lag coefficient is outside (-1, 1); the estimate is attached."""

    def __init__(self, fit: Ar1Fit):
        super().__init__(f"non-stationary AR(1) fit: theta={fit.params.theta:.4f}")
        self.fit = fit


def _months(dates: np.ndarray) -> np.ndarray:
    return dates.astype("datetime64[M]").astype(np.int64) % 12 + 1


def _weekdays(dates: np.ndarray) -> np.ndarray:
    # 1970-01-01 was a Thursday; Monday = 0.
    return (dates.astype("datetime64[D]").astype(np.int64) + 3) % 7


def _dummy_design(dates: np.ndarray, variant: SeasonalityVariant) -> np.ndarray:
    dates = np.asarray(dates, dtype="datetime64[D]")
    cols = [np.ones(len(dates))]
    if variant is SeasonalityVariant.REMOVE_MONTH_AND_WEEKDAY:
        months = _months(dates)
        cols += [(months == k).astype(float) for k in range(2, 13)]
    weekdays = _weekdays(dates)
    cols += [(weekdays == k).astype(float) for k in range(1, 7)]
    return np.column_stack(cols)


def _ols_lag1(z: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Regress z[1:] on z[:-1]; returns (intercept, slope, residuals)."""
    prev, cur = z[:-1], z[1:]
    dev = prev - prev.mean()
    sxx = dev @ dev
    if sxx <= 1e-12 * max(1.0, prev.mean() ** 2) * len(prev):
        theta = 0.0
    else:
        theta = float(dev @ (cur - cur.mean()) / sxx)
    phi = float(cur.mean() - theta * prev.mean())
    return phi, theta, cur - phi - theta * prev


def fit_ar1(
    prices: np.ndarray,
    variant: SeasonalityVariant | str = SeasonalityVariant.RAW,
    dates: np.ndarray | None = None,
) -> Ar1Fit:
    """Fit ``C_t = phi + theta C_{t-1} + xi_t`` after optional dummy deseasonalising.

    ``std_error`` is ``sqrt(sum_{t>=2} (C_t - C_hat_t)^2 / T)`` with
    ``C_hat_t = phi + theta C_{t-1} + f'(t)`` evaluated on the original
    observations.  Raises ``NonStationaryFit`` when ``|theta| >= 1``.
    """
    variant = SeasonalityVariant(variant)
    prices = np.asarray(prices, dtype=float)
    if prices.ndim != 1 or len(prices) < 30:
        raise ValueError("need at least 30 daily prices")
    if not np.all(np.isfinite(prices)):
        raise ValueError("prices must be finite")

    if variant is SeasonalityVariant.RAW:
        seasonality = PriceSeasonalityModel(variant)
        seasonal = np.zeros_like(prices)
    else:
        if dates is None:
            raise ValueError(f"variant {variant.value} needs dates")
        design = _dummy_design(dates, variant)
        coef, *_ = np.linalg.lstsq(design, prices, rcond=None)
        n_month = 11 if variant is SeasonalityVariant.REMOVE_MONTH_AND_WEEKDAY else 0
        seasonality = PriceSeasonalityModel(
            variant,
            float(coef[0]),
            tuple(float(v) for v in coef[1 : 1 + n_month]),
            tuple(float(v) for v in coef[1 + n_month :]),
        )
        seasonal = design @ coef

    phi, theta, resid = _ols_lag1(prices - seasonal)
    sigma = math.sqrt(resid @ resid / (len(resid) - 2))
    predicted = phi + theta * prices[:-1] + seasonal[1:]
    std_error = math.sqrt(np.sum((prices[1:] - predicted) ** 2) / len(prices))
    fit = Ar1Fit(Ar1Params(phi, theta, sigma), seasonality, std_error)
    if not fit.params.is_stationary:
        raise NonStationaryFit(fit)
    return fit


@dataclass
class PriceChain:
    grid: np.ndarray
    P: np.ndarray

    def stationary(self) -> np.ndarray:
        n = len(self.grid)
        a = np.vstack([self.P.T - np.eye(n), np.ones(n)])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    def cumulative(self) -> np.ndarray:
        cum = np.cumsum(self.P, axis=1)
        cum[:, -1] = 1.0
        return cum


def discretize_ar1(params: Ar1Params, c_grid: np.ndarray) -> PriceChain:
    """CDF-binned transition matrix on a uniform price grid.

    Boundary bins absorb the tails, so negative prices collapse onto the
    lowest grid level.
    """
    grid = np.asarray(c_grid, dtype=float)
    if not params.is_stationary:
        raise ValueError("AR(1) parameters are not stationary")
    step = grid[1] - grid[0] if len(grid) > 1 else 1.0
    mu = params.phi + params.theta * grid
    n = len(grid)
    if params.sigma_c <= 0:
        idx = np.clip(np.rint((mu - grid[0]) / step), 0, n - 1).astype(int)
        P = np.zeros((n, n))
        P[np.arange(n), idx] = 1.0
        return PriceChain(grid, P)
    edges = np.concatenate([[-np.inf], grid[:-1] + step / 2, [np.inf]])
    cdf = special.ndtr((edges[None, :] - mu[:, None]) / params.sigma_c)
    P = np.diff(cdf, axis=1)
    P /= P.sum(axis=1, keepdims=True)
    return PriceChain(grid, P)


@dataclass(frozen=True)
class WeeklyBeta:
    week: int
    a: float
    b: float
    scale: float
    fallback: bool = False

    @property
    def mean(self) -> float:
        return self.scale * self.a / (self.a + self.b)


def week_of_day(day_of_year):
    """Week 1..52 of a 1-based day of year; the trailing days join week 52."""
    return np.minimum((np.asarray(day_of_year) - 1) // 7 + 1, WEEKS)


def beta_moments(values: np.ndarray) -> tuple[float, float, bool]:
    """Moment-matched beta shapes of values in [0, 1]; flags infeasible input."""
    mean = float(np.mean(values))
    var = float(np.var(values, ddof=1)) if len(values) > 1 else 0.0
    if not 0 < mean < 1 or var <= 0 or var >= mean * (1 - mean):
        return 1.0, 1.0, True
    k = mean * (1 - mean) / var - 1
    return mean * k, (1 - mean) * k, False


def fit_weekly_beta(
    weeks: np.ndarray,
    production: np.ndarray,
    scales: dict[int, float] | np.ndarray | None = None,
    min_obs: int = 10,
) -> list[WeeklyBeta]:
    """Per-week beta fit of daily production normalised by the week's scale.

    The scale is the week's maximum observation, or the larger of that and
    ``scales[week]`` when a theoretical maximum is supplied.
    """
    weeks = np.asarray(weeks, dtype=int)
    production = np.asarray(production, dtype=float)
    out = []
    for week in range(1, WEEKS + 1):
        obs = production[weeks == week]
        if len(obs) < min_obs:
            raise ValueError(f"week {week} has {len(obs)} observations, need {min_obs}")
        scale = float(obs.max())
        if scales is not None:
            scale = max(scale, float(scales[week] if isinstance(scales, dict) else scales[week - 1]))
        if scale <= 0:
            a, b, bad = 1.0, 1.0, True
            scale = 1.0
        else:
            a, b, bad = beta_moments(obs / scale)
        if bad:
            warnings.warn(f"beta moment matching infeasible for week {week}; using Beta(1, 1)")
        out.append(WeeklyBeta(week, a, b, scale, bad))
    return out


def synthetic_weekly_betas(
    w: float = BASE_CAPACITY_MWP,
    clear_sky_hours: tuple[float, float] = (1.7, 7.7),
    mean_fraction: tuple[float, float] = (0.38, 0.60),
    concentration: float = 4.0,
) -> list[WeeklyBeta]:
    """Synthetic seasonal production profile (peak week 26, trough week 1).

    Week scale is ``w`` times the clear-sky full-load hours; the beta mean
    follows the same cosine and ``a + b`` is held at ``concentration``.
    """
    out = []
    for week in range(1, WEEKS + 1):
        season = 0.5 - 0.5 * math.cos(math.pi * (week - 1) / 25)
        hours = clear_sky_hours[0] + season * (clear_sky_hours[1] - clear_sky_hours[0])
        frac = mean_fraction[0] + season * (mean_fraction[1] - mean_fraction[0])
        out.append(WeeklyBeta(week, frac * concentration, (1 - frac) * concentration, w * hours))
    return out


def scale_betas(betas: list[WeeklyBeta], w: float, base_w: float = BASE_CAPACITY_MWP) -> list[WeeklyBeta]:
    """Rescale production linearly with installed capacity."""
    f = w / base_w
    return [WeeklyBeta(b.week, b.a, b.b, b.scale * f, b.fallback) for b in betas]


@dataclass(frozen=True)
class DemandModel:
    split_day: int
    seg1: tuple[float, float]
    seg2: tuple[float, float]
    sigma_d: float
    households_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma_d > 0:
            raise ValueError(f"sigma_d must be > 0, got {self.sigma_d!r}")
        if self.split_day < 1:
            raise ValueError(f"split_day must be >= 1, got {self.split_day!r}")
        if not self.households_scale > 0:
            raise ValueError("households_scale must be > 0")

    def mean(self, day_of_year):
        """Mean daily demand for 1-based day(s) of year."""
        d = np.asarray(day_of_year, dtype=float)
        mu = np.where(
            d <= self.split_day,
            self.seg1[0] + self.seg1[1] * d,
            self.seg2[0] + self.seg2[1] * d,
        )
        return self.households_scale * mu

    @property
    def sd(self) -> float:
        return self.households_scale * self.sigma_d

    def bounds(self, day_of_year) -> tuple[np.ndarray, np.ndarray]:
        """Demand support used for discretisation: mean -/+ 4 sd, floored at 0."""
        mu = self.mean(day_of_year)
        return np.maximum(mu - DEMAND_SPAN_SD * self.sd, 0.0), mu + DEMAND_SPAN_SD * self.sd


def paper_demand_model() -> DemandModel:
    """Two-segment demand of a 1500-household village (fitted consumption lines)."""
    return DemandModel(199, (15.3, -0.0302), (1.79, 0.0372), 0.62)


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - intercept - slope * x
    se = math.sqrt(resid @ resid / (len(x) - 2))
    return float(intercept), float(slope), se


def fit_demand(consumption: np.ndarray, margin: int = 30) -> DemandModel:
    """Two-segment linear demand with the split minimising the summed standard errors."""
    y = np.asarray(consumption, dtype=float)
    T = len(y)
    if T < 2 * margin + 2:
        raise ValueError("consumption series too short for a split search")
    days = np.arange(1, T + 1, dtype=float)
    best = None
    for split in range(margin, T - margin + 1):
        i1, s1, e1 = _linear_fit(days[:split], y[:split])
        i2, s2, e2 = _linear_fit(days[split:], y[split:])
        total = e1 + e2
        if best is None or total < best[0] - 1e-12:
            best = (total, split, (i1, s1), (i2, s2), max(e1, e2))
    _, split, seg1, seg2, sigma = best
    return DemandModel(split, seg1, seg2, sigma)


@dataclass
class Calibration:
    """Everything stochastic the solver and simulator need."""

    ar1: Ar1Params
    betas: list[WeeklyBeta]
    demand: DemandModel
    synthetic: bool = False
    notes: str = ""

    def for_capacity(self, w: float) -> "Calibration":
        return Calibration(self.ar1, scale_betas(self.betas, w), self.demand, self.synthetic, self.notes)

    def day_params(self, T: int = 365) -> dict[str, np.ndarray]:
        """Per-day (0-based) beta shapes, scale, demand mean and sd."""
        days = np.arange(1, T + 1)
        wk = week_of_day(days) - 1
        by_week = {b.week: b for b in self.betas}
        betas = [by_week[int(k) + 1] for k in wk]
        return {
            "a": np.array([b.a for b in betas]),
            "b": np.array([b.b for b in betas]),
            "scale": np.array([b.scale for b in betas]),
            "mu": self.demand.mean(days),
            "sd": np.full(T, self.demand.sd),
        }

    def to_dict(self) -> dict:
        return {
            "synthetic": self.synthetic,
            "notes": self.notes,
            "ar1": asdict(self.ar1),
            "weekly_beta": [asdict(b) for b in self.betas],
            "demand": asdict(self.demand),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Calibration":
        d = data["demand"]
        return cls(
            Ar1Params(**data["ar1"]),
            [WeeklyBeta(**b) for b in data["weekly_beta"]],
            DemandModel(d["split_day"], tuple(d["seg1"]), tuple(d["seg2"]), d["sigma_d"], d.get("households_scale", 1.0)),
            bool(data.get("synthetic", False)),
            data.get("notes", ""),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "Calibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


PAPER_AR1 = Ar1Params(phi=5.23, theta=0.87, sigma_c=7.7)

SYNTHETIC_NOTE = (
    "SYNTHETIC calibration: weekly beta production parameters are a generated "
    "seasonal profile, not fitted to measured irradiation data."
)


def synthetic_calibration() -> Calibration:
    return Calibration(PAPER_AR1, synthetic_weekly_betas(), paper_demand_model(), True, SYNTHETIC_NOTE)


def packaged_calibration_path() -> Path:
    return Path(__file__).parent / "data" / "synthetic_calibration.json"


def net_production_bounds(cal: Calibration, T: int = 365) -> tuple[np.ndarray, np.ndarray]:
    """Continuous per-day support [l_minus, l_plus] of net production."""
    p = cal.day_params(T)
    d_lo, d_hi = cal.demand.bounds(np.arange(1, T + 1))
    return -d_hi, p["scale"] - d_lo


def make_grids(
    cfg: SystemConfig,
    cal: Calibration,
    dx: float = 10.0,
    dc: float = 3.0,
    c_max: float = 90.0,
    dj: float = 5.0,
) -> Grids:
    l_minus, l_plus = net_production_bounds(cal, cfg.T)
    return Grids.build(cfg.m, dx, c_max, dc, dj, l_minus, l_plus)


@dataclass
class NetProductionPmf:
    day: int
    support: np.ndarray
    probs: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.support @ self.probs)


def _beta_fine(a: float, b: float, scale: float, h: float) -> tuple[int, np.ndarray]:
    n = max(int(math.ceil(scale / h - 1e-9)), 0)
    k = np.arange(n + 1)
    lo = np.clip((k - 0.5) * h / scale, 0.0, 1.0)
    hi = np.clip((k + 0.5) * h / scale, 0.0, 1.0)
    hi[-1] = 1.0
    p = special.betainc(a, b, hi) - special.betainc(a, b, lo)
    return 0, p / p.sum()


def _demand_fine(mu: float, sd: float, d_lo: float, d_hi: float, h: float) -> tuple[int, np.ndarray]:
    k0 = int(math.floor(d_lo / h + 1e-9))
    k1 = max(int(math.ceil(d_hi / h - 1e-9)), k0)
    k = np.arange(k0, k1 + 1)
    if sd <= 0:
        p = np.zeros(len(k))
        p[int(np.clip(round(mu / h) - k0, 0, len(k) - 1))] = 1.0
        return k0, p
    edges = np.concatenate([[0.0], (k[:-1] + 0.5) * h, [np.inf]])
    cdf = special.ndtr((edges - mu) / sd)
    p = np.diff(cdf)
    return k0, p / p.sum()


def bin_difference(
    y_start: int,
    py: np.ndarray,
    d_start: int,
    pd: np.ndarray,
    h: float,
    support: np.ndarray,
) -> np.ndarray:
    """Pmf of Y - D on ``support`` from fine lattice pmfs (values ``(start + i) * h``).

    Mass is assigned to the nearest support point, split evenly on exact
    midpoints, with tails absorbed by the endpoints.
    """
    conv = np.convolve(py, pd[::-1])
    z = (np.arange(len(conv)) - (len(pd) - 1) + y_start - d_start) * h
    probs = np.zeros(len(support))
    if len(support) == 1:
        probs[0] = conv.sum()
        return probs / probs.sum()
    step = support[1] - support[0]
    pos = (z - support[0]) / step
    lower = np.floor(pos + 1e-9)
    frac = pos - lower
    w_lo = np.where(np.abs(frac - 0.5) < 1e-9, 0.5, (frac < 0.5).astype(float))
    last = len(support) - 1
    np.add.at(probs, np.clip(lower, 0, last).astype(int), conv * w_lo)
    np.add.at(probs, np.clip(lower + 1, 0, last).astype(int), conv * (1 - w_lo))
    return probs / probs.sum()


def net_production_pmf(day: int, cal: Calibration, grids: Grids, T: int | None = None) -> NetProductionPmf:
    """Pmf of net production for 0-based ``day`` on that day's y grid."""
    T = grids.T if T is None else T
    p = cal.day_params(T)
    h = grids.dj / FINE_FACTOR
    y0, py = _beta_fine(p["a"][day], p["b"][day], p["scale"][day], h)
    d_lo, d_hi = cal.demand.bounds(day + 1)
    d0, pd = _demand_fine(p["mu"][day], p["sd"][day], float(d_lo), float(d_hi), h)
    support = grids.y_grid(day)
    return NetProductionPmf(day, support, bin_difference(y0, py, d0, pd, h, support))


def pmf_table(cal: Calibration, grids: Grids) -> np.ndarray:
    """Array (T, len(y_lattice)) of daily pmfs padded with zeros off-support."""
    table = np.zeros((grids.T, len(grids.y_lattice)))
    for t in range(grids.T):
        pmf = net_production_pmf(t, cal, grids)
        table[t, grids.y_lo[t] : grids.y_hi[t] + 1] = pmf.probs
    return table


class NetProductionSampler:
    """Vectorised draws of snapped net production for given days."""

    def __init__(self, cal: Calibration, grids: Grids):
        p = cal.day_params(grids.T)
        self.a, self.b, self.scale = p["a"], p["b"], p["scale"]
        self.mu, self.sd = p["mu"], p["sd"]
        self.p0 = special.ndtr(-self.mu / self.sd)
        self.grids = grids

    def draw(self, rng: np.random.Generator, days: np.ndarray) -> np.ndarray:
        """Lattice indices of net production for each entry of ``days``."""
        days = np.asarray(days)
        y = self.scale[days] * rng.beta(self.a[days], self.b[days])
        u = rng.random(days.shape)
        p0 = self.p0[days]
        d = self.mu[days] + self.sd[days] * special.ndtri(p0 + u * (1 - p0))
        return self.grids.snap_y(y - d, days)


def sample_price(chain_cum: np.ndarray, prev_idx, u) -> np.ndarray:
    """Next price index by inverse CDF on the conditioning row."""
    rows = chain_cum[prev_idx]
    return np.minimum((rows <= np.asarray(u)[..., None]).sum(axis=-1), chain_cum.shape[1] - 1)


def sample_day(
    day: int,
    cal: Calibration,
    grids: Grids,
    chain: PriceChain,
    prev_c: float,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """One day of (net production, price), both snapped to their grids."""
    sampler = NetProductionSampler(cal, grids)
    yi = sampler.draw(rng, np.array([day]))[0]
    ci = sample_price(chain.cumulative(), grids.c_index(prev_c), rng.random())
    return float(grids.y_lattice[yi]), float(grids.c_grid[int(ci)])


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent random stream ``index`` derived from ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


# --- CSV ingestion -----------------------------------------------------------


def _read_csv(path: str | Path, value_col: str) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "date" not in reader.fieldnames or value_col not in reader.fieldnames:
            raise ValueError(f"{path}: expected header with columns 'date' and '{value_col}'")
        dates, values = [], []
        for row in reader:
            dates.append(np.datetime64(row["date"].strip()[:10], "D"))
            values.append(float(row[value_col]))
    if not dates:
        raise ValueError(f"{path}: no data rows")
    return np.array(dates, dtype="datetime64[D]"), np.array(values)


def read_prices(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return _read_csv(path, "price_eur_mwh")


def read_production(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return _read_csv(path, "mwh")


def read_consumption(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return _read_csv(path, "mwh")


def day_of_year(dates: np.ndarray) -> np.ndarray:
    dates = np.asarray(dates, dtype="datetime64[D]")
    return (dates - dates.astype("datetime64[Y]")).astype(np.int64) + 1


def daily_profile(dates: np.ndarray, values: np.ndarray, T: int = 365) -> np.ndarray:
    """Mean value per day of year; day 366 is dropped."""
    doy = day_of_year(dates)
    keep = doy <= T
    sums = np.bincount(doy[keep] - 1, weights=values[keep], minlength=T)
    counts = np.bincount(doy[keep] - 1, minlength=T)
    if np.any(counts == 0):
        raise ValueError("consumption data does not cover every day of the year")
    return sums / counts
