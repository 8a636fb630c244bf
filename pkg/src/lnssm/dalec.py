"""Reduced two-pool DALEC (foliage + labile carbon) as a lognormal state space model.

Days are indexed t = 1..T from the first driver date; state index 0 is the
carbon stock on the eve of day 1. Seasonal rates use a continuing day of year
(day of year of the first date, then +1 per day) so they stay periodic across
year boundaries.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import astuple, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np
from numba import njit

from .dist import DomainError
from .models import NumericError
from .smc import FilterNoise, FilterResult, ParticleDegeneracyError

S_YEAR = 365.25 / math.pi
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
C_LMA = 75.0
ONSET_CONST = 6.9088
ONSET_SHIFT = 0.6245


class Embedding(str, Enum):
    BIASED = "biased"
    MOMENT_MATCHED = "mm"

    @property
    def default_tau(self) -> float:
        return 4.18 if self is Embedding.BIASED else 4.0

    @classmethod
    def parse(cls, name) -> "Embedding":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "_")
        aliases = {"biased": cls.BIASED, "mm": cls.MOMENT_MATCHED, "moment_matched": cls.MOMENT_MATCHED}
        if key not in aliases:
            raise ValueError(f"unknown embedding {name!r}")
        return aliases[key]


# -- special functions and seasonal rates --------------------------------------


def lambert_w0(x: float, tol: float = 1e-15, max_iter: int = 100) -> float:
    """Principal branch of the Lambert W function by Halley iteration."""
    x = float(x)
    if x < -1.0 / math.e:
        raise DomainError(f"W0 undefined for x={x} < -1/e")
    if x == 0.0:
        return 0.0
    if x == -1.0 / math.e:
        return -1.0
    if x < 1.0:
        # series about the branch point
        p = math.sqrt(2.0 * (math.e * x + 1.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    else:
        w = math.log(x)
        if x > 3.0:
            w -= math.log(w)
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= step
        if abs(step) <= tol * (1.0 + abs(w)):
            break
    return w


def psi_f(c_lf: float) -> float:
    if not 0.0 < c_lf < 1.0:
        raise DomainError(f"c_lf must lie in (0, 1), got {c_lf}")
    return -math.sqrt(lambert_w0(1.0 / (2.0 * math.pi * math.log(1.0 - c_lf) ** 2))) / math.sqrt(2.0)


def phi_f(t, d_f: float, c_lf: float, c_rf: float):
    """Daily leaf-fall rate."""
    if c_lf >= 1.0:
        raise DomainError("c_lf = 1 gives an infinite leaf-fall rate")
    arg = np.sin((np.asarray(t, dtype=float) - d_f + psi_f(c_lf)) / S_YEAR) * math.sqrt(2.0) * S_YEAR / c_rf
    return SQRT_2_OVER_PI * (-math.log(1.0 - c_lf) / c_rf) * np.exp(-arg * arg)


def phi_o(t, d_o: float, c_ro: float):
    """Daily labile release rate."""
    arg = np.sin((np.asarray(t, dtype=float) - d_o + ONSET_SHIFT * c_ro) / S_YEAR) * math.sqrt(2.0) * S_YEAR / c_ro
    return SQRT_2_OVER_PI * (ONSET_CONST / c_ro) * np.exp(-arg * arg)


# -- data types ----------------------------------------------------------------


@dataclass(frozen=True)
class DalecParams:
    f_lab: float
    f_f: float
    d_o: float
    d_f: float
    c_eff: float
    c_lf: float
    c_ro: float
    c_rf: float
    omega_f: float
    omega_lab: float

    def __post_init__(self):
        for f, (lo, hi) in zip(fields(self), PRIOR_BOX):
            v = getattr(self, f.name)
            if not lo <= v <= hi:
                raise DomainError(f"{f.name}={v} outside [{lo}, {hi}]")

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, theta) -> "DalecParams":
        return cls(*(float(v) for v in theta))


PARAM_NAMES = ("f_lab", "f_f", "d_o", "d_f", "c_eff", "c_lf", "c_ro", "c_rf", "omega_f", "omega_lab")
PRIOR_BOX = ((0.01, 0.5), (0.01, 0.5), (1.0, 365.0), (1.0, 365.0), (10.0, 100.0),
             (0.125, 1.0), (10.0, 100.0), (20.0, 150.0), (0.0, 1.0), (0.0, 1.0))

# used for synthetic experiments: spring onset near day 130, leaf fall near day 270
DEFAULT_TRUTH = DalecParams(f_lab=0.25, f_f=0.2, d_o=130.0, d_f=270.0, c_eff=40.0, c_lf=0.8,
                            c_ro=40.0, c_rf=60.0, omega_f=0.05, omega_lab=0.05)


@dataclass(frozen=True)
class DalecState:
    c_f: float
    c_lab: float

    def __post_init__(self):
        if not (self.c_f > 0 and self.c_lab > 0):
            raise DomainError(f"carbon pools must be positive, got ({self.c_f}, {self.c_lab})")


@dataclass(frozen=True)
class DriverDay:
    tmin: float
    tmax: float
    swrad: float
    co2: float


@dataclass
class DriverSeries:
    dates: np.ndarray  # datetime64[D], consecutive days
    tmin: np.ndarray
    tmax: np.ndarray
    swrad: np.ndarray
    co2: np.ndarray

    def __post_init__(self):
        n = len(self.dates)
        for name in ("tmin", "tmax", "swrad", "co2"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} has length {arr.size}, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains missing values")
            setattr(self, name, arr)
        if n and np.any(np.diff(self.dates.astype("datetime64[D]").astype(np.int64)) != 1):
            raise ValueError("driver dates must be consecutive days")
        bad = np.nonzero(self.tmin > self.tmax)[0]
        if bad.size:
            raise ValueError(f"tmin > tmax on {self.dates[bad[0]]}")
        if np.any(self.swrad < 0):
            raise DomainError("negative shortwave radiation")

    def __len__(self) -> int:
        return len(self.dates)

    def day(self, t: int) -> DriverDay:
        i = t - 1
        return DriverDay(self.tmin[i], self.tmax[i], self.swrad[i], self.co2[i])

    def day_of_year(self) -> np.ndarray:
        """Continuing day of year for t = 1..T."""
        first = self.dates[0].astype(object)
        doy0 = first.timetuple().tm_yday
        return doy0 + np.arange(len(self), dtype=float)

    def index_of(self, date) -> int:
        return int((np.datetime64(date, "D") - self.dates[0]).astype(int)) + 1

    def slice(self, n_days: int) -> "DriverSeries":
        return DriverSeries(self.dates[:n_days], self.tmin[:n_days], self.tmax[:n_days],
                            self.swrad[:n_days], self.co2[:n_days])


@dataclass
class LaiSeries:
    indices: np.ndarray  # day numbers t (1-based)
    values: np.ndarray
    sd: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values differ in length")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("LAI indices must be strictly increasing")
        if np.any(self.values <= 0):
            raise DomainError("LAI values must be positive")

    def __len__(self) -> int:
        return self.indices.size

    def split(self, last_fit_day: int) -> tuple["LaiSeries", "LaiSeries"]:
        m = self.indices <= last_fit_day
        sd = self.sd
        return (LaiSeries(self.indices[m], self.values[m], None if sd is None else sd[m]),
                LaiSeries(self.indices[~m], self.values[~m], None if sd is None else sd[~m]))


# -- process pieces ------------------------------------------------------------


def gpp(day: DriverDay, c_lma: float = C_LMA, c_eff: float = 40.0) -> float:
    """Simplified canopy photosynthesis (gC m^-2 day^-1).

    Saturating in radiation and CO2, logistic in mean temperature, linear in
    canopy efficiency and scaled by the reference leaf mass per area over c_lma.
    This is a stand-in for the full aggregated canopy model.
    """
    if day.swrad < 0:
        raise DomainError("negative shortwave radiation")
    return c_eff * _gpp_base(day.tmin, day.tmax, day.swrad, day.co2, c_lma)


def _gpp_base(tmin, tmax, swrad, co2, c_lma):
    tmean = 0.5 * (np.asarray(tmin) + np.asarray(tmax))
    light = 0.4 * swrad / (swrad + 10.0)
    temp = 1.0 / (1.0 + np.exp(-(tmean - 8.0) / 3.0))
    carbon = co2 / (co2 + 150.0)
    return (C_LMA / c_lma) * light * temp * carbon


def gpp_base_series(drivers: DriverSeries, c_lma: float = C_LMA) -> np.ndarray:
    """GPP per unit c_eff for each day t = 1..T."""
    return np.asarray(_gpp_base(drivers.tmin, drivers.tmax, drivers.swrad, drivers.co2, c_lma), dtype=float)


def _mean_step(c_f, c_lab, g, rf, ro, p: DalecParams):
    return ((1.0 - rf) * c_f + ro * c_lab + g * p.f_f,
            (1.0 - ro) * c_lab + g * p.f_lab)


def step_deterministic(state: DalecState, day: DriverDay, t: float, params: DalecParams,
                       c_lma: float = C_LMA) -> DalecState:
    g = gpp(day, c_lma, params.c_eff)
    rf = float(phi_f(t, params.d_f, params.c_lf, params.c_rf))
    ro = float(phi_o(t, params.d_o, params.c_ro))
    cf, cl = _mean_step(state.c_f, state.c_lab, g, rf, ro, params)
    if not (cf > 0 and cl > 0):
        raise DomainError(f"carbon pools left the positive orthant at t={t}: ({cf}, {cl})")
    return DalecState(cf, cl)


def lai(state: DalecState | float, c_lma: float = C_LMA) -> float:
    c_f = state.c_f if isinstance(state, DalecState) else float(state)
    return c_f / c_lma


def process_log_moments(embedding: Embedding, omega: float) -> tuple[float, float]:
    """(shift, log-variance) applied around the log of the deterministic mean."""
    if Embedding.parse(embedding) is Embedding.BIASED:
        return 0.0, omega * omega
    v = math.log1p(omega * omega)
    return -0.5 * v, v


def obs_log_moments(embedding: Embedding, tau: float) -> tuple[float, float]:
    if Embedding.parse(embedding) is Embedding.BIASED:
        return 0.0, 1.0 / tau
    v = math.log1p(1.0 / tau)
    return -0.5 * v, v


def step_stochastic(embedding, state: DalecState, day: DriverDay, t: float, params: DalecParams,
                    rng: np.random.Generator, c_lma: float = C_LMA) -> DalecState:
    mean = step_deterministic(state, day, t, params, c_lma)
    out = []
    for m, om in ((mean.c_f, params.omega_f), (mean.c_lab, params.omega_lab)):
        shift, v = process_log_moments(embedding, om)
        out.append(m * math.exp(shift + math.sqrt(v) * rng.standard_normal()))
    return DalecState(*out)


def observe_lai(embedding, state: DalecState, rng: np.random.Generator, tau: float | None = None,
                c_lma: float = C_LMA) -> float:
    emb = Embedding.parse(embedding)
    tau = emb.default_tau if tau is None else tau
    shift, v = obs_log_moments(emb, tau)
    return lai(state, c_lma) * math.exp(shift + math.sqrt(v) * rng.standard_normal())


# -- ingestion -----------------------------------------------------------------


def _read_csv(path, required: tuple[str, ...]):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise ValueError(f"{path}:1: missing column(s) {', '.join(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            rows.append((lineno, row))
    return path, rows


def _num(path, lineno, text):
    text = (text or "").strip()
    if text == "" or text.upper() == "NA":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: not a number: {text!r}") from None


def _date(path, lineno, text):
    try:
        return np.datetime64(dt.date.fromisoformat(text.strip()), "D")
    except (ValueError, AttributeError):
        raise ValueError(f"{path}:{lineno}: bad date {text!r}") from None


def interpolate_gaps(values, label: str = "series") -> np.ndarray:
    """Piecewise-linear fill of interior NaNs; a gap touching either end is an error."""
    v = np.asarray(values, dtype=float).copy()
    miss = np.isnan(v)
    if not miss.any():
        return v
    if miss[0] or miss[-1]:
        raise ValueError(f"{label}: gap at the start or end of the record cannot be interpolated")
    idx = np.arange(v.size)
    v[miss] = np.interp(idx[miss], idx[~miss], v[~miss])
    return v


def _daily(path, rows, columns, dates):
    """Place per-date columns on the full daily grid, NaN where absent."""
    start = dates[0]
    out = {c: np.full(len(dates), np.nan) for c in columns}
    for lineno, row in rows:
        d = _date(path, lineno, row["date"])
        i = int((d - start).astype(int))
        if 0 <= i < len(dates):
            for c in columns:
                out[c][i] = _num(path, lineno, row[c])
    return out


def ingest_drivers(temps_csv, swrad_csv, co2_csv, start=None, end=None) -> DriverSeries:
    """Daily drivers from file extracts: temps.csv (date,tmin,tmax), swrad.csv (date,swrad), co2.csv (year,month,ppm).

    The day range defaults to the span of the temperature file. Missing days or
    blank values are filled by linear interpolation; monthly CO2 is assigned
    to every day of its month.
    """
    tpath, trows = _read_csv(temps_csv, ("date", "tmin", "tmax"))
    spath, srows = _read_csv(swrad_csv, ("date", "swrad"))
    cpath, crows = _read_csv(co2_csv, ("year", "month", "ppm"))
    tdates = [_date(tpath, ln, r["date"]) for ln, r in trows]
    if not tdates:
        raise ValueError(f"{tpath}: no rows")
    first = np.datetime64(start, "D") if start is not None else min(tdates)
    last = np.datetime64(end, "D") if end is not None else max(tdates)
    dates = np.arange(first, last + np.timedelta64(1, "D"), dtype="datetime64[D]")
    temps = _daily(tpath, trows, ("tmin", "tmax"), dates)
    rad = _daily(spath, srows, ("swrad",), dates)
    monthly = {}
    for ln, r in crows:
        try:
            key = (int(r["year"]), int(r["month"]))
        except ValueError:
            raise ValueError(f"{cpath}:{ln}: bad year/month") from None
        monthly[key] = _num(cpath, ln, r["ppm"])
    co2 = np.empty(len(dates))
    for i, d in enumerate(dates.astype(object)):
        if (d.year, d.month) not in monthly:
            raise ValueError(f"{cpath}: no CO2 value for {d.year}-{d.month:02d}")
        co2[i] = monthly[(d.year, d.month)]
    return DriverSeries(dates,
                        interpolate_gaps(temps["tmin"], f"{tpath} tmin"),
                        interpolate_gaps(temps["tmax"], f"{tpath} tmax"),
                        interpolate_gaps(rad["swrad"], f"{spath} swrad"),
                        interpolate_gaps(co2, f"{cpath} ppm"))


def read_lai(path, drivers: DriverSeries) -> LaiSeries:
    """LAI csv (date, lai[, lai_sd]) mapped onto driver day numbers; rows outside the driver span are dropped."""
    path, rows = _read_csv(path, ("date", "lai"))
    idx, vals, sds = [], [], []
    for ln, r in rows:
        t = drivers.index_of(_date(path, ln, r["date"]))
        v = _num(path, ln, r["lai"])
        if not 1 <= t <= len(drivers) or math.isnan(v):
            continue
        if v <= 0:
            raise ValueError(f"{path}:{ln}: LAI must be positive")
        idx.append(t)
        vals.append(v)
        sds.append(_num(path, ln, r.get("lai_sd")))
    sd = np.array(sds) if any(not math.isnan(s) for s in sds) else None
    return LaiSeries(np.array(idx), np.array(vals), sd)


def write_drivers(drivers: DriverSeries, out_dir) -> None:
    """Write drivers in the ingestion schemas (monthly CO2 taken from the first day of each month present)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    days = [str(d) for d in drivers.dates]
    with open(out / "temps.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "tmin", "tmax"])
        w.writerows(zip(days, (f"{v:.6g}" for v in drivers.tmin), (f"{v:.6g}" for v in drivers.tmax)))
    with open(out / "swrad.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "swrad"])
        w.writerows(zip(days, (f"{v:.6g}" for v in drivers.swrad)))
    seen = {}
    for d, c in zip(drivers.dates.astype(object), drivers.co2):
        seen.setdefault((d.year, d.month), c)
    with open(out / "co2.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "month", "ppm"])
        w.writerows((y, m, f"{c:.6g}") for (y, m), c in seen.items())


def write_lai(series: LaiSeries, drivers: DriverSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "lai"])
        for t, v in zip(series.indices, series.values):
            w.writerow([str(drivers.dates[t - 1]), f"{v:.9g}"])


def synthetic_drivers(start: str, n_days: int, rng: np.random.Generator) -> DriverSeries:
    """Seasonal mid-latitude weather: sinusoidal temperature and radiation with daily noise, monthly CO2."""
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(start, "D") + n_days, dtype="datetime64[D]")
    doy = np.array([d.timetuple().tm_yday for d in dates.astype(object)], dtype=float)
    season = np.sin(2 * np.pi * (doy - 110.0) / 365.25)
    tmean = 5.0 + 15.0 * season + rng.normal(0.0, 3.0, n_days)
    span = 10.0 + rng.gamma(4.0, 0.5, n_days)
    rad = np.clip(14.0 + 10.0 * season + rng.normal(0.0, 4.0, n_days), 0.5, None)
    months = np.array([(d.year - 2019) * 12 + d.month for d in dates.astype(object)], dtype=float)
    co2 = 410.0 + 2.4 * months / 12.0 + 3.0 * np.cos(2 * np.pi * (months - 5.0) / 12.0)
    return DriverSeries(dates, tmean - span / 2, tmean + span / 2, rad, co2)


# -- simulation ----------------------------------------------------------------


@dataclass(frozen=True)
class DalecSetup:
    """Everything besides the 10 parameters that a DALEC filter needs."""

    embedding: Embedding = Embedding.MOMENT_MATCHED
    tau: float | None = None
    c_lma: float = C_LMA
    c0: tuple[float, float] = (150.0, 60.0)
    init_cv: float = 0.2

    @property
    def obs_tau(self) -> float:
        return Embedding.parse(self.embedding).default_tau if self.tau is None else self.tau


def simulate_dalec(setup: DalecSetup, params: DalecParams, drivers: DriverSeries, rng: np.random.Generator,
                   obs_every: int = 4, first_obs: int = 1) -> tuple[np.ndarray, LaiSeries]:
    """Simulate pools for t = 0..T and LAI at every ``obs_every`` days; returns ((T+1, 2) states, LAI)."""
    emb = Embedding.parse(setup.embedding)
    T = len(drivers)
    theta = params.to_array()
    v0 = math.log1p(setup.init_cv**2)
    c = np.array(setup.c0, dtype=float) * np.exp(-0.5 * v0 + math.sqrt(v0) * rng.standard_normal(2))
    states = np.empty((T + 1, 2))
    states[0] = c
    base = gpp_base_series(drivers, setup.c_lma)
    doy = drivers.day_of_year()
    rf = phi_f(doy, params.d_f, params.c_lf, params.c_rf)
    ro = phi_o(doy, params.d_o, params.c_ro)
    for t in range(1, T + 1):
        g = theta[4] * base[t - 1]
        m = _mean_step(c[0], c[1], g, rf[t - 1], ro[t - 1], params)
        for k, om in enumerate((params.omega_f, params.omega_lab)):
            if not m[k] > 0:
                raise DomainError(f"carbon pools left the positive orthant at t={t}")
            shift, v = process_log_moments(emb, om)
            c[k] = m[k] * math.exp(shift + math.sqrt(v) * rng.standard_normal())
        states[t] = c
    idx = np.arange(first_obs, T + 1, obs_every)
    shift, v = obs_log_moments(emb, setup.obs_tau)
    y = states[idx, 0] / setup.c_lma * np.exp(shift + math.sqrt(v) * rng.standard_normal(idx.size))
    return states, LaiSeries(idx, y)


# -- particle filter -----------------------------------------------------------


@njit(cache=True)
def _dalec_filter(theta, base, rf, ro, has_obs, logy, obs_shift, obs_var, lai_scale,
                  proc_mm, lc0, init_var, z, u, keep_path, path_out, means_out):
    """Bootstrap filter on the two carbon pools. Returns (loglik, fail_t); fail_t = -1 on success, loglik is NaN on a positivity failure."""
    T = base.size
    n = z.shape[1]
    g_f = theta[1]
    g_lab = theta[0]
    c_eff = theta[4]
    shift = np.zeros(2)
    sd = np.zeros(2)
    for k in range(2):
        om2 = theta[8 + k] * theta[8 + k]
        if proc_mm:
            v = math.log1p(om2)
            shift[k] = -0.5 * v
        else:
            v = om2
        sd[k] = math.sqrt(v)
    cf = np.empty(n)
    cl = np.empty(n)
    lw = np.empty(n)
    tmpf = np.empty(n)
    tmpl = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    s0 = math.sqrt(init_var)
    for i in range(n):
        cf[i] = math.exp(lc0[0] - 0.5 * init_var + s0 * z[0, i, 0])
        cl[i] = math.exp(lc0[1] - 0.5 * init_var + s0 * z[0, i, 1])
    if keep_path:
        hist = np.empty((T + 1, n, 2))
        anc = np.empty((T + 1, n), dtype=np.int64)
        for i in range(n):
            hist[0, i, 0] = cf[i]
            hist[0, i, 1] = cl[i]
            anc[0, i] = i
    else:
        hist = np.empty((1, 1, 2))
        anc = np.empty((1, 1), dtype=np.int64)
    mf = 0.0
    ml = 0.0
    for i in range(n):
        mf += cf[i]
        ml += cl[i]
    means_out[0, 0] = mf / n
    means_out[0, 1] = ml / n
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    loglik = 0.0
    for t in range(1, T + 1):
        g = c_eff * base[t - 1]
        a_f = 1.0 - rf[t - 1]
        o = ro[t - 1]
        for i in range(n):
            m_f = a_f * cf[i] + o * cl[i] + g * g_f
            m_l = (1.0 - o) * cl[i] + g * g_lab
            if not (m_f > 0.0 and m_l > 0.0):
                return math.nan, t
            cf[i] = m_f * math.exp(shift[0] + sd[0] * z[t, i, 0])
            cl[i] = m_l * math.exp(shift[1] + sd[1] * z[t, i, 1])
        if has_obs[t]:
            mx = -math.inf
            for i in range(n):
                r = logy[t] - (math.log(cf[i] * lai_scale) + obs_shift)
                lw[i] = -0.5 * r * r / obs_var - 0.5 * math.log(obs_var) - half_log_2pi - logy[t]
                if lw[i] > mx:
                    mx = lw[i]
            if not math.isfinite(mx):
                return -math.inf, t
            tot = 0.0
            for i in range(n):
                lw[i] = math.exp(lw[i] - mx)
                tot += lw[i]
            loglik += mx + math.log(tot / n)
            mf = 0.0
            ml = 0.0
            for i in range(n):
                lw[i] /= tot
                mf += lw[i] * cf[i]
                ml += lw[i] * cl[i]
            means_out[t, 0] = mf
            means_out[t, 1] = ml
            # systematic resampling with offset u[t]
            cum = lw[0]
            j = 0
            for i in range(n):
                pos = (u[t] + i) / n
                while cum <= pos and j < n - 1:
                    j += 1
                    cum += lw[j]
                idx[i] = j
            for i in range(n):
                tmpf[i] = cf[idx[i]]
                tmpl[i] = cl[idx[i]]
            for i in range(n):
                cf[i] = tmpf[i]
                cl[i] = tmpl[i]
                if keep_path:
                    anc[t, i] = idx[i]
        else:
            mf = 0.0
            ml = 0.0
            for i in range(n):
                mf += cf[i]
                ml += cl[i]
            means_out[t, 0] = mf / n
            means_out[t, 1] = ml / n
            if keep_path:
                for i in range(n):
                    anc[t, i] = i
        if keep_path:
            for i in range(n):
                hist[t, i, 0] = cf[i]
                hist[t, i, 1] = cl[i]
    if keep_path:
        j = min(int(u[T + 1] * n), n - 1)
        for t in range(T, -1, -1):
            path_out[t, 0] = hist[t, j, 0]
            path_out[t, 1] = hist[t, j, 1]
            j = anc[t, j]
    return loglik, -1


class _NumpyDalec:
    """Vectorised filter model for one parameter vector (reference implementation)."""

    state_dim = 2

    def __init__(self, pm: "DalecModel", theta):
        self.pm = pm
        self.theta = np.asarray(theta, dtype=float)
        p = DalecParams.from_array(theta)
        self.rf, self.ro = pm._rates(p)
        emb = pm.setup.embedding
        self.proc = [process_log_moments(emb, om) for om in (p.omega_f, p.omega_lab)]
        self.obs_shift, self.obs_var = obs_log_moments(emb, pm.setup.obs_tau)

    def initial(self, z):
        v0 = self.pm.init_var
        return np.exp(self.pm.lc0 - 0.5 * v0 + math.sqrt(v0) * z)

    def transition(self, x, t, z):
        th = self.theta
        g = th[4] * self.pm.base[t - 1]
        o = self.ro[t - 1]
        m_f = (1.0 - self.rf[t - 1]) * x[:, 0] + o * x[:, 1] + g * th[1]
        m_l = (1.0 - o) * x[:, 1] + g * th[0]
        if np.any(m_f <= 0) or np.any(m_l <= 0):
            raise DomainError(f"carbon pools left the positive orthant at t={t}")
        out = np.empty_like(x)
        for k, m in enumerate((m_f, m_l)):
            shift, v = self.proc[k]
            out[:, k] = m * np.exp(shift + math.sqrt(v) * z[:, k])
        return out

    def obs_logpdf(self, y, x, t):
        ly = math.log(y)
        r = ly - (np.log(x[:, 0] / self.pm.setup.c_lma) + self.obs_shift)
        return -0.5 * r * r / self.obs_var - 0.5 * math.log(2 * math.pi * self.obs_var) - ly


class DalecModel:
    """Ten-parameter DALEC family for particle MCMC on a fixed driver record."""

    names = PARAM_NAMES
    state_names = ("c_f", "c_lab")
    lower = np.array([b[0] for b in PRIOR_BOX])
    upper = np.array([b[1] for b in PRIOR_BOX])

    def __init__(self, drivers: DriverSeries, setup: DalecSetup = DalecSetup()):
        self.drivers = drivers
        self.setup = DalecSetup(Embedding.parse(setup.embedding), setup.tau, setup.c_lma, setup.c0, setup.init_cv)
        self.base = gpp_base_series(drivers, setup.c_lma)
        self.doy = drivers.day_of_year()
        self.lc0 = np.log(np.asarray(setup.c0, dtype=float))
        self.init_var = math.log1p(setup.init_cv**2)
        self.kind = f"DALEC-{self.setup.embedding.value}"

    def _rates(self, p: DalecParams):
        if p.c_lf >= 1.0:
            raise DomainError("c_lf = 1 gives an infinite leaf-fall rate")
        return phi_f(self.doy, p.d_f, p.c_lf, p.c_rf), phi_o(self.doy, p.d_o, p.c_ro)

    def build(self, theta) -> _NumpyDalec:
        return _NumpyDalec(self, theta)

    def _obs_arrays(self, obs, T):
        has = np.zeros(T + 1, dtype=np.bool_)
        logy = np.zeros(T + 1)
        keep = obs.indices <= T
        has[obs.indices[keep]] = True
        logy[obs.indices[keep]] = np.log(obs.values[keep])
        return has, logy

    def filter(self, theta, obs, n_particles, rng=None, T=None, noise=None, keep_path=False) -> FilterResult:
        """Compiled filter; consumes the same noise layout as the generic bootstrap filter."""
        T = len(self.drivers) if T is None else T
        if noise is None:
            noise = FilterNoise.draw(rng, T, n_particles, 2)
        theta = np.asarray(theta, dtype=float)
        p = DalecParams.from_array(theta)
        rf, ro = self._rates(p)
        has, logy = self._obs_arrays(obs, T)
        obs_shift, obs_var = obs_log_moments(self.setup.embedding, self.setup.obs_tau)
        path = np.empty((T + 1, 2))
        means = np.zeros((T + 1, 2))
        ll, fail = _dalec_filter(theta, self.base[:T], rf[:T], ro[:T], has, logy, obs_shift, obs_var,
                                 1.0 / self.setup.c_lma, self.setup.embedding is Embedding.MOMENT_MATCHED,
                                 self.lc0, self.init_var, noise.z, noise.u, keep_path, path, means)
        if fail >= 0:
            if math.isnan(ll):
                raise DomainError(f"carbon pools left the positive orthant at t={fail}")
            raise ParticleDegeneracyError(int(fail))
        return FilterResult(float(ll), means, path if keep_path else None)


# -- prediction ----------------------------------------------------------------


def predict_lai(model: DalecModel, params: np.ndarray, states_at_origin: np.ndarray, origin: int,
                days: np.ndarray, rng: np.random.Generator, max_draws: int | None = None) -> np.ndarray:
    """Posterior predictive LAI at ``days`` (all > origin) from per-draw parameters and origin states.

    Returns an (n_draws, len(days)) array; draws that leave the positive
    orthant are dropped.
    """
    days = np.asarray(days, dtype=np.int64)
    if days.size and days.min() <= origin:
        raise ValueError("prediction days must lie after the origin")
    n = params.shape[0]
    sel = np.arange(n)
    if max_draws is not None and n > max_draws:
        sel = np.linspace(0, n - 1, max_draws).round().astype(int)
    horizon = int(days.max()) if days.size else origin
    emb = model.setup.embedding
    obs_shift, obs_var = obs_log_moments(emb, model.setup.obs_tau)
    out = []
    for j in sel:
        p = DalecParams.from_array(params[j])
        rf, ro = model._rates(p)
        c = np.array(states_at_origin[j], dtype=float)
        proc = [process_log_moments(emb, om) for om in (p.omega_f, p.omega_lab)]
        row = []
        z = rng.standard_normal((horizon - origin, 2))
        e = rng.standard_normal(days.size)
        ok = True
        want = {int(d): k for k, d in enumerate(days)}
        for t in range(origin + 1, horizon + 1):
            g = p.c_eff * model.base[t - 1]
            m = _mean_step(c[0], c[1], g, rf[t - 1], ro[t - 1], p)
            if not (m[0] > 0 and m[1] > 0):
                ok = False
                break
            for k in range(2):
                c[k] = m[k] * math.exp(proc[k][0] + math.sqrt(proc[k][1]) * z[t - origin - 1, k])
            if t in want:
                row.append(c[0] / model.setup.c_lma * math.exp(obs_shift + math.sqrt(obs_var) * e[want[t]]))
        if ok:
            out.append(row)
    if not out:
        raise NumericError("every predictive draw left the positive orthant")
    return np.asarray(out, dtype=float)


def write_ensemble_csv(path, dates, ensemble: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "draw_id", "lai"])
        for k, d in enumerate(dates):
            for i in range(ensemble.shape[0]):
                w.writerow([str(d), i, f"{ensemble[i, k]:.9g}"])


def write_scores_csv(path, dates, crps, ign) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "crps", "ign"])
        for d, c, g in zip(dates, crps, ign):
            w.writerow([str(d), f"{c:.9g}", f"{g:.9g}"])


# -- experiment driver ---------------------------------------------------------

DESK_PMCMC = dict(n_iter=5000, n_burn=2500, n_particles=200, adapt_start_accepts=100)
PAPER_PMCMC = dict(n_iter=100_000, n_burn=50_000, n_particles=500, adapt_start_accepts=1000)
EXPERIMENT_KEYS = {"embeddings", "generator", "start", "n_days", "fit_days", "obs_every", "truth", "c0",
                   "init_cv", "tau", "pmcmc", "init_budget", "init_particles", "init_refine",
                   "max_pred_draws"}


@dataclass
class FitOutcome:
    embedding: Embedding
    posterior: object  # PosteriorSamples
    init: np.ndarray
    pred_days: np.ndarray
    ensemble: np.ndarray
    crps: np.ndarray
    ign: np.ndarray


def fit_and_predict(model: DalecModel, fit_obs: LaiSeries, held: LaiSeries, fit_days: int, pcfg,
                    rng: np.random.Generator, init_budget: int = 200, init_particles: int = 100,
                    init_refine: int = 3, max_pred_draws: int | None = 1000,
                    refine_evals: int = 400) -> FitOutcome:
    """Multi-start initialisation, particle MCMC on days 1..fit_days, then scores on the held-out LAI."""
    from .scoring import crps_sample, ign_sample
    from .smc import init_search, pmcmc_run

    init, _ = init_search(model, fit_obs, init_budget, rng, n_particles=init_particles, T=fit_days,
                          n_refine=init_refine, refine_evals=refine_evals)
    post = pmcmc_run(model, fit_obs, pcfg, init=init, T=fit_days)
    days = held.indices
    ens = predict_lai(model, post.params, post.states[:, fit_days, :], fit_days, days, rng, max_pred_draws)
    crps = np.array([crps_sample(ens[:, k], y) for k, y in enumerate(held.values)])
    ign = np.array([ign_sample(ens[:, k], y) for k, y in enumerate(held.values)])
    return FitOutcome(model.setup.embedding, post, init, days, ens, crps, ign)


def hpd_coverage(posterior, truth: DalecParams, level: float = 0.95) -> dict[str, bool]:
    from .scoring import hpd_interval

    out = {}
    for j, name in enumerate(PARAM_NAMES):
        lo, hi = hpd_interval(posterior.params[:, j], level)
        out[name] = bool(lo <= getattr(truth, name) <= hi)
    return out


def run_dalec_experiment(cfg: dict, preset: str, seed: int, out_dir, drivers_dir=None, lai_path=None) -> dict:
    """Fit one or both embeddings to file-based or synthetic LAI and score the held-out window."""
    from .smc import PmcmcConfig

    unknown = set(cfg) - EXPERIMENT_KEYS
    if unknown:
        raise ValueError(f"dalec config: unknown key(s) {', '.join(sorted(unknown))}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    r_data, r_fit = (np.random.default_rng(s) for s in ss.spawn(2))
    c0 = tuple(cfg.get("c0", (150.0, 60.0)))
    init_cv = float(cfg.get("init_cv", 0.2))
    truth = None
    if drivers_dir is not None:
        d = Path(drivers_dir)
        drivers = ingest_drivers(d / "temps.csv", d / "swrad.csv", d / "co2.csv")
    else:
        drivers = synthetic_drivers(cfg.get("start", "2019-09-05"), int(cfg.get("n_days", 881)), r_data)
    if lai_path is not None:
        lai_all = read_lai(lai_path, drivers)
    else:
        truth = DalecParams(**{**asdict_params(DEFAULT_TRUTH), **cfg.get("truth", {})})
        gen = DalecSetup(Embedding.parse(cfg.get("generator", "mm")), cfg.get("tau"), C_LMA, c0, init_cv)
        _, lai_all = simulate_dalec(gen, truth, drivers, r_data, obs_every=int(cfg.get("obs_every", 4)))
        write_drivers(drivers, out / "drivers")
        write_lai(lai_all, drivers, out / "lai.csv")
    fit_days = int(cfg.get("fit_days", len(drivers) - 151))
    fit_obs, held = lai_all.split(fit_days)
    if len(held) == 0:
        raise ValueError("no LAI observations after the fit window")
    base = PAPER_PMCMC if preset == "paper" else DESK_PMCMC
    embeddings = cfg.get("embeddings", ["mm", "biased"])
    outputs, summary = [], {"fit_days": fit_days, "n_days": len(drivers), "held_out_points": len(held),
                            "embeddings": {}}
    for name in embeddings:
        emb = Embedding.parse(name)
        setup = DalecSetup(emb, cfg.get("tau"), C_LMA, c0, init_cv)
        model = DalecModel(drivers, setup)
        pcfg = PmcmcConfig(**{**base, **cfg.get("pmcmc", {}), "seed": int(r_fit.integers(2**31))})
        res = fit_and_predict(model, fit_obs, held, fit_days, pcfg, r_fit,
                              init_budget=int(cfg.get("init_budget", 200)),
                              init_particles=int(cfg.get("init_particles", 100)),
                              init_refine=int(cfg.get("init_refine", 3)),
                              max_pred_draws=cfg.get("max_pred_draws", 1000))
        sub = out / emb.value
        res.posterior.write(sub / "posterior")
        dates = drivers.dates[res.pred_days - 1]
        write_ensemble_csv(sub / "ensemble.csv", dates, res.ensemble)
        write_scores_csv(sub / "scores.csv", dates, res.crps, res.ign)
        outputs += [f"{emb.value}/posterior/samples.csv", f"{emb.value}/ensemble.csv", f"{emb.value}/scores.csv"]
        info = {"mean_crps": float(res.crps.mean()), "mean_ign": float(res.ign.mean()),
                "acceptance": res.posterior.diagnostics["acceptance"], "seed": pcfg.seed}
        if truth is not None:
            info["hpd_covers_truth"] = hpd_coverage(res.posterior, truth)
        summary["embeddings"][emb.value] = info
    return {"outputs": outputs, "summary": summary}


def asdict_params(p: DalecParams) -> dict:
    return {f.name: getattr(p, f.name) for f in fields(p)}
