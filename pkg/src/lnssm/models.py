"""The six benchmark lognormal state space models.

Gompertz and MoranRicker are the classical biased models: the deterministic
map sets the conditional *median*. LGC/LMRC/LGD/LMRD are moment matched: the
map sets the conditional *mean*, with either a constant natural-scale
variance (C) or a variance proportional to the squared mean (D).

All six share the observation map g*(x) = x.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dist import (
    LOG_2PI,
    DomainError,
    LogNormalParams,
    MomentPair,
    lognormal_sample,
    mm_transform,
)

EXP_LIMIT = 700.0


class NumericError(ArithmeticError):
    """Overflow or non-finite value inside a model computation."""


class ModelKind(enum.IntEnum):
    Gompertz = 0
    MoranRicker = 1
    LGC = 2
    LMRC = 3
    LGD = 4
    LMRD = 5

    @property
    def is_gompertz_map(self) -> bool:
        return self in (ModelKind.Gompertz, ModelKind.LGC, ModelKind.LGD)

    @property
    def is_biased(self) -> bool:
        return self in (ModelKind.Gompertz, ModelKind.MoranRicker)

    @property
    def is_constant_variance(self) -> bool:
        return self in (ModelKind.LGC, ModelKind.LMRC)

    @classmethod
    def parse(cls, name: "str | ModelKind") -> "ModelKind":
        if isinstance(name, ModelKind):
            return name
        aliases = {"gomp": "Gompertz", "mr": "MoranRicker", "moran-ricker": "MoranRicker"}
        key = aliases.get(name.lower(), name)
        for kind in cls:
            if kind.name.lower() == key.lower():
                return kind
        raise ValueError(f"unknown model kind {name!r}")


@dataclass(frozen=True)
class ModelParams:
    a: float
    b: float
    proc_prec: float
    obs_prec: float
    obs_prec_fixed: bool = False

    def __post_init__(self):
        if not self.proc_prec > 0:
            raise DomainError(f"process precision must be positive, got {self.proc_prec}")
        if not self.obs_prec > 0:
            raise DomainError(f"observation precision must be positive, got {self.obs_prec}")

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


@dataclass
class Trajectory:
    """Latent path X_1..X_T on the natural scale plus the initial value X_0."""

    values: np.ndarray
    t0_value: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("trajectory must be a non-empty 1-D sequence")
        if not (np.all(self.values > 0) and self.t0_value > 0):
            raise DomainError("trajectory values must be strictly positive")

    @property
    def T(self) -> int:
        return self.values.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x"])
            w.writerow([0, repr(float(self.t0_value))])
            for t, x in enumerate(self.values, start=1):
                w.writerow([t, repr(float(x))])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        rows = _read_two_column(path, ("t", "x"))
        ts = [int(r[0]) for r in rows]
        xs = [float(r[1]) for r in rows]
        if ts[0] != 0 or ts != list(range(len(ts))):
            raise ValueError(f"{path}: expected consecutive t starting at 0")
        return cls(np.array(xs[1:]), xs[0])


@dataclass
class ObservationSeries:
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ValueError("indices and values must be aligned 1-D sequences")
        if self.indices.size and (self.indices[0] < 1 or np.any(np.diff(self.indices) <= 0)):
            raise ValueError("observation indices must be strictly increasing and >= 1")
        if not np.all(self.values > 0):
            raise DomainError("observations must be strictly positive")

    def __len__(self) -> int:
        return self.indices.size

    def truncate(self, last_index: int) -> "ObservationSeries":
        keep = self.indices <= last_index
        return ObservationSeries(self.indices[keep], self.values[keep])

    def window(self, first: int, last: int) -> "ObservationSeries":
        keep = (self.indices >= first) & (self.indices <= last)
        return ObservationSeries(self.indices[keep], self.values[keep])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "y"])
            for t, y in zip(self.indices, self.values):
                w.writerow([int(t), repr(float(y))])

    @classmethod
    def from_csv(cls, path) -> "ObservationSeries":
        rows = _read_two_column(path, ("t", "y"))
        return cls(np.array([int(r[0]) for r in rows]), np.array([float(r[1]) for r in rows]))


def _read_two_column(path, header: tuple[str, str]) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or [h.strip() for h in head] != list(header):
            raise ValueError(f"{path}: expected header {','.join(header)}, got {head}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _checked_exp(arg: float, what: str) -> float:
    if arg > EXP_LIMIT:
        raise NumericError(f"{what}: exp argument {arg:.4g} exceeds {EXP_LIMIT}")
    return math.exp(arg)


def process_mean(kind: ModelKind, x_prev: float, params: ModelParams) -> float:
    """Deterministic map f*(x_prev)."""
    if not x_prev > 0:
        raise DomainError(f"x_prev must be positive, got {x_prev}")
    kind = ModelKind(kind)
    if kind.is_gompertz_map:
        arg = params.a + (params.b + 1.0) * math.log(x_prev)
    else:
        arg = params.a + params.b * x_prev + math.log(x_prev)
    return _checked_exp(arg, f"{kind.name} process mean at x={x_prev:.4g}")


def mm_law(mean: float, variance: float) -> LogNormalParams:
    return mm_transform(MomentPair(mean, variance))


def biased_law(median: float, prec: float) -> LogNormalParams:
    return LogNormalParams(math.log(median), prec)


def transition_law(kind: ModelKind, x_prev: float, params: ModelParams) -> LogNormalParams:
    kind = ModelKind(kind)
    f = process_mean(kind, x_prev, params)
    if math.isinf(params.proc_prec):
        return LogNormalParams(math.log(f), math.inf)
    if kind.is_biased:
        return biased_law(f, params.proc_prec)
    if kind.is_constant_variance:
        return mm_law(f, 1.0 / params.proc_prec)
    return mm_law(f, f * f / params.proc_prec)


def observation_law(kind: ModelKind, x: float, params: ModelParams) -> LogNormalParams:
    if not x > 0:
        raise DomainError(f"latent state must be positive, got {x}")
    kind = ModelKind(kind)
    if math.isinf(params.obs_prec):
        return LogNormalParams(math.log(x), math.inf)
    if kind.is_biased:
        return biased_law(x, params.obs_prec)
    if kind.is_constant_variance:
        return mm_law(x, 1.0 / params.obs_prec)
    return mm_law(x, x * x / params.obs_prec)


def _draw(law: LogNormalParams, rng: np.random.Generator) -> float:
    if math.isinf(law.prec_star):
        return math.exp(law.mu_star)
    return float(lognormal_sample(law, rng))


def step(kind: ModelKind, x_prev: float, params: ModelParams, rng: np.random.Generator) -> float:
    return _draw(transition_law(kind, x_prev, params), rng)


def observe(kind: ModelKind, x: float, params: ModelParams, rng: np.random.Generator) -> float:
    return _draw(observation_law(kind, x, params), rng)


def simulate(
    kind: ModelKind,
    params: ModelParams,
    x0: float,
    T: int,
    obs_indices: Sequence[int] | None,
    rng: np.random.Generator,
) -> tuple[Trajectory, ObservationSeries]:
    """Simulate X_1..X_T from ``x0`` and observe at ``obs_indices`` (default: every step)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not x0 > 0:
        raise DomainError(f"x0 must be positive, got {x0}")
    idx = np.arange(1, T + 1) if obs_indices is None else np.asarray(obs_indices, dtype=np.int64)
    if idx.size and (idx[0] < 1 or idx[-1] > T):
        raise ValueError("observation indices must lie in 1..T")
    observed = np.zeros(T + 1, dtype=bool)
    observed[idx] = True
    xs = np.empty(T)
    ys = []
    x = x0
    for t in range(1, T + 1):
        x = step(kind, x, params, rng)
        xs[t - 1] = x
        if observed[t]:
            ys.append(observe(kind, x, params, rng))
    return Trajectory(xs, x0), ObservationSeries(idx, np.array(ys))


# -- log-space moments (vectorised) ------------------------------------------
#
# Every model is evaluated on D = log X: the transition density of D_t given
# D_{t-1} is normal with mean m and variance v below, and likewise for
# F_i = log Y_i given D_i.


def log_process_moments(kind: ModelKind, d_prev, params: ModelParams):
    d_prev = np.asarray(d_prev, dtype=float)
    kind = ModelKind(kind)
    a, b, phi = params.a, params.b, params.proc_prec
    if kind.is_gompertz_map:
        logf = a + (1.0 + b) * d_prev
    else:
        x = np.exp(np.minimum(d_prev, EXP_LIMIT))
        logf = d_prev + a + b * x
        bad = (d_prev > EXP_LIMIT) | (np.abs(a + b * x) > EXP_LIMIT)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise NumericError(f"{kind.name} process mean overflows at step index {i + 1}")
    if kind.is_biased:
        v = np.full_like(logf, 1.0 / phi)
        return logf, v
    if kind.is_constant_variance:
        v = np.log1p(np.exp(-2.0 * logf) / phi)
    else:
        v = np.full_like(logf, math.log1p(1.0 / phi))
    return logf - 0.5 * v, v


def log_observation_moments(kind: ModelKind, d, params: ModelParams):
    d = np.asarray(d, dtype=float)
    kind = ModelKind(kind)
    tau = params.obs_prec
    if kind.is_biased:
        return d, np.full_like(d, 1.0 / tau)
    if kind.is_constant_variance:
        v = np.log1p(np.exp(-2.0 * d) / tau)
    else:
        v = np.full_like(d, math.log1p(1.0 / tau))
    return d - 0.5 * v, v


def _normal_logpdf(x, m, v):
    return -0.5 * (LOG_2PI + np.log(v)) - 0.5 * (x - m) ** 2 / v


def loglik_joint(
    kind: ModelKind, traj: Trajectory, obs: ObservationSeries, params: ModelParams
) -> float:
    """Natural-scale log density of (X_1..X_T, Y_I) given X_0 and the parameters.

    Computed as normal densities on log X and log Y minus the log-Jacobian
    sum(log X_t) + sum(log Y_i), so every model is scored on the same measure.
    """
    if len(obs) and obs.indices[-1] > traj.T:
        raise ValueError("observation index beyond trajectory length")
    d = np.log(traj.values)
    d_prev = np.concatenate(([math.log(traj.t0_value)], d[:-1]))
    m, v = log_process_moments(kind, d_prev, params)
    proc = _normal_logpdf(d, m, v) - d
    f = np.log(obs.values)
    di = d[obs.indices - 1]
    mo, vo = log_observation_moments(kind, di, params)
    ob = _normal_logpdf(f, mo, vo) - f
    for name, terms, where in (("process", proc, np.arange(1, traj.T + 1)), ("observation", ob, obs.indices)):
        bad = ~np.isfinite(terms)
        if np.any(bad):
            raise NumericError(f"non-finite {name} log density at t={int(where[np.flatnonzero(bad)[0]])}")
    return float(proc.sum() + ob.sum())


def fixed_point(kind: ModelKind, params: ModelParams) -> float:
    """Non-trivial fixed point of the deterministic map, x = f*(x)."""
    kind = ModelKind(kind)
    if params.b == 0:
        raise ValueError("map has no isolated fixed point when b == 0")
    if kind.is_gompertz_map:
        return math.exp(-params.a / params.b)
    x = -params.a / params.b
    if not x > 0:
        raise DomainError(f"{kind.name} fixed point {x:.4g} is not positive")
    return x
