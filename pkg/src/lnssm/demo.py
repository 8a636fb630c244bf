"""Toy forecasting systems contrasting lognormal dynamics with their Gaussian moment analogues."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

QUANTILES = (0.025, 0.5, 0.975)


@dataclass(frozen=True)
class DemoConfig:
    sigma2: float = 1.0
    a: float = 0.05
    steps: int = 10
    n_paths: int = 10_000
    starts: tuple[float, ...] = (50.0, 2.0)


def _martingale_log_moments(x, sigma2):
    """Lognormal with mean |x| and variance sigma2."""
    v = np.log1p(sigma2 / (x * x))
    return np.log(np.abs(x)) - 0.5 * v, v


def _decay_log_moments(x, sigma2, a):
    # log-variance read as log((1 + sigma2/|x|)^2)
    ax = np.abs(x)
    return np.log(ax) - a, 2.0 * np.log1p(sigma2 / ax)


def log_moments(system: str, x, cfg: DemoConfig):
    if system == "martingale":
        return _martingale_log_moments(x, cfg.sigma2)
    if system == "decay":
        return _decay_log_moments(x, cfg.sigma2, cfg.a)
    raise ValueError(f"unknown demo system {system!r}")


def simulate_paths(system: str, law: str, x0: float, cfg: DemoConfig, rng: np.random.Generator) -> np.ndarray:
    """(n_paths, steps + 1) trajectories; ``law`` is "lognormal" or its moment-equivalent "gaussian"."""
    x = np.full(cfg.n_paths, float(x0))
    out = np.empty((cfg.n_paths, cfg.steps + 1))
    out[:, 0] = x
    if law not in ("lognormal", "gaussian"):
        raise ValueError(f"unknown law {law!r}")
    for t in range(1, cfg.steps + 1):
        z = rng.standard_normal(cfg.n_paths)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            mu, v = log_moments(system, x, cfg)
            if law == "lognormal":
                # a path that underflows to 0 stays there; an infinite log-variance
                # (x near 0) puts all mass at 0 as well
                nxt = np.exp(mu + np.sqrt(v) * z)
                x = np.where((x > 0) & np.isfinite(nxt), nxt, 0.0)
            elif system == "martingale":
                x = x + math.sqrt(cfg.sigma2) * z
            else:
                mean = np.exp(mu + 0.5 * v)
                var = np.expm1(v) * np.exp(2.0 * mu + v)
                x = mean + np.sqrt(var) * z
        out[:, t] = x
    return out


def fan_chart(paths: np.ndarray) -> np.ndarray:
    """Quantile bands per step, shape (steps + 1, 3); non-finite paths are dropped per step."""
    bands = np.empty((paths.shape[1], len(QUANTILES)))
    for t in range(paths.shape[1]):
        col = paths[:, t]
        bands[t] = np.quantile(col[np.isfinite(col)], QUANTILES)
    return bands


def run_demo(out_dir, rng: np.random.Generator, cfg: DemoConfig = DemoConfig()) -> dict:
    """Write one CSV per (system, start, law) panel; returns {panel name: bands}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = {}
    for system in ("martingale", "decay"):
        for x0 in cfg.starts:
            sample = simulate_paths(system, "lognormal", x0, DemoConfig(cfg.sigma2, cfg.a, cfg.steps, 1), rng)[0]
            for law in ("lognormal", "gaussian"):
                bands = fan_chart(simulate_paths(system, law, x0, cfg, rng))
                name = f"{system}_x0_{x0:g}_{law}"
                panels[name] = bands
                with open(out / f"demo_{name}.csv", "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh)
                    w.writerow(["step", "q025", "q50", "q975", "sample_path"])
                    for t in range(cfg.steps + 1):
                        w.writerow([t, *(f"{v:.9g}" for v in bands[t]), f"{sample[t]:.9g}"])
    return panels
