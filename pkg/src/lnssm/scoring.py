"""Sample-based forecast verification: CRPS, ignorance, HPD intervals, paired tests."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats


class ScoringError(ValueError):
    pass


def crps_sample(ensemble, y: float) -> float:
    """CRPS of an ensemble: mean|X - y| - 0.5 mean|X - X'| over all ordered pairs."""
    x = np.sort(np.asarray(ensemble, dtype=float).ravel())
    m = x.size
    if m < 2:
        raise ScoringError(f"CRPS needs at least 2 ensemble members, got {m}")
    if not np.all(np.isfinite(x)) or not math.isfinite(y):
        raise ScoringError("CRPS inputs must be finite")
    term1 = np.mean(np.abs(x - y))
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - m - 1) x_(i), i = 1..m
    w = 2.0 * np.arange(1, m + 1) - m - 1
    term2 = np.dot(w, x) / (m * m)
    return max(float(term1 - term2), 0.0)


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = np.std(x, ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def ign_sample(ensemble, y: float, bandwidth_rule: Callable[[np.ndarray], float] | float = silverman_bandwidth,
               log_scale: bool = False) -> float:
    """Negative log of a Gaussian kernel density estimate at ``y``.

    With ``log_scale`` the KDE is built on log values and the density is
    mapped back to the natural scale with the 1/y Jacobian.
    """
    x = np.asarray(ensemble, dtype=float).ravel()
    if x.size < 2:
        raise ScoringError(f"IGN needs at least 2 ensemble members, got {x.size}")
    yy = y
    if log_scale:
        if y <= 0 or np.any(x <= 0):
            raise ScoringError("log-scale IGN requires positive values")
        x, yy = np.log(x), math.log(y)
    h = bandwidth_rule(x) if callable(bandwidth_rule) else float(bandwidth_rule)
    if not h > 0:
        raise ScoringError("KDE bandwidth is zero: ensemble has no spread")
    z = (yy - x) / h
    lse = np.logaddexp.reduce(-0.5 * z * z)
    log_f = lse - math.log(x.size * h) - 0.5 * math.log(2 * math.pi)
    if log_scale:
        log_f -= yy
    if not math.isfinite(log_f):
        raise ScoringError(f"predictive density is zero at y={y}")
    return float(-log_f)


def hpd_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval spanning ceil(level * m) sorted samples (lowest start on ties)."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    m = x.size
    if m == 0:
        raise ScoringError("HPD of an empty sample")
    if not 0 < level <= 1:
        raise ScoringError(f"level must lie in (0, 1], got {level}")
    k = min(m, max(1, math.ceil(level * m - 1e-9)))
    widths = x[k - 1:] - x[: m - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def coverage(intervals: Sequence[tuple[float, float]], truth: float) -> float:
    if len(intervals) == 0:
        raise ScoringError("coverage of an empty interval set")
    hits = sum(1 for lo, hi in intervals if lo <= truth <= hi)
    return hits / len(intervals)


@dataclass
class PairedTest:
    name: str
    n: int
    mean_diff: float
    t: float
    p_raw: float
    p_adjusted: float = float("nan")
    significant: bool = False


def holm_adjust(p_values) -> np.ndarray:
    p = np.asarray(p_values, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adj[i] = running
    return adj


def paired_t_holm(pairs: Mapping[str, tuple[Sequence[float], Sequence[float]]],
                  alpha: float = 0.05) -> list[PairedTest]:
    """Paired two-sided t-tests (before - after) with Holm step-down adjustment across the family."""
    results = []
    for name, (before, after) in pairs.items():
        a = np.asarray(before, dtype=float)
        b = np.asarray(after, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ScoringError(f"{name}: paired samples must be aligned 1-D vectors")
        if a.size < 2:
            raise ScoringError(f"{name}: need at least 2 pairs")
        d = a - b
        sd = np.std(d, ddof=1)
        if sd == 0:
            raise ScoringError(f"{name}: differences have zero variance")
        t = float(np.mean(d) / (sd / math.sqrt(d.size)))
        p = float(2.0 * stats.t.sf(abs(t), d.size - 1))
        results.append(PairedTest(name, int(d.size), float(np.mean(d)), t, p))
    if results:
        adj = holm_adjust([r.p_raw for r in results])
        for r, pa in zip(results, adj):
            r.p_adjusted = float(pa)
            r.significant = bool(pa < alpha)
    return results


@dataclass
class ScoreTable:
    """Mean scores indexed by (generating model, fitting model) for one metric set."""

    metrics: tuple[str, ...] = ("crps", "ign")
    cells: dict = field(default_factory=dict)  # (gen, fit) -> {metric: [values]}

    def add(self, generator: str, fitter: str, **scores: float) -> None:
        cell = self.cells.setdefault((generator, fitter), {m: [] for m in self.metrics})
        for m in self.metrics:
            cell[m].append(float(scores[m]))

    def generators(self) -> list[str]:
        return _ordered({g for g, _ in self.cells})

    def fitters(self) -> list[str]:
        return _ordered({f for _, f in self.cells})

    def mean(self, generator: str, fitter: str, metric: str) -> float:
        return float(np.mean(self.cells[(generator, fitter)][metric]))

    def stderr(self, generator: str, fitter: str, metric: str) -> float:
        v = np.asarray(self.cells[(generator, fitter)][metric])
        return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")

    def count(self, generator: str, fitter: str) -> int:
        return len(self.cells[(generator, fitter)][self.metrics[0]])

    def ranking(self, generator: str, metric: str) -> list[str]:
        """Fitters sorted from lowest (best) to highest mean score."""
        fits = [f for f in self.fitters() if (generator, f) in self.cells]
        return sorted(fits, key=lambda f: self.mean(generator, f, metric))

    def write_csv(self, path) -> None:
        gens, fits = self.generators(), self.fitters()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "fitter", *gens])
            for metric in self.metrics:
                best = {g: self.ranking(g, metric)[:2] for g in gens}
                for f in fits:
                    row = [metric, f]
                    for g in gens:
                        if (g, f) not in self.cells:
                            row.append("")
                            continue
                        v = f"{self.mean(g, f, metric):.6g}"
                        if best[g][:1] == [f]:
                            v += " (lowest)"
                        elif best[g][1:2] == [f]:
                            v += " (second)"
                        row.append(v)
                    w.writerow(row)

    def write_json(self, path) -> None:
        out = []
        for (g, f) in sorted(self.cells):
            rec = {"generator": g, "fitter": f, "count": self.count(g, f)}
            for m in self.metrics:
                rec[m] = self.mean(g, f, m)
                rec[f"{m}_se"] = self.stderr(g, f, m)
            out.append(rec)
        Path(path).write_text(json.dumps(out, indent=2))


_MODEL_ORDER = ("MoranRicker", "Gompertz", "LMRC", "LGC", "LMRD", "LGD")


def _ordered(names) -> list[str]:
    return sorted(names, key=lambda n: (_MODEL_ORDER.index(n) if n in _MODEL_ORDER else 99, n))
