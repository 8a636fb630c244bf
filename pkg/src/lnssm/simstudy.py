"""Rolling-origin simulation study over the six benchmark models."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .mcmc import McmcConfig, PriorSet, Scenario, forecast, run_chain
from .models import ModelKind, ModelParams, ObservationSeries, Trajectory, fixed_point, simulate
from .scoring import ScoreTable, ScoringError, coverage, crps_sample, hpd_interval, ign_sample, paired_t_holm

log = logging.getLogger(__name__)

TABLE2 = {
    ModelKind.Gompertz: ModelParams(math.log(0.82), -0.658, 70.2, 188.7),
    ModelKind.MoranRicker: ModelParams(math.log(1.26), -0.034, 51.9, 188.7),
    ModelKind.LGC: ModelParams(math.log(1.21), -0.099, 4.0, 4.0),
    ModelKind.LMRC: ModelParams(math.log(1.11), -0.014, 4.0, 4.0),
    ModelKind.LGD: ModelParams(math.log(1.21), -0.099, 70.2, 188.7),
    ModelKind.LMRD: ModelParams(math.log(1.11), -0.014, 70.2, 188.7),
}
ALL_KINDS = tuple(k.name for k in ModelKind)
SCENARIOS = ("tau_fixed", "tau_estimated")


@dataclass(frozen=True)
class StudyDesign:
    generators: tuple[str, ...] = ALL_KINDS
    fitters: tuple[str, ...] = ALL_KINDS
    n_datasets: int = 30
    series_length: int = 575
    initial_window: int = 365
    horizon: int = 7
    n_windows: int | None = None  # None: advance until the data are exhausted
    scenarios: tuple[str, ...] = SCENARIOS
    mcmc: McmcConfig = McmcConfig()
    prec0: float = 1.0
    hpd_level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.initial_window + self.horizon > self.series_length:
            raise ValueError("initial_window + horizon exceeds series_length")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}")
        for name in (*self.generators, *self.fitters):
            ModelKind.parse(name)
        if self.n_datasets < 1:
            raise ValueError("n_datasets must be >= 1")
        if self.n_windows is not None and not 1 <= self.n_windows <= self.max_windows:
            raise ValueError(f"n_windows must lie in [1, {self.max_windows}]")

    @property
    def max_windows(self) -> int:
        return (self.series_length - self.initial_window) // self.horizon

    @property
    def windows(self) -> int:
        return self.max_windows if self.n_windows is None else self.n_windows

    def fit_end(self, window_index: int) -> int:
        """Last fitted day for a 1-based window index."""
        return self.initial_window + self.horizon * (window_index - 1)

    @classmethod
    def paper(cls, seed: int = 0) -> "StudyDesign":
        return cls(seed=seed)

    @classmethod
    def desk(cls, seed: int = 0) -> "StudyDesign":
        return cls(n_datasets=5, series_length=200, initial_window=120, n_windows=4,
                   mcmc=McmcConfig(n_iter=3000, n_burn=500, n_adapt=500), seed=seed)

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "StudyDesign":
        if name not in ("paper", "desk"):
            raise ValueError(f"unknown preset {name!r}")
        return getattr(cls, name)(seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generators"], d["fitters"], d["scenarios"] = list(self.generators), list(self.fitters), list(self.scenarios)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "StudyDesign | None" = None) -> "StudyDesign":
        base = base or cls()
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown study design key(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        for key in ("generators", "fitters", "scenarios"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "mcmc" in kw:
            kw["mcmc"] = replace(base.mcmc, **kw["mcmc"])
        return replace(base, **kw)


@dataclass
class Dataset:
    generator: str
    index: int
    truth: ModelParams
    x0: float
    trajectory: Trajectory
    observations: ObservationSeries


@dataclass
class CellResult:
    generator: str
    dataset: int
    fitter: str
    scenario: str
    window: int
    crps: float = math.nan
    ign: float = math.nan
    phi_hpd: tuple[float, float] | None = None
    tau_hpd: tuple[float, float] | None = None
    phi_mean: float = math.nan
    status: str = "ok"
    reason: str = ""

    @property
    def key(self) -> tuple:
        return (self.generator, self.dataset, self.fitter, self.scenario, self.window)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def generate_datasets(design: StudyDesign, rng: np.random.Generator | None = None) -> list[Dataset]:
    """Simulate ``n_datasets`` fully observed series per generator, started at the mean map's fixed point."""
    out = []
    for g_idx, name in enumerate(design.generators):
        kind = ModelKind.parse(name)
        truth = TABLE2[kind]
        x0 = fixed_point(kind, truth)
        for i in range(design.n_datasets):
            r = rng if rng is not None else _substream(design.seed, 1, int(kind), i)
            T = design.series_length
            traj, obs = simulate(kind, truth, x0, T, np.arange(1, T + 1), r)
            out.append(Dataset(kind.name, i, truth, x0, traj, obs))
    return out


def _scenario(name: str, truth: ModelParams) -> Scenario:
    return Scenario.fixed(truth.obs_prec) if name == "tau_fixed" else Scenario.estimated()


def run_cell(dataset: Dataset, fitter: str, scenario: str, window_index: int, design: StudyDesign,
             seed: int | None = None) -> CellResult:
    """Fit one window, forecast ``horizon`` days and score them; failures are recorded, not raised."""
    kind = ModelKind.parse(fitter)
    res = CellResult(dataset.generator, dataset.index, kind.name, scenario, window_index)
    end = design.fit_end(window_index)
    if end + design.horizon > design.series_length:
        raise ValueError(f"window {window_index} runs past the end of the series")
    if seed is None:
        seed = int(np.random.SeedSequence([design.seed, 2, int(ModelKind.parse(dataset.generator)),
                                           dataset.index, int(kind), SCENARIOS.index(scenario),
                                           window_index]).generate_state(1)[0])
    obs = dataset.observations
    train = obs.truncate(end)
    held = obs.window(end + 1, end + design.horizon)
    priors = PriorSet.for_kind(kind, mu0=math.log(dataset.x0), prec0=design.prec0)
    config = replace(design.mcmc, seed=seed)
    try:
        post = run_chain(kind, train, priors, config, _scenario(scenario, dataset.truth), T=end)
        ens = forecast(post, design.horizon, np.random.default_rng(seed + 1))
        pos = held.indices - end - 1
        res.crps = float(np.mean([crps_sample(ens[:, j], y) for j, y in zip(pos, held.values)]))
        res.ign = float(np.mean([ign_sample(ens[:, j], y) for j, y in zip(pos, held.values)]))
        phi = post.param("phi")
        res.phi_hpd = hpd_interval(phi, design.hpd_level)
        res.phi_mean = float(np.mean(phi))
        if scenario == "tau_estimated":
            res.tau_hpd = hpd_interval(post.param("tau"), design.hpd_level)
    except (ArithmeticError, ScoringError, ValueError) as exc:
        res.status, res.reason = "failed", f"{type(exc).__name__}: {exc}"
    return res


def _cell_job(args):
    return run_cell(*args)


def worker_count() -> int:
    cap = os.environ.get("LNSSM_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


@dataclass
class StudyResult:
    design: StudyDesign
    cells: list[CellResult] = field(default_factory=list)
    truths: dict = field(default_factory=dict)  # generator -> ModelParams
    wall_time: float = 0.0

    def ok_cells(self) -> list[CellResult]:
        return [c for c in self.cells if c.ok]


def run_study(design: StudyDesign, workers: int | None = None, progress=None) -> StudyResult:
    t0 = time.perf_counter()
    datasets = generate_datasets(design)
    jobs = [(ds, f, s, w, design)
            for ds in datasets for f in design.fitters for s in design.scenarios
            for w in range(1, design.windows + 1)]
    workers = worker_count() if workers is None else workers
    cells = []
    if workers <= 1:
        for i, job in enumerate(jobs):
            cells.append(_cell_job(job))
            if progress:
                progress(i + 1, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, c in enumerate(ex.map(_cell_job, jobs, chunksize=8)):
                cells.append(c)
                if progress:
                    progress(i + 1, len(jobs))
    cells.sort(key=lambda c: (ALL_KINDS.index(c.generator), c.dataset, ALL_KINDS.index(c.fitter),
                              SCENARIOS.index(c.scenario), c.window))
    truths = {ds.generator: ds.truth for ds in datasets}
    return StudyResult(design, cells, truths, time.perf_counter() - t0)


@dataclass
class StudyReport:
    tables: dict  # scenario -> ScoreTable
    coverage: list[dict]
    ttests: list
    failures: dict  # (generator, fitter, scenario) -> count

    def pooled_phi_coverage(self, scenario: str) -> float:
        rows = [r for r in self.coverage if r["scenario"] == scenario and r["parameter"] == "phi"]
        n = sum(r["n"] for r in rows)
        return sum(r["coverage"] * r["n"] for r in rows) / n if n else math.nan


def aggregate(result: StudyResult) -> StudyReport:
    """Score tables per scenario, coverage of self-fit HPD intervals, and fixed-vs-estimated paired tests."""
    tables: dict[str, ScoreTable] = {}
    failures: dict = {}
    for c in result.cells:
        if not c.ok:
            k = (c.generator, c.fitter, c.scenario)
            failures[k] = failures.get(k, 0) + 1
            continue
        tables.setdefault(c.scenario, ScoreTable()).add(c.generator, c.fitter, crps=c.crps, ign=c.ign)

    cov_rows = []
    for scen in result.design.scenarios:
        for gen in result.design.generators:
            truth = result.truths.get(gen)
            selfs = [c for c in result.cells if c.ok and c.scenario == scen and c.generator == gen and c.fitter == gen]
            if truth is None or not selfs:
                continue
            cov_rows.append({"generator": gen, "scenario": scen, "parameter": "phi", "truth": truth.proc_prec,
                             "n": len(selfs), "coverage": coverage([c.phi_hpd for c in selfs], truth.proc_prec)})
            taus = [c.tau_hpd for c in selfs if c.tau_hpd is not None]
            if taus:
                cov_rows.append({"generator": gen, "scenario": scen, "parameter": "tau", "truth": truth.obs_prec,
                                 "n": len(taus), "coverage": coverage(taus, truth.obs_prec)})

    tests = []
    if {"tau_fixed", "tau_estimated"} <= set(result.design.scenarios):
        by_key = {c.key: c for c in result.cells if c.ok}
        pairs = {}
        for fitter in result.design.fitters:
            for metric in ("crps", "ign"):
                before, after = [], []
                for c in result.cells:
                    if c.fitter != fitter or c.scenario != "tau_fixed" or not c.ok:
                        continue
                    other = by_key.get((c.generator, c.dataset, c.fitter, "tau_estimated", c.window))
                    if other is not None:
                        before.append(getattr(c, metric))
                        after.append(getattr(other, metric))
                if len(before) >= 2 and np.std(np.subtract(before, after)) > 0:
                    pairs[f"{fitter}:{metric}"] = (before, after)
        tests = paired_t_holm(pairs)
    return StudyReport(tables, cov_rows, tests, failures)


def write_study(result: StudyResult, report: StudyReport, out_dir, config_echo: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["generator", "dataset", "fitter", "scenario", "window", "crps", "ign",
                    "phi_lo", "phi_hi", "tau_lo", "tau_hi", "status", "reason"])
        for c in result.cells:
            phi = c.phi_hpd or ("", "")
            tau = c.tau_hpd or ("", "")
            w.writerow([c.generator, c.dataset, c.fitter, c.scenario, c.window, _fmt(c.crps), _fmt(c.ign),
                        _fmt(phi[0]), _fmt(phi[1]), _fmt(tau[0]), _fmt(tau[1]), c.status, c.reason])
    with open(out / "coverage.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["generator", "scenario", "parameter", "truth", "n", "coverage"])
        w.writeheader()
        w.writerows(report.coverage)
    with open(out / "ttests.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "n", "mean_diff", "t", "p_raw", "p_adjusted", "significant"])
        for t in report.ttests:
            w.writerow([t.name, t.n, _fmt(t.mean_diff), _fmt(t.t), _fmt(t.p_raw), _fmt(t.p_adjusted), t.significant])
    for scen, table in report.tables.items():
        table.write_csv(out / f"score_table_{scen}.csv")
        table.write_json(out / f"score_table_{scen}.json")
    manifest = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": result.design.seed,
        "design": result.design.to_dict(),
        "config": config_echo,
        "cells": len(result.cells),
        "failed_cells": sum(1 for c in result.cells if not c.ok),
        "failures": [{"generator": g, "fitter": f, "scenario": s, "count": n}
                     for (g, f, s), n in sorted(report.failures.items())],
        "pooled_phi_coverage": {s: report.pooled_phi_coverage(s) for s in result.design.scenarios},
        "wall_time_s": result.wall_time,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return out


def _fmt(v) -> str:
    if v == "" or v is None:
        return ""
    return f"{v:.10g}"
