"""Command-line interface: ``lnssm <subcommand> [--config PATH] [--seed N] [--out DIR] [--preset desk|paper]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
import traceback
import zlib
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .mcmc import McmcConfig, PosteriorSamples, PriorSet, Scenario, forecast, run_chain
from .models import ModelKind, ModelParams, ObservationSeries, fixed_point, simulate
from .scoring import crps_sample, ign_sample

log = logging.getLogger("lnssm")


class CliError(Exception):
    """A user-facing configuration or input problem."""


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{p}: config file not found")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(cfg, dict):
        raise CliError(f"{p}:1: config must be a JSON object")
    return cfg


def _take(cfg: dict, allowed: set[str], where: str) -> dict:
    unknown = set(cfg) - allowed
    if unknown:
        raise CliError(f"{where}: unknown key(s) {', '.join(sorted(unknown))}")
    return cfg


def write_manifest(out: Path, args, cfg: dict, t0: float, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": args.seed,
        "preset": args.preset,
        "config": cfg,
        "outputs": outputs,
        "wall_time_s": time.perf_counter() - t0,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


# -- subcommands -----------------------------------------------------------------


def _model_params(kind: ModelKind, cfg: dict) -> ModelParams:
    from .simstudy import TABLE2

    base = TABLE2[kind]
    a = math.log(cfg["A"]) if "A" in cfg else cfg.get("a", base.a)
    return ModelParams(float(a), float(cfg.get("b", base.b)), float(cfg.get("phi", base.proc_prec)),
                       float(cfg.get("tau", base.obs_prec)))


def cmd_simulate(args, cfg, out: Path) -> dict:
    cfg = _take(cfg, {"model", "a", "A", "b", "phi", "tau", "x0", "T", "obs_every"}, "simulate config")
    kind = ModelKind.parse(args.model or cfg.get("model", "Gompertz"))
    params = _model_params(kind, cfg)
    T = int(cfg.get("T", 575 if args.preset == "paper" else 200))
    x0 = float(cfg.get("x0", fixed_point(kind, params)))
    every = int(cfg.get("obs_every", 1))
    traj, obs = simulate(kind, params, x0, T, np.arange(1, T + 1, every), substream(args.seed, "simulate"))
    traj.to_csv(out / "trajectory.csv")
    obs.to_csv(out / "observations.csv")
    return {"outputs": ["trajectory.csv", "observations.csv"],
            "extra": {"model": kind.name, "params": asdict(params), "x0": x0, "T": T}}


def cmd_fit(args, cfg, out: Path) -> dict:
    cfg = _take(cfg, {"model", "obs", "T", "tau_fixed", "mu0", "prec0", "mcmc"}, "fit config")
    kind = ModelKind.parse(args.model or cfg.get("model", "Gompertz"))
    obs_path = args.obs or cfg.get("obs")
    if obs_path is None:
        raise CliError("fit needs --obs PATH")
    obs = ObservationSeries.from_csv(obs_path)
    T = int(args.T or cfg.get("T") or obs.indices[-1])
    obs = obs.truncate(T)
    base = McmcConfig() if args.preset == "paper" else McmcConfig(n_iter=3000, n_burn=500, n_adapt=500)
    mcfg = replace(base, **cfg.get("mcmc", {}), seed=args.seed)
    tau_fixed = args.tau_fixed if args.tau_fixed is not None else cfg.get("tau_fixed")
    mu0 = float(cfg.get("mu0", math.log(obs.values[0])))
    priors = PriorSet.for_kind(kind, mu0=mu0, prec0=float(cfg.get("prec0", 1.0)))
    scen = Scenario.estimated() if tau_fixed is None else Scenario.fixed(tau_fixed)
    post = run_chain(kind, obs, priors, mcfg, scen, T=T)
    post.write(out / "posterior")
    return {"outputs": ["posterior/samples.csv", "posterior/states.csv", "posterior/diagnostics.json"],
            "extra": {"model": kind.name, "T": T, "scenario": scen.name}}


def cmd_forecast(args, cfg, out: Path) -> dict:
    cfg = _take(cfg, {"posterior", "horizon"}, "forecast config")
    src = args.posterior or cfg.get("posterior")
    if src is None:
        raise CliError("forecast needs --posterior DIR")
    post = PosteriorSamples.read(src)
    if not isinstance(post.kind, ModelKind):
        raise CliError(f"{src}: forecast supports the benchmark models only, got {post.kind!r}")
    horizon = int(args.horizon or cfg.get("horizon", 7))
    T = post.states.shape[1] - 1
    ens = forecast(post, horizon, substream(args.seed, "forecast"))
    with open(out / "forecast.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "draw_id", "y"])
        for h in range(horizon):
            for i in range(ens.shape[0]):
                w.writerow([T + h + 1, i, repr(float(ens[i, h]))])
    return {"outputs": ["forecast.csv"], "extra": {"horizon": horizon, "origin": T}}


def _read_forecast(path) -> dict[int, np.ndarray]:
    p = Path(path)
    by_t: dict[int, list[float]] = {}
    with open(p, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames is None or not {"t", "y"} <= set(r.fieldnames):
            raise CliError(f"{p}:1: expected columns t, draw_id, y")
        for lineno, row in enumerate(r, start=2):
            try:
                by_t.setdefault(int(row["t"]), []).append(float(row["y"]))
            except ValueError:
                raise CliError(f"{p}:{lineno}: malformed row") from None
    return {t: np.asarray(v) for t, v in by_t.items()}


def cmd_score(args, cfg, out: Path) -> dict:
    cfg = _take(cfg, {"forecast", "obs"}, "score config")
    fpath, opath = args.forecast or cfg.get("forecast"), args.obs or cfg.get("obs")
    if fpath is None or opath is None:
        raise CliError("score needs --forecast PATH and --obs PATH")
    ens = _read_forecast(fpath)
    obs = ObservationSeries.from_csv(opath)
    rows = []
    for t, y in zip(obs.indices.tolist(), obs.values.tolist()):
        if t in ens:
            rows.append((t, crps_sample(ens[t], y), ign_sample(ens[t], y)))
    if not rows:
        raise CliError(f"{opath}: no observation overlaps the forecast days")
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "crps", "ign"])
        for t, c, g in rows:
            w.writerow([t, f"{c:.10g}", f"{g:.10g}"])
    return {"outputs": ["scores.csv"], "extra": {"mean_crps": float(np.mean([r[1] for r in rows])),
                                                 "mean_ign": float(np.mean([r[2] for r in rows]))}}


def cmd_simstudy(args, cfg, out: Path) -> dict:
    from .simstudy import StudyDesign, aggregate, run_study, write_study

    try:
        design = StudyDesign.from_dict({**cfg, "seed": args.seed}, StudyDesign.preset(args.preset))
    except (TypeError, ValueError) as exc:
        raise CliError(f"simstudy config: {exc}") from None

    def progress(i, n):
        if i % 50 == 0 or i == n:
            log.info("simstudy: %d/%d cells", i, n)

    result = run_study(design, progress=progress)
    report = aggregate(result)
    write_study(result, report, out, config_echo=cfg)
    names = ["scores.csv", "coverage.csv", "ttests.csv"] + [f"score_table_{s}.csv" for s in report.tables]
    return {"outputs": names, "manifest_written": True}


def cmd_dalec(args, cfg, out: Path) -> dict:
    from .dalec import run_dalec_experiment

    res = run_dalec_experiment(cfg, args.preset, args.seed, out, drivers_dir=args.drivers, lai_path=args.lai)
    return {"outputs": res["outputs"], "extra": res["summary"]}


def cmd_demo(args, cfg, out: Path) -> dict:
    from .demo import DemoConfig, run_demo

    dcfg = DemoConfig(**_take(cfg, {"sigma2", "a", "steps", "n_paths", "starts"}, "demo config"))
    if "starts" in cfg:
        dcfg = replace(dcfg, starts=tuple(cfg["starts"]))
    panels = run_demo(out, substream(args.seed, "demo"), dcfg)
    return {"outputs": [f"demo_{n}.csv" for n in panels]}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "score": cmd_score,
    "simstudy": cmd_simstudy,
    "dalec": cmd_dalec,
    "demo": cmd_demo,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--preset", choices=("paper", "desk"), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lnssm", description="Lognormal moment-matched state space models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate a benchmark model")
    p.add_argument("--model")
    p = sub.add_parser("fit", parents=[common], help="fit a benchmark model by MCMC")
    p.add_argument("--model")
    p.add_argument("--obs")
    p.add_argument("--T", type=int)
    p.add_argument("--tau-fixed", type=float)
    p = sub.add_parser("forecast", parents=[common], help="posterior predictive forecast")
    p.add_argument("--posterior")
    p.add_argument("--horizon", type=int)
    p = sub.add_parser("score", parents=[common], help="CRPS and IGN of a forecast")
    p.add_argument("--forecast")
    p.add_argument("--obs")
    sub.add_parser("simstudy", parents=[common], help="rolling-origin simulation study")
    p = sub.add_parser("dalec", parents=[common], help="DALEC LAI fit and prediction")
    p.add_argument("--drivers", help="directory with temps.csv, swrad.csv, co2.csv")
    p.add_argument("--lai", help="LAI csv (date, lai[, lai_sd])")
    sub.add_parser("demo", parents=[common], help="fan charts for the toy systems")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    t0 = time.perf_counter()
    cfg: dict = {}
    try:
        cfg = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        res = COMMANDS[args.command](args, cfg, out)
        if not res.get("manifest_written"):
            write_manifest(out, args, cfg, t0, res["outputs"], res.get("extra"))
    except Exception as exc:  # reported as a machine-readable record
        record = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
            "seed": args.seed,
        }
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        print(json.dumps(record), file=sys.stderr)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(record, indent=2))
        except OSError:
            pass
        return 2 if isinstance(exc, CliError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
