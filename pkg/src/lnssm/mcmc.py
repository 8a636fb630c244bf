"""Metropolis-within-Gibbs fitting of the six benchmark models.

All models are sampled on the latent log scale D = log X. The classical
Gompertz model has normal full conditionals for D, so its latent states can
be Gibbs sampled; every model can also use the single-site random-walk
kernel. Static parameters are updated by Metropolis steps: (a, b) jointly with
an adapted covariance, the precisions on the log scale.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .dist import HalfCauchyParams
from .models import (
    ModelKind,
    ModelParams,
    NumericError,
    ObservationSeries,
    Trajectory,
)

log = logging.getLogger(__name__)

CHUNK = 256


@dataclass(frozen=True)
class PriorSet:
    a_bounds: tuple[float, float] = (-10.0, 10.0)
    b_bounds: tuple[float, float] = (-10.0, 10.0)
    phi_prior: HalfCauchyParams = HalfCauchyParams(100.0)
    tau_prior: HalfCauchyParams = HalfCauchyParams(100.0)
    init_mu0: float = 0.0
    init_prec0: float = 1.0

    @classmethod
    def for_kind(cls, kind: ModelKind, mu0: float = 0.0, prec0: float = 1.0) -> "PriorSet":
        """Default priors; the constant-variance models restrict a to [0, 10]."""
        a_bounds = (0.0, 10.0) if ModelKind(kind).is_constant_variance else (-10.0, 10.0)
        return cls(a_bounds=a_bounds, init_mu0=mu0, init_prec0=prec0)

    def log_prior(self, params: ModelParams) -> float:
        if not (self.a_bounds[0] <= params.a <= self.a_bounds[1]):
            return -math.inf
        if not (self.b_bounds[0] <= params.b <= self.b_bounds[1]):
            return -math.inf
        lp = K.halfcauchy_lp(params.proc_prec, self.phi_prior.scale)
        if not params.obs_prec_fixed:
            lp += K.halfcauchy_lp(params.obs_prec, self.tau_prior.scale)
        return lp


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 10000
    n_burn: int = 2000
    n_adapt: int = 1000
    seed: int = 0
    thin: int = 1
    latent_sampler: str = "auto"  # "auto" | "gibbs" | "mh"

    def __post_init__(self):
        if self.n_burn + self.n_adapt >= self.n_iter:
            raise ValueError("n_burn + n_adapt must be smaller than n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.latent_sampler not in ("auto", "gibbs", "mh"):
            raise ValueError(f"unknown latent sampler {self.latent_sampler!r}")

    @property
    def n_kept(self) -> int:
        return len(range(0, self.n_iter - self.n_adapt - self.n_burn, self.thin))


@dataclass(frozen=True)
class Scenario:
    """Observation precision either estimated (``tau_fixed is None``) or held fixed."""

    tau_fixed: float | None = None

    @property
    def name(self) -> str:
        return "tau_estimated" if self.tau_fixed is None else "tau_fixed"

    @classmethod
    def estimated(cls) -> "Scenario":
        return cls(None)

    @classmethod
    def fixed(cls, value: float) -> "Scenario":
        return cls(float(value))


PARAM_NAMES = ("a", "b", "phi", "tau")


@dataclass
class PosteriorSamples:
    """Post burn-in draws.

    ``params`` has one column per name in ``param_names`` (a, b, phi, tau for
    the benchmark models). ``states`` holds natural-scale latent paths with
    index 0 = the initial state; a trailing axis is present for
    multivariate states.
    """

    kind: ModelKind | str | None
    params: np.ndarray
    states: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    param_names: tuple[str, ...] = PARAM_NAMES
    state_names: tuple[str, ...] = ("x",)

    def __len__(self) -> int:
        return self.params.shape[0]

    def param(self, name: str) -> np.ndarray:
        return self.params[:, self.param_names.index(name)]

    def draw(self, i: int, obs_prec_fixed: bool = False) -> ModelParams:
        a, b, phi, tau = (self.param(n)[i] for n in PARAM_NAMES)
        return ModelParams(a, b, phi, tau, obs_prec_fixed)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i, 1:], self.states[i, 0])

    @property
    def kind_name(self) -> str | None:
        return self.kind.name if isinstance(self.kind, ModelKind) else self.kind

    def write(self, directory, write_states: bool = True) -> None:
        """samples.csv (one row per draw), optional wide states.csv, diagnostics.json."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = "draw," + ",".join(self.param_names)
        rows = np.column_stack([np.arange(len(self)), self.params])
        np.savetxt(d / "samples.csv", rows, delimiter=",", header=header, comments="",
                   fmt=["%d"] + ["%.17g"] * len(self.param_names))
        if write_states and self.states.size:
            st = self.states.reshape(len(self), self.states.shape[1], -1)
            names = [f"{s}{t}" if len(self.state_names) == 1 else f"{s}_{t}"
                     for t in range(st.shape[1]) for s in self.state_names]
            rows = np.column_stack([np.arange(len(self)), st.reshape(len(self), -1)])
            np.savetxt(d / "states.csv", rows, delimiter=",", header="draw," + ",".join(names),
                       comments="", fmt=["%d"] + ["%.17g"] * len(names))
        meta = dict(self.diagnostics, kind=self.kind_name, param_names=list(self.param_names),
                    state_names=list(self.state_names))
        (d / "diagnostics.json").write_text(json.dumps(meta, indent=2, default=_jsonable))

    @classmethod
    def read(cls, directory) -> "PosteriorSamples":
        d = Path(directory)
        meta = json.loads((d / "diagnostics.json").read_text())
        params = np.loadtxt(d / "samples.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
        state_names = tuple(meta.pop("state_names", ["x"]))
        names = tuple(meta.pop("param_names", PARAM_NAMES))
        states_path = d / "states.csv"
        if states_path.exists():
            states = np.loadtxt(states_path, delimiter=",", skiprows=1, ndmin=2)[:, 1:]
            if len(state_names) > 1:
                states = states.reshape(params.shape[0], -1, len(state_names))
        else:
            states = np.empty((params.shape[0], 0))
        kind = meta.pop("kind")
        if kind in ModelKind.__members__:
            kind = ModelKind[kind]
        return cls(kind, params, states, meta, names, state_names)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, ModelKind):
        return o.name
    raise TypeError(f"not serialisable: {type(o)}")


# -- diagnostics ---------------------------------------------------------------


def autocorrelation(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def effective_sample_size(x) -> float:
    """Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.ptp(x) == 0:
        return float(n)
    rho = autocorrelation(x)
    pairs = rho[: n - (n % 2)].reshape(-1, 2).sum(axis=1)
    tau = -1.0
    prev = math.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        tau += 2.0 * p
        prev = p
    return float(n / max(tau, 1e-12))


def mc_standard_error(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / math.sqrt(effective_sample_size(x)))


# -- building blocks -----------------------------------------------------------


def _obs_arrays(obs: ObservationSeries, T: int):
    F = np.zeros(T + 1)
    has = np.zeros(T + 1, dtype=np.bool_)
    if len(obs):
        if obs.indices[-1] > T:
            raise ValueError(f"observation index {obs.indices[-1]} beyond T={T}")
        F[obs.indices] = np.log(obs.values)
        has[obs.indices] = True
    return F, has


def gibbs_latent_gompertz(D, F, has_obs, params: ModelParams, priors: PriorSet, rng) -> np.ndarray:
    """One systematic-scan Gibbs sweep over D[0..T] for the log-space Gompertz model."""
    D = np.array(D, dtype=float)
    z = rng.standard_normal(D.size)
    K.latent_gibbs_sweep(D, np.asarray(F, float), np.asarray(has_obs, np.bool_), params.a, params.b,
                         params.proc_prec, params.obs_prec, priors.init_mu0, priors.init_prec0, z)
    return D


def mh_latent_block(kind, traj: Trajectory, obs: ObservationSeries, params: ModelParams,
                    step_scale, rng, priors: PriorSet | None = None):
    """One single-site random-walk Metropolis sweep over log X_0..log X_T.

    Returns the updated trajectory and the number of accepted site moves.
    """
    kind = ModelKind(kind)
    priors = priors or PriorSet.for_kind(kind, mu0=math.log(traj.t0_value))
    T = traj.T
    D = np.log(np.concatenate(([traj.t0_value], traj.values)))
    F, has = _obs_arrays(obs, T)
    scales = np.broadcast_to(np.asarray(step_scale, float), (T + 1,)).copy()
    z = rng.standard_normal(T + 1)
    logu = np.log(rng.random(T + 1))
    accepted = np.zeros(T + 1, dtype=np.int64)
    K.latent_mh_sweep(int(kind), D, F, has, params.a, params.b, params.proc_prec, params.obs_prec,
                      priors.init_mu0, priors.init_prec0, scales, z, logu, accepted)
    X = np.exp(D)
    return Trajectory(X[1:], X[0]), int(accepted.sum())


def update_static_params(kind, traj: Trajectory, obs: ObservationSeries, params: ModelParams,
                         priors: PriorSet, rng, scales=(0.05, 0.05, 0.2, 0.2)) -> ModelParams:
    """One Metropolis update of a, b, phi and (unless fixed) tau given the latent path.

    a and b use independent Gaussian random-walk proposals; proposals outside
    the uniform prior box are rejected. Precisions move on the log scale.
    """
    kind = ModelKind(kind)
    D = np.log(np.concatenate(([traj.t0_value], traj.values)))
    F, has = _obs_arrays(obs, traj.T)
    a, b, phi, tau = params.a, params.b, params.proc_prec, params.obs_prec
    k = int(kind)
    lp = K.proc_sum(k, D, a, b, phi)
    for which in ("a", "b"):
        a_new = a + scales[0] * rng.standard_normal() if which == "a" else a
        b_new = b + scales[1] * rng.standard_normal() if which == "b" else b
        u = rng.random()
        if not (priors.a_bounds[0] <= a_new <= priors.a_bounds[1]
                and priors.b_bounds[0] <= b_new <= priors.b_bounds[1]):
            continue
        lp_new = K.proc_sum(k, D, a_new, b_new, phi)
        if math.log(u) < lp_new - lp:
            a, b, lp = a_new, b_new, lp_new
    phi_new = phi * math.exp(scales[2] * rng.standard_normal())
    u = rng.random()
    lp_new = K.proc_sum(k, D, a, b, phi_new)
    g = priors.phi_prior.scale
    r = (lp_new + K.halfcauchy_lp(phi_new, g) + math.log(phi_new)) - (lp + K.halfcauchy_lp(phi, g) + math.log(phi))
    if math.log(u) < r:
        phi = phi_new
    if not params.obs_prec_fixed:
        tau_new = tau * math.exp(scales[3] * rng.standard_normal())
        u = rng.random()
        g = priors.tau_prior.scale
        r = (K.obs_sum(k, D, F, has, tau_new) + K.halfcauchy_lp(tau_new, g) + math.log(tau_new)) - (
            K.obs_sum(k, D, F, has, tau) + K.halfcauchy_lp(tau, g) + math.log(tau))
        if math.log(u) < r:
            tau = tau_new
    return ModelParams(a, b, phi, tau, params.obs_prec_fixed)


# -- initialisation --------------------------------------------------------------


def _initial_path(obs: ObservationSeries, T: int, mu0: float) -> np.ndarray:
    t = np.arange(T + 1)
    if len(obs) == 0:
        return np.full(T + 1, mu0)
    return np.interp(t, obs.indices, np.log(obs.values))


def _precision_from_logvar(kind: ModelKind, v: float, mean_sq: float) -> float:
    if kind.is_biased:
        return 1.0 / v
    if kind.is_constant_variance:
        return 1.0 / (math.expm1(v) * mean_sq)
    return 1.0 / math.expm1(v)


def initial_state(kind: ModelKind, obs: ObservationSeries, T: int, priors: PriorSet):
    """Deterministic starting point: path through the observations, (a, b) by least squares.

    Returns (D, theta, ab_cov) where ab_cov is the least-squares covariance
    used to seed the (a, b) proposal.
    """
    kind = ModelKind(kind)
    D = _initial_path(obs, T, priors.init_mu0)
    lo = np.array([priors.a_bounds[0], priors.b_bounds[0]])
    hi = np.array([priors.a_bounds[1], priors.b_bounds[1]])
    inset = 1e-3 * (hi - lo)
    ab = 0.5 * (lo + hi)
    cov = np.diag(((hi - lo) * 1e-3) ** 2)
    v = 0.1
    if T >= 4 and len(obs) >= 2:
        prev, cur = D[:-1], D[1:]
        if kind.is_gompertz_map:
            X = np.column_stack([np.ones(T), prev])
            y = cur
        else:
            X = np.column_stack([np.ones(T), np.exp(prev)])
            y = cur - prev
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        if kind.is_gompertz_map:
            coef[1] -= 1.0
        resid = y - X @ (coef + (np.array([0.0, 1.0]) if kind.is_gompertz_map else 0.0))
        v = max(float(np.var(resid)), 1e-4)
        xtx = X.T @ X
        if np.linalg.cond(xtx) < 1e12:
            cov = v * np.linalg.inv(xtx)
        ab = coef
    ab = np.clip(ab, lo + inset, hi - inset)
    v_half = 0.5 * v
    mean_sq = float(np.mean(np.exp(2 * D)))
    phi = _precision_from_logvar(kind, v_half, mean_sq)
    tau = phi
    return D, np.array([ab[0], ab[1], phi, tau]), cov


# -- chains ------------------------------------------------------------------------


def _use_gibbs(kind: ModelKind, config: McmcConfig) -> bool:
    if config.latent_sampler == "gibbs":
        if kind != ModelKind.Gompertz:
            raise ValueError("closed-form latent Gibbs updates exist only for the Gompertz model")
        return True
    if config.latent_sampler == "mh":
        return False
    return kind == ModelKind.Gompertz


def run_chain(kind, obs: ObservationSeries, priors: PriorSet, config: McmcConfig,
              scenario: Scenario = Scenario(), T: int | None = None) -> PosteriorSamples:
    """Fit ``kind`` to ``obs`` over steps 1..T (default: last observed index)."""
    kind = ModelKind(kind)
    if T is None:
        if len(obs) == 0:
            raise ValueError("T is required when there are no observations")
        T = int(obs.indices[-1])
    gibbs = _use_gibbs(kind, config)
    rng = np.random.default_rng(config.seed)
    F, has = _obs_arrays(obs, T)
    D, theta, cov = initial_state(kind, obs, T, priors)
    tau_fixed = scenario.tau_fixed is not None
    if tau_fixed:
        theta[3] = scenario.tau_fixed
    k = int(kind)
    lp0 = K.log_target(k, D, F, has, *theta, priors.init_mu0, priors.init_prec0)
    if not np.isfinite(lp0):
        raise NumericError(f"{kind.name}: initial state has non-finite log density")

    lat_scale = np.full(T + 1, 0.5 * math.sqrt(0.5 * (1.0 / theta[2] if kind.is_biased else 0.01)))
    lat_scale = np.maximum(lat_scale, 1e-3)
    ab_chol = np.linalg.cholesky(cov * 2.38**2 / 2.0 + 1e-14 * np.eye(2))
    ab_mean = theta[:2].copy()
    ab_cov = cov.copy()
    ab_loglam = np.zeros(1)
    log_sphi = np.array([math.log(0.3)])
    log_stau = np.array([math.log(0.3)])
    log_sgrp = np.array([math.log(0.1)])
    n_keep = config.n_kept
    out_theta = np.empty((n_keep, 4))
    out_D = np.empty((n_keep, T + 1))
    acc = np.zeros(10, dtype=np.int64)
    bounds = np.array([*priors.a_bounds, *priors.b_bounds], dtype=float)
    prior_vec = np.array([priors.init_mu0, priors.init_prec0, priors.phi_prior.scale, priors.tau_prior.scale])
    pos = 0
    it = 0
    while it < config.n_iter:
        n = min(CHUNK, config.n_iter - it)
        z_lat = rng.standard_normal((n, T + 1))
        u_lat = rng.random((n, T + 1))
        z_par = rng.standard_normal((n, 5))
        u_par = rng.random((n, 4))
        pos = K.run_block(k, gibbs, D, F, has, theta, tau_fixed, bounds, prior_vec,
                          it, config.n_adapt, config.n_burn, config.thin,
                          lat_scale, ab_chol, ab_mean, ab_cov, ab_loglam, log_sphi, log_stau, log_sgrp,
                          z_lat, u_lat, z_par, u_par, out_theta, out_D, pos, acc)
        it += n
        if not np.all(np.isfinite(theta)) or not np.all(np.isfinite(D)):
            raise NumericError(f"{kind.name}: chain diverged by iteration {it}")

    def rate(i):
        return float(acc[i] / acc[i + 1]) if acc[i + 1] else None

    diagnostics = {
        "acceptance": {"latent": rate(0), "ab": rate(2), "phi": rate(4), "tau": rate(6), "rescale": rate(8)},
        "ess": {name: effective_sample_size(out_theta[:, j]) for j, name in enumerate(PARAM_NAMES)
                if not (name == "tau" and tau_fixed)},
        "latent_sampler": "gibbs" if gibbs else "mh",
        "config": asdict(config),
        "scenario": scenario.name,
        "tau_fixed": scenario.tau_fixed,
        "seed": config.seed,
        "T": T,
    }
    return PosteriorSamples(kind, out_theta, np.exp(out_D), diagnostics)


def forecast(posterior: PosteriorSamples, horizon: int, rng) -> np.ndarray:
    """Posterior-predictive observations for steps T+1..T+horizon, shape (n_draws, horizon)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = len(posterior)
    d_last = np.log(posterior.states[:, -1])
    z_proc = rng.standard_normal((n, horizon))
    z_obs = rng.standard_normal((n, horizon))
    out = np.empty((n, horizon))
    theta = np.ascontiguousarray(posterior.params)
    if not K.forecast_paths(int(posterior.kind), d_last, theta, horizon, z_proc, z_obs, out):
        raise NumericError(f"{posterior.kind.name}: forecast path overflowed")
    return out
