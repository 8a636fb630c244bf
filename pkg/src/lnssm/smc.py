"""Bootstrap particle filter and particle marginal Metropolis-Hastings.

A filter model supplies three vectorised callables over an (N, d) particle
array: ``initial(z)``, ``transition(x, t, z)`` and ``obs_logpdf(y, x, t)``,
where ``z`` are standard normal draws of matching shape. Randomness is drawn
per step as an (N, d) block, so particle i at step t always consumes the same
variates whatever order particles are processed in.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit, logsumexp
from scipy.stats import qmc

from .mcmc import PosteriorSamples, effective_sample_size
from .models import ObservationSeries

log = logging.getLogger(__name__)


class ParticleDegeneracyError(RuntimeError):
    def __init__(self, t: int):
        super().__init__(f"all particle weights vanished at t={t}")
        self.t = t


class FilterModel(Protocol):
    state_dim: int

    def initial(self, z: np.ndarray) -> np.ndarray: ...

    def transition(self, x: np.ndarray, t: int, z: np.ndarray) -> np.ndarray: ...

    def obs_logpdf(self, y: float, x: np.ndarray, t: int) -> np.ndarray: ...


@dataclass
class ParticleSet:
    states: np.ndarray
    log_weights: np.ndarray
    ancestry: np.ndarray

    def __post_init__(self):
        if self.states.shape[0] < 2:
            raise ValueError("need at least 2 particles")
        if not np.any(np.isfinite(self.log_weights)):
            raise ValueError("weights are not normalisable")


@dataclass
class FilterResult:
    loglik: float
    filtered_means: np.ndarray  # (T + 1, d); row 0 is the initial cloud
    path: np.ndarray | None = None  # one ancestral trajectory, (T + 1, d)


@dataclass
class FilterNoise:
    """Random inputs for one filter run: normals for each step and one uniform per step."""

    z: np.ndarray  # (T + 1, N, d)
    u: np.ndarray  # (T + 2,), last entry picks the returned path

    @classmethod
    def draw(cls, rng: np.random.Generator, T: int, n_particles: int, dim: int) -> "FilterNoise":
        return cls(rng.standard_normal((T + 1, n_particles, dim)), rng.random(T + 2))


def systematic_indices(weights: np.ndarray, u: float) -> np.ndarray:
    n = weights.size
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    positions = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def normalise_log_weights(log_weights, t: int = -1) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    mx = np.max(lw)
    if not np.isfinite(mx):
        raise ParticleDegeneracyError(t)
    w = np.exp(lw - mx)
    return w / w.sum()


def systematic_resample(log_weights, rng: np.random.Generator | float) -> np.ndarray:
    """Ancestor indices with expected multiplicity N * w_i from a single uniform offset."""
    u = rng if isinstance(rng, float) else rng.random()
    return systematic_indices(normalise_log_weights(log_weights), u)


def bootstrap_filter(model: FilterModel, obs: ObservationSeries, n_particles: int, rng=None,
                     T: int | None = None, noise: FilterNoise | None = None,
                     keep_path: bool = False) -> FilterResult:
    """Bootstrap filter, resampling systematically after every observation.

    Returns the log of the product of mean unnormalised weights (the
    standard unbiased marginal likelihood estimator, on the log scale).
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    if T is None:
        T = int(obs.indices[-1]) if len(obs) else 0
    d = model.state_dim
    if noise is None:
        noise = FilterNoise.draw(rng, T, n_particles, d)
    y_at = dict(zip(obs.indices.tolist(), obs.values.tolist()))
    x = model.initial(noise.z[0])
    means = np.empty((T + 1, d))
    means[0] = x.mean(axis=0)
    hist = anc = None
    if keep_path:
        hist = np.empty((T + 1, n_particles, d))
        anc = np.tile(np.arange(n_particles), (T + 1, 1))
        hist[0] = x
    loglik = 0.0
    for t in range(1, T + 1):
        x = model.transition(x, t, noise.z[t])
        if t in y_at:
            lw = model.obs_logpdf(y_at[t], x, t)
            lw = np.where(np.isnan(lw), -np.inf, lw)
            w = normalise_log_weights(lw, t)
            loglik += float(logsumexp(lw)) - math.log(n_particles)
            means[t] = w @ x
            idx = systematic_indices(w, noise.u[t])
            x = x[idx]
            if keep_path:
                anc[t] = idx
        else:
            means[t] = x.mean(axis=0)
        if keep_path:
            hist[t] = x
    path = None
    if keep_path:
        j = min(int(noise.u[T + 1] * n_particles), n_particles - 1)
        path = np.empty((T + 1, d))
        for t in range(T, -1, -1):
            path[t] = hist[t, j]
            j = anc[t, j]
    return FilterResult(loglik, means, path)


# -- particle marginal Metropolis-Hastings ----------------------------------------


class ParametricModel(Protocol):
    """A family of filter models indexed by a parameter vector with a uniform prior box."""

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    state_names: tuple[str, ...]

    def build(self, theta: np.ndarray) -> FilterModel: ...


def log_prior_box(pmodel, theta) -> float:
    theta = np.asarray(theta)
    if np.all(theta >= pmodel.lower) and np.all(theta <= pmodel.upper):
        extra = getattr(pmodel, "log_prior_extra", None)
        return -float(np.sum(np.log(pmodel.upper - pmodel.lower))) + (extra(theta) if extra else 0.0)
    return -math.inf


def run_filter(pmodel, theta, obs, n_particles, rng=None, T=None, noise=None, keep_path=False) -> FilterResult:
    """Use the model's compiled filter when it provides one."""
    fast = getattr(pmodel, "filter", None)
    if fast is not None:
        return fast(theta, obs, n_particles, rng=rng, T=T, noise=noise, keep_path=keep_path)
    return bootstrap_filter(pmodel.build(theta), obs, n_particles, rng, T=T, noise=noise, keep_path=keep_path)


@dataclass(frozen=True)
class PmcmcConfig:
    n_iter: int = 100_000
    n_burn: int = 50_000
    n_particles: int = 500
    adapt_start_accepts: int = 1000
    proposal_scale: float = 0.01
    seed: int = 0
    thin: int = 1
    stuck_window: int = 5000

    def __post_init__(self):
        if self.n_burn >= self.n_iter:
            raise ValueError("n_burn must be smaller than n_iter")
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not self.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")


def pmcmc_run(pmodel, obs: ObservationSeries, config: PmcmcConfig, init=None,
              T: int | None = None) -> PosteriorSamples:
    """Particle marginal MH with an adaptive multivariate normal random walk.

    Until ``adapt_start_accepts`` proposals have been accepted the proposal is
    diagonal with standard deviations ``proposal_scale * (upper - lower)``;
    afterwards it is 2.38^2/d times the running empirical covariance of the
    chain (plus a small ridge). Each kept draw carries one ancestral latent
    path from the filter run that produced its accepted likelihood estimate.
    """
    rng = np.random.default_rng(config.seed)
    lower, upper = np.asarray(pmodel.lower, float), np.asarray(pmodel.upper, float)
    dim = lower.size
    if T is None:
        T = int(obs.indices[-1]) if len(obs) else 0
    theta = 0.5 * (lower + upper) if init is None else np.asarray(init, dtype=float).copy()
    lp = log_prior_box(pmodel, theta)
    if not np.isfinite(lp):
        raise ValueError("initial parameters lie outside the prior box")
    res = run_filter(pmodel, theta, obs, config.n_particles, rng, T=T, keep_path=True)
    ll, path = res.loglik, res.path

    base_sd = config.proposal_scale * (upper - lower)
    chol = np.diag(base_sd)
    mean = theta.copy()
    cov = np.diag(base_sd**2)
    n_seen = 1
    accepts = 0
    adaptive = False
    since_accept = 0
    stuck = False
    ridge = 1e-10 * (upper - lower) ** 2
    sd_scale = 2.38**2 / dim

    n_keep = len(range(0, config.n_iter - config.n_burn, config.thin))
    out = np.empty((n_keep, dim))
    paths = np.empty((n_keep, T + 1, path.shape[1]))
    lls = np.empty(n_keep)
    pos = 0
    post_accepts = 0
    for it in range(config.n_iter):
        prop = theta + chol @ rng.standard_normal(dim)
        lp_new = log_prior_box(pmodel, prop)
        u = rng.random()
        ok = False
        if np.isfinite(lp_new):
            try:
                r = run_filter(pmodel, prop, obs, config.n_particles, rng, T=T, keep_path=True)
            except (ParticleDegeneracyError, ArithmeticError, ValueError):
                r = None
            if r is not None and np.isfinite(r.loglik) and math.log(u) < (r.loglik + lp_new) - (ll + lp):
                theta, ll, lp, path = prop, r.loglik, lp_new, r.path
                ok = True
        if ok:
            accepts += 1
            since_accept = 0
        else:
            since_accept += 1
            if since_accept >= config.stuck_window and not stuck:
                stuck = True
                log.warning("pMCMC: no acceptance in %d iterations (it=%d)", since_accept, it)
        # recursive mean/covariance of the chain
        n_seen += 1
        delta = theta - mean
        mean += delta / n_seen
        cov += (np.outer(delta, theta - mean) - cov) / n_seen
        if accepts >= config.adapt_start_accepts:
            adaptive = True
        if adaptive:
            try:
                chol = np.linalg.cholesky(sd_scale * cov + np.diag(ridge))
            except np.linalg.LinAlgError:
                pass
        if it >= config.n_burn and (it - config.n_burn) % config.thin == 0:
            out[pos] = theta
            paths[pos] = path
            lls[pos] = ll
            pos += 1
            post_accepts += ok
    diagnostics = {
        "acceptance": accepts / config.n_iter,
        "acceptance_post_burn": post_accepts / max(pos, 1),
        "adaptive_from_accepts": config.adapt_start_accepts,
        "adaptive_reached": adaptive,
        "stuck_warning": stuck,
        "ess": {n: effective_sample_size(out[:, j]) for j, n in enumerate(pmodel.names)},
        "loglik_mean": float(np.mean(lls)),
        "config": asdict(config),
        "seed": config.seed,
        "T": T,
    }
    return PosteriorSamples(getattr(pmodel, "kind", None), out, paths, diagnostics,
                            tuple(pmodel.names), tuple(pmodel.state_names))


def init_search(pmodel, obs: ObservationSeries, budget: int, rng: np.random.Generator,
                n_particles: int = 50, T: int | None = None, include_midpoint: bool = True,
                n_refine: int = 0, refine_evals: int = 200):
    """Latin-hypercube multi-start search for a high-likelihood starting point.

    Candidates are scored by a low-particle filter. All evaluations share one
    set of filter random inputs, so comparisons are not blurred by Monte Carlo
    noise. With budget >= 2 the prior midpoint is one of the candidates. The
    best ``n_refine`` candidates are then polished by Nelder-Mead in logit
    coordinates of the prior box. Returns (theta, loglik).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    lower, upper = np.asarray(pmodel.lower, float), np.asarray(pmodel.upper, float)
    if T is None:
        T = int(obs.indices[-1]) if len(obs) else 0
    dim = lower.size
    n_lhs = budget - 1 if (include_midpoint and budget >= 2) else budget
    sampler = qmc.LatinHypercube(d=dim, seed=rng)
    cands = qmc.scale(sampler.random(n_lhs), lower, upper)
    if n_lhs < budget:
        cands = np.vstack([0.5 * (lower + upper), cands])
    noise = FilterNoise.draw(rng, T, n_particles, len(pmodel.state_names))

    def score(theta) -> float:
        try:
            ll = run_filter(pmodel, theta, obs, n_particles, T=T, noise=noise).loglik
        except (ParticleDegeneracyError, ArithmeticError, ValueError):
            return -math.inf
        return ll if math.isfinite(ll) else -math.inf

    scores = np.array([score(th) for th in cands])
    if not np.any(np.isfinite(scores)):
        raise ParticleDegeneracyError(-1)
    order = np.argsort(-scores, kind="stable")
    best_i = int(order[0])
    best, best_ll = cands[best_i], float(scores[best_i])
    width = upper - lower
    eps = 1e-6

    def to_box(x):
        return lower + width * expit(x)

    for i in order[:n_refine]:
        if not np.isfinite(scores[i]):
            break
        p0 = np.clip((cands[i] - lower) / width, eps, 1 - eps)
        res = minimize(lambda x: -score(to_box(x)), logit(p0), method="Nelder-Mead",
                       options={"maxfev": refine_evals, "xatol": 1e-3, "fatol": 1e-3})
        if -res.fun > best_ll:
            best, best_ll = to_box(res.x), float(-res.fun)
    return best, best_ll
