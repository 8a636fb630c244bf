import math

import numpy as np
import pytest

from lnssm.mcmc import (
    McmcConfig,
    PosteriorSamples,
    PriorSet,
    Scenario,
    effective_sample_size,
    forecast,
    gibbs_latent_gompertz,
    mc_standard_error,
    mh_latent_block,
    run_chain,
    update_static_params,
    _obs_arrays,
)
from lnssm.models import ModelKind, ModelParams, Trajectory, fixed_point, simulate
from lnssm.simstudy import TABLE2

SMALL = McmcConfig(n_iter=1500, n_burn=300, n_adapt=300, seed=1)


def small_data(kind=ModelKind.Gompertz, T=40, seed=0, params=None):
    p = params or TABLE2[kind]
    x0 = fixed_point(kind, p)
    return simulate(kind, p, x0, T, None, np.random.default_rng(seed)), x0


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(n_iter=100, n_burn=60, n_adapt=40)
    with pytest.raises(ValueError):
        McmcConfig(latent_sampler="hmc")
    assert McmcConfig(n_iter=100, n_burn=10, n_adapt=10, thin=3).n_kept == 27


def test_prior_for_kind():
    assert PriorSet.for_kind(ModelKind.LGC).a_bounds == (0.0, 10.0)
    assert PriorSet.for_kind(ModelKind.LGD).a_bounds == (-10.0, 10.0)
    pr = PriorSet.for_kind(ModelKind.Gompertz)
    assert pr.log_prior(ModelParams(11.0, 0.0, 1.0, 1.0)) == -math.inf
    fixed = ModelParams(0.0, 0.0, 1.0, 1e9, obs_prec_fixed=True)
    assert math.isfinite(pr.log_prior(fixed))


def test_ess_iid_and_ar1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20_000)
    assert effective_sample_size(x) == pytest.approx(20_000, rel=0.1)
    y = np.empty(20_000)
    y[0] = 0
    for i in range(1, y.size):
        y[i] = 0.9 * y[i - 1] + x[i]
    # AR(1) with rho = 0.9 has ESS n (1 - rho) / (1 + rho)
    assert effective_sample_size(y) == pytest.approx(20_000 * 0.1 / 1.9, rel=0.3)
    assert effective_sample_size(np.ones(10)) == 10
    assert mc_standard_error(x) == pytest.approx(1 / math.sqrt(20_000), rel=0.1)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_run_chain_shapes_and_determinism(kind):
    (traj, obs), x0 = small_data(kind)
    pr = PriorSet.for_kind(kind, mu0=math.log(x0))
    a = run_chain(kind, obs, pr, SMALL)
    b = run_chain(kind, obs, pr, SMALL)
    np.testing.assert_array_equal(a.params, b.params)
    assert a.params.shape == (SMALL.n_kept, 4)
    assert a.states.shape == (SMALL.n_kept, 41)
    assert np.all(a.states > 0)
    assert np.all(a.param("phi") > 0) and np.all(a.param("tau") > 0)
    lo, hi = pr.a_bounds
    assert np.all((a.param("a") >= lo) & (a.param("a") <= hi))
    acc = a.diagnostics["acceptance"]
    assert 0 < acc["ab"] < 1 and 0 < acc["phi"] < 1


def test_tau_fixed_stays_constant():
    (traj, obs), x0 = small_data(ModelKind.LGD)
    post = run_chain(ModelKind.LGD, obs, PriorSet.for_kind(ModelKind.LGD, math.log(x0)), SMALL,
                     Scenario.fixed(188.7))
    assert np.all(post.param("tau") == 188.7)
    assert "tau" not in post.diagnostics["ess"]
    assert post.diagnostics["acceptance"]["rescale"] is None


def test_gibbs_only_for_gompertz():
    (traj, obs), _ = small_data(ModelKind.LGC)
    with pytest.raises(ValueError):
        run_chain(ModelKind.LGC, obs, PriorSet.for_kind(ModelKind.LGC), McmcConfig(1000, 100, 100,
                                                                                      latent_sampler="gibbs"))


def test_posterior_roundtrip(tmp_path):
    (traj, obs), x0 = small_data()
    post = run_chain(ModelKind.Gompertz, obs, PriorSet.for_kind(ModelKind.Gompertz, math.log(x0)), SMALL)
    post.write(tmp_path / "p")
    back = PosteriorSamples.read(tmp_path / "p")
    assert back.kind is ModelKind.Gompertz
    np.testing.assert_array_equal(back.params, post.params)
    np.testing.assert_array_equal(back.states, post.states)
    assert back.diagnostics["seed"] == 1
    assert isinstance(back.trajectory(0), Trajectory)


def test_forecast_shape_and_positivity():
    (traj, obs), x0 = small_data(ModelKind.LMRD)
    post = run_chain(ModelKind.LMRD, obs, PriorSet.for_kind(ModelKind.LMRD, math.log(x0)), SMALL)
    f = forecast(post, 7, np.random.default_rng(0))
    assert f.shape == (SMALL.n_kept, 7)
    assert np.all(f > 0)
    with pytest.raises(ValueError):
        forecast(post, 0, np.random.default_rng(0))


def test_gibbs_sweep_zero_noise_limit():
    # With tiny process variance repeated sweeps converge onto the deterministic path.
    p = ModelParams(0.0, -0.5, 1e12, 1.0)
    D = np.zeros(6)
    F, has = np.zeros(6), np.zeros(6, dtype=bool)
    pr = PriorSet(init_mu0=1.0, init_prec0=1e12)
    rng = np.random.default_rng(0)
    first = gibbs_latent_gompertz(D, F, has, p, pr, rng)
    # D_0 | D_1 = 0 pools the prior (weight 1) with the transition (weight (1 + b)^2 = 0.25)
    assert first[0] == pytest.approx(0.8, abs=1e-5)
    D = first
    for _ in range(300):
        D = gibbs_latent_gompertz(D, F, has, p, pr, rng)
    np.testing.assert_allclose(D, 0.5 ** np.arange(6), atol=1e-4)


def test_mh_latent_small_step_accepts_everything():
    (traj, obs), x0 = small_data()
    p = TABLE2[ModelKind.Gompertz]
    new, acc = mh_latent_block(ModelKind.Gompertz, traj, obs, p, 1e-9, np.random.default_rng(0))
    assert acc >= traj.T  # T + 1 sites, rounding may reject at most one
    np.testing.assert_allclose(new.values, traj.values, rtol=1e-6)


def reference_chain(kind, obs, T, pr, n_iter, n_burn, seed, start):
    """Plain one-block-at-a-time sampler used as an independent check of run_chain."""
    rng = np.random.default_rng(seed)
    F, has = _obs_arrays(obs, T)
    D = np.interp(np.arange(T + 1), obs.indices, np.log(obs.values))
    X = np.exp(D)
    traj = Trajectory(X[1:], X[0])
    p = start
    out = []
    for it in range(n_iter):
        if kind == ModelKind.Gompertz:
            D = gibbs_latent_gompertz(np.log(np.concatenate(([traj.t0_value], traj.values))), F, has, p, pr, rng)
            X = np.exp(D)
            traj = Trajectory(X[1:], X[0])
        else:
            traj, _ = mh_latent_block(kind, traj, obs, p, 0.15, rng, pr)
        p = update_static_params(kind, traj, obs, p, pr, rng, scales=(0.05, 0.05, 0.3, 0.3))
        if it >= n_burn:
            out.append((p.a, p.b, p.proc_prec, p.obs_prec))
    return np.array(out)


@pytest.mark.slow
@pytest.mark.parametrize("kind,params", [
    (ModelKind.Gompertz, ModelParams(0.0, -0.3, 10.0, 20.0)),
    (ModelKind.LMRC, ModelParams(0.5, -0.25, 8.0, 8.0)),
])
def test_run_chain_matches_reference_sampler(kind, params):
    (traj, obs), _ = small_data(kind, T=30, seed=4, params=params)
    pr = PriorSet.for_kind(kind, mu0=math.log(fixed_point(kind, params)))
    ref = reference_chain(kind, obs, 30, pr, 60_000, 5_000, seed=9, start=params)
    fast = run_chain(kind, obs, pr, McmcConfig(80_000, 5_000, 5_000, seed=3)).params
    for j in range(4):
        # compare on the log scale for the heavy-tailed precisions
        r = np.log(ref[:, j]) if j >= 2 else ref[:, j]
        f = np.log(fast[:, j]) if j >= 2 else fast[:, j]
        se = math.hypot(mc_standard_error(r), mc_standard_error(f))
        assert abs(r.mean() - f.mean()) < 4 * se, (j, r.mean(), f.mean(), se)
