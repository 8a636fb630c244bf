import numpy as np
import pytest

from lnssm.demo import DemoConfig, fan_chart, log_moments, run_demo, simulate_paths


def test_martingale_one_step_moments():
    cfg = DemoConfig(n_paths=400_000, steps=1)
    x = simulate_paths("martingale", "lognormal", 2.0, cfg, np.random.default_rng(0))[:, 1]
    assert x.mean() == pytest.approx(2.0, abs=4 * 1 / np.sqrt(x.size))
    assert x.var() == pytest.approx(1.0, rel=0.05)


def test_decay_log_moments():
    mu, v = log_moments("decay", np.array([4.0]), DemoConfig(sigma2=1.0, a=0.05))
    assert mu[0] == pytest.approx(np.log(4.0) - 0.05)
    assert v[0] == pytest.approx(2 * np.log(1.25))
    with pytest.raises(ValueError):
        log_moments("other", np.array([1.0]), DemoConfig())


def test_lognormal_paths_never_negative():
    for system in ("martingale", "decay"):
        p = simulate_paths(system, "lognormal", 2.0, DemoConfig(n_paths=5000), np.random.default_rng(1))
        assert np.all(p >= 0)
    with pytest.raises(ValueError):
        simulate_paths("martingale", "cauchy", 2.0, DemoConfig(n_paths=10), np.random.default_rng(0))


def test_fan_chart_ordering():
    p = simulate_paths("martingale", "gaussian", 50.0, DemoConfig(n_paths=4000), np.random.default_rng(2))
    b = fan_chart(p)
    assert b.shape == (11, 3)
    assert np.all(b[:, 0] <= b[:, 1]) and np.all(b[:, 1] <= b[:, 2])
    # the Gaussian martingale band widens like sqrt(h)
    assert b[10, 2] - b[10, 0] == pytest.approx(2 * 1.96 * np.sqrt(10), rel=0.1)


def test_run_demo_writes_panels(tmp_path):
    panels = run_demo(tmp_path, np.random.default_rng(0), DemoConfig(n_paths=1000))
    assert len(panels) == 8
    assert (tmp_path / "demo_decay_x0_50_lognormal.csv").exists()
