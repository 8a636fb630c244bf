import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lnssm.scoring import (
    ScoreTable,
    ScoringError,
    coverage,
    crps_sample,
    hpd_interval,
    holm_adjust,
    ign_sample,
    paired_t_holm,
)


def t3_two_sided_p(t):
    # closed-form Student t CDF with 3 degrees of freedom
    x = abs(t)
    cdf = 0.5 + (x / (math.sqrt(3) * (1 + x * x / 3)) + math.atan(x / math.sqrt(3))) / math.pi
    return 2 * (1 - cdf)


@pytest.mark.parametrize(
    "ens,y,expected",
    [
        ([1.0, 2.0, 3.0], 2.0, 2.0 / 9.0),
        ([0.0, 0.0], 1.0, 1.0),
        ([1.0, 3.0], 0.0, 1.5),
        ([5.0, 5.0, 5.0], 5.0, 0.0),
        ([0.0, 1.0], 0.5, 0.25),
    ],
)
def test_crps_hand_examples(ens, y, expected):
    assert crps_sample(ens, y) == pytest.approx(expected, abs=1e-15)


def brute_crps(x, y):
    x = np.asarray(x)
    return np.mean(np.abs(x - y)) - 0.5 * np.mean(np.abs(x[:, None] - x[None, :]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.floats(-100, 100))
def test_crps_matches_pairwise_definition(ens, y):
    assert crps_sample(ens, y) == pytest.approx(max(brute_crps(ens, y), 0.0), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=20), st.floats(-10, 10), st.floats(-5, 5))
def test_crps_translation_invariant(ens, y, c):
    shifted = [e + c for e in ens]
    assert crps_sample(shifted, y + c) == pytest.approx(crps_sample(ens, y), abs=1e-8)


def test_crps_errors():
    with pytest.raises(ScoringError):
        crps_sample([1.0], 0.0)
    with pytest.raises(ScoringError):
        crps_sample([1.0, math.nan], 0.0)


def test_ign_standard_normal():
    x = np.random.default_rng(0).standard_normal(200_000)
    assert ign_sample(x, 0.0) == pytest.approx(0.5 * math.log(2 * math.pi), abs=0.02)


def test_ign_fixed_bandwidth_two_points():
    # density at 0 of 0.5 N(-1, 1) + 0.5 N(1, 1)
    expected = -math.log(math.exp(-0.5) / math.sqrt(2 * math.pi))
    assert ign_sample([-1.0, 1.0], 0.0, bandwidth_rule=1.0) == pytest.approx(expected, rel=1e-12)


def test_ign_log_scale_jacobian():
    x = np.exp(np.random.default_rng(1).standard_normal(100_000))
    # lognormal density at 1 is the standard normal density at 0
    assert ign_sample(x, 1.0, log_scale=True) == pytest.approx(0.9189, abs=0.03)
    with pytest.raises(ScoringError):
        ign_sample(x, -1.0, log_scale=True)


def test_ign_errors():
    with pytest.raises(ScoringError):
        ign_sample([2.0, 2.0], 1.0)
    # far tails stay finite because the KDE is evaluated in log space
    assert math.isfinite(ign_sample([0.0, 1.0], 1e6, bandwidth_rule=1e-3))


def test_hpd_hand_examples():
    assert hpd_interval([1, 2, 3, 4, 100], 0.8) == (1.0, 4.0)
    assert hpd_interval([0, 10, 11, 12, 13], 0.8) == (10.0, 13.0)
    # ties resolve to the lowest start
    assert hpd_interval([0, 1, 2, 3], 0.5) == (0.0, 1.0)
    assert hpd_interval([5.0], 0.95) == (5.0, 5.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(0.05, 1.0))
def test_hpd_contains_required_mass(xs, level):
    lo, hi = hpd_interval(xs, level)
    inside = sum(lo <= x <= hi for x in xs)
    assert inside >= math.ceil(level * len(xs) - 1e-9)
    assert lo <= hi


def test_coverage():
    assert coverage([(0, 1), (2, 3)], 0.5) == 0.5
    assert coverage([(0, 1), (0, 2)], 0.5) == 1.0
    with pytest.raises(ScoringError):
        coverage([], 0.0)


def test_holm_hand_example():
    np.testing.assert_allclose(holm_adjust([0.01, 0.04, 0.03]), [0.03, 0.06, 0.06])
    np.testing.assert_allclose(holm_adjust([0.5, 0.6]), [1.0, 1.0])


def test_paired_t_holm_hand_example():
    res = paired_t_holm({"x": ([1, 2, 3, 4], [0, 2, 1, 1]), "y": ([1, 2, 3, 4], [1, 2, 3, 5])})
    rx, ry = res
    # d = (1, 0, 2, 3): mean 1.5, sd sqrt(5/3)
    t = 1.5 / (math.sqrt(5 / 3) / 2)
    assert rx.t == pytest.approx(t, rel=1e-12)
    assert rx.p_raw == pytest.approx(t3_two_sided_p(t), rel=1e-9)
    # d = (0, 0, 0, -1): t = -1
    assert ry.t == pytest.approx(-1.0, rel=1e-12)
    assert ry.p_raw == pytest.approx(t3_two_sided_p(1.0), rel=1e-9)
    assert rx.p_adjusted == pytest.approx(min(1, 2 * rx.p_raw), rel=1e-9)
    assert ry.p_adjusted == pytest.approx(max(rx.p_adjusted, ry.p_raw), rel=1e-9)
    assert not rx.significant and not ry.significant


def test_paired_t_errors():
    with pytest.raises(ScoringError):
        paired_t_holm({"a": ([1, 2], [1, 2, 3])})
    with pytest.raises(ScoringError):
        paired_t_holm({"a": ([1, 2], [0, 1])})


def test_score_table(tmp_path):
    tb = ScoreTable()
    tb.add("LGC", "LGC", crps=1.0, ign=2.0)
    tb.add("LGC", "LGC", crps=3.0, ign=2.0)
    tb.add("LGC", "LMRC", crps=1.5, ign=1.0)
    tb.add("LGC", "Gompertz", crps=5.0, ign=1.0)
    assert tb.mean("LGC", "LGC", "crps") == 2.0
    assert tb.count("LGC", "LGC") == 2
    assert tb.ranking("LGC", "crps") == ["LMRC", "LGC", "Gompertz"]
    tb.write_csv(tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text()
    assert "1.5 (lowest)" in text and "2 (second)" in text
    tb.write_json(tmp_path / "t.json")


def test_single_cell_table_equals_cell():
    tb = ScoreTable()
    tb.add("MoranRicker", "LGD", crps=0.7, ign=1.3)
    assert tb.mean("MoranRicker", "LGD", "crps") == 0.7
    assert tb.mean("MoranRicker", "LGD", "ign") == 1.3
