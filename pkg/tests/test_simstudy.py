import json
import math

import numpy as np
import pytest

from lnssm.mcmc import McmcConfig
from lnssm.models import ModelKind
from lnssm.simstudy import (
    CellResult,
    StudyDesign,
    StudyResult,
    TABLE2,
    aggregate,
    generate_datasets,
    run_cell,
    run_study,
    worker_count,
    write_study,
)

TINY = StudyDesign(generators=("LGD", "LMRC"), fitters=("LGD", "LMRC"), n_datasets=2, series_length=60,
                   initial_window=40, n_windows=2, mcmc=McmcConfig(n_iter=600, n_burn=100, n_adapt=100), seed=3)


def test_window_arithmetic_paper_scale():
    d = StudyDesign.paper()
    assert d.fit_end(1) == 365
    assert d.fit_end(2) == 372
    assert d.windows == 30
    assert d.fit_end(d.windows) + d.horizon == 575


def test_design_validation_and_dict_roundtrip():
    with pytest.raises(ValueError):
        StudyDesign(series_length=100, initial_window=95)
    with pytest.raises(ValueError):
        StudyDesign(scenarios=("other",))
    with pytest.raises(ValueError):
        StudyDesign.from_dict({"bogus": 1})
    d = StudyDesign.from_dict({"n_datasets": 2, "mcmc": {"n_iter": 1900}}, StudyDesign.desk())
    assert d.n_datasets == 2 and d.mcmc.n_iter == 1900 and d.mcmc.n_burn == 500
    assert StudyDesign.from_dict(json.loads(json.dumps(d.to_dict())) | {"mcmc": {}}, d).generators == d.generators


def test_generate_datasets_deterministic_positive():
    a = generate_datasets(TINY)
    b = generate_datasets(TINY)
    assert len(a) == 4
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.observations.values, y.observations.values)
        assert np.all(x.observations.values > 0) and len(x.observations) == 60
    # distinct datasets get distinct streams
    assert not np.array_equal(a[0].observations.values, a[1].observations.values)
    lmrc = [d for d in a if d.generator == "LMRC"][0]
    assert lmrc.truth == TABLE2[ModelKind.LMRC]


def test_run_cell_window_and_scenarios():
    ds = generate_datasets(TINY)[0]
    fixed = run_cell(ds, "LGD", "tau_fixed", 1, TINY)
    est = run_cell(ds, "LGD", "tau_estimated", 1, TINY)
    assert fixed.ok and est.ok
    assert fixed.tau_hpd is None and est.tau_hpd is not None
    assert math.isfinite(fixed.crps) and math.isfinite(fixed.ign)
    assert fixed.phi_hpd[0] <= fixed.phi_hpd[1]
    with pytest.raises(ValueError):
        run_cell(ds, "LGD", "tau_fixed", 4, TINY)


def test_run_cell_failure_is_recorded(monkeypatch):
    import lnssm.simstudy as ss
    from lnssm.models import NumericError

    def boom(*a, **k):
        raise NumericError("chain diverged")

    monkeypatch.setattr(ss, "run_chain", boom)
    res = run_cell(generate_datasets(TINY)[0], "LMRC", "tau_estimated", 1, TINY)
    assert not res.ok
    assert res.reason == "NumericError: chain diverged"
    assert math.isnan(res.crps)


def test_study_grid_and_outputs(tmp_path):
    result = run_study(TINY, workers=1)
    assert len(result.cells) == 2 * 2 * 2 * 2 * 2
    again = run_study(TINY, workers=1)
    assert [c.crps for c in result.cells] == [c.crps for c in again.cells]
    report = aggregate(result)
    assert set(report.tables) == {"tau_fixed", "tau_estimated"}
    assert {t.name for t in report.ttests} <= {"LGD:crps", "LGD:ign", "LMRC:crps", "LMRC:ign"}
    out = write_study(result, report, tmp_path, config_echo={"n_datasets": 2})
    for name in ("scores.csv", "coverage.csv", "ttests.csv", "manifest.json", "score_table_tau_fixed.csv"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["cells"] == 32
    assert manifest["config"] == {"n_datasets": 2}


def test_parallel_matches_serial():
    small = StudyDesign(**{**TINY.__dict__, "generators": ("LGD",), "fitters": ("LGD",), "n_windows": 1})
    a = run_study(small, workers=1)
    b = run_study(small, workers=2)
    assert [c.crps for c in a.cells] == [c.crps for c in b.cells]


def test_aggregate_trivial_cases():
    design = StudyDesign(generators=("LGC",), fitters=("LGC",), scenarios=("tau_fixed",), n_datasets=1,
                         series_length=60, initial_window=40, n_windows=1)
    cell = CellResult("LGC", 0, "LGC", "tau_fixed", 1, crps=0.4, ign=1.1, phi_hpd=(0.0, 100.0))
    failed = CellResult("LGC", 0, "LGC", "tau_fixed", 2, status="failed", reason="x")
    rep = aggregate(StudyResult(design, [cell, failed], {"LGC": TABLE2[ModelKind.LGC]}))
    assert rep.tables["tau_fixed"].mean("LGC", "LGC", "crps") == 0.4
    assert rep.coverage[0]["coverage"] == 1.0
    assert rep.failures == {("LGC", "LGC", "tau_fixed"): 1}
    assert rep.pooled_phi_coverage("tau_fixed") == 1.0


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("LNSSM_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.delenv("LNSSM_THREADS")
    assert worker_count() >= 1
