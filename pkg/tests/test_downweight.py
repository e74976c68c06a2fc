from __future__ import annotations

import math

import numpy as np
import pytest

from nmadetect.data import Arm, DatasetError, NetworkDataset, Study
from nmadetect.downweight import (
    ComparisonSummary,
    Estimate,
    downweighted_fit,
    exclusion_fit,
    parse_plan,
    relative_bias,
    standard_fit,
    summarize,
    write_forest_csv,
    write_summary_json,
)
from nmadetect.mcmc import SamplerConfig, sample
from nmadetect.model import DownweightPlan, ModelSpec


def _toy_network():
    rng = np.random.default_rng(3)
    studies = []
    for i in range(1, 7):
        pair = [(1, 2), (1, 3), (2, 3)][i % 3]
        studies.append(Study(id=str(i), arms=(
            Arm(pair[0], int(rng.integers(8, 25)), 60),
            Arm(pair[1], int(rng.integers(8, 25)), 60),
        )))
    # make study 6 wildly divergent
    studies[5] = Study(id="6", arms=(Arm(2, 3, 60), Arm(3, 52, 60)))
    return NetworkDataset(tuple(studies), num_treatments=3)


def test_plan_validation_and_presets():
    assert DownweightPlan.preset("moderate") == (3.0, 3.0)
    assert DownweightPlan.preset("severe") == (2.0, 5.0)
    with pytest.raises(ValueError):
        DownweightPlan.preset("gentle")
    with pytest.raises(ValueError):
        DownweightPlan({"1": (0.0, 2.0)})


def test_parse_plan():
    plan = parse_plan("study3=moderate, 5=severe,7=2:5.5")
    assert plan.entries == {"3": (3.0, 3.0), "5": (2.0, 5.0), "7": (2.0, 5.5)}
    with pytest.raises(ValueError):
        parse_plan("")
    with pytest.raises(ValueError):
        parse_plan("3~moderate")


def test_estimate_invariant():
    with pytest.raises(ValueError):
        Estimate(median=1.0, ci_low=1.5, ci_high=2.0)


def test_summarize_or_antisymmetry(fast_cfg):
    ds = _toy_network()
    samples, summary = standard_fit(ds, fast_cfg)
    for (h, k), est in summary.pairs.items():
        inv = summary.odds_ratio(k, h)
        assert est.median * inv.median == pytest.approx(1.0, rel=1e-12)
        assert est.ci_low <= est.median <= est.ci_high
    # derived from the same theta draws: OR(2,3) = OR(1,3)/OR(1,2) per draw
    theta = samples.theta.reshape(-1, 2)
    or23 = float(np.percentile(np.exp(theta[:, 1] - theta[:, 0]), 50.0))
    assert summary.pairs[(2, 3)].median == pytest.approx(or23, rel=1e-12)


def test_downweighted_w_limits_recover_full_and_exclusion():
    ds = _toy_network()
    cfg = SamplerConfig(iterations=8000, burn_in=2000, chains=2, seed=5)
    _, full = standard_fit(ds, cfg)
    _, ex = exclusion_fit(ds, ["6"], cfg)
    _, dw1 = downweighted_fit(ds, DownweightPlan({"6": (1e6, 1.0)}), cfg)
    _, dw0 = downweighted_fit(ds, DownweightPlan({"6": (1.0, 1e6)}), cfg)
    assert dw1.tau2.median == pytest.approx(full.tau2.median, abs=0.2)
    assert math.log(dw1.pairs[(1, 3)].median) == pytest.approx(
        math.log(full.pairs[(1, 3)].median), abs=0.15)
    assert dw0.tau2.median == pytest.approx(ex.tau2.median, abs=0.2)
    assert math.log(dw0.pairs[(1, 3)].median) == pytest.approx(
        math.log(ex.pairs[(1, 3)].median), abs=0.15)


def test_downweight_shrinks_outlier_weight():
    """The divergent study's weight posterior sits below its Beta(3,3) prior
    mean."""
    ds = _toy_network()
    cfg = SamplerConfig(iterations=8000, burn_in=2000, chains=2, seed=9)
    _, summary = downweighted_fit(ds, DownweightPlan({"6": (3.0, 3.0)}), cfg)
    assert summary.weights["6"].median < 0.5


def test_exclusion_fit_matches_subset_fit(fast_cfg):
    ds = _toy_network()
    _, ex = exclusion_fit(ds, ["6"], fast_cfg)
    reduced = ds.without_studies({"6"})
    direct = summarize(sample(reduced, ModelSpec.standard(), fast_cfg))
    assert ex.tau2.median == pytest.approx(direct.tau2.median, rel=1e-12)


def test_exclusion_errors():
    ds = _toy_network()
    cfg = SamplerConfig(iterations=1000, burn_in=100, chains=1, seed=0)
    with pytest.raises(DatasetError, match="disconnects|removes all"):
        # removing every study touching treatment 3 strands it
        exclusion_fit(ds, ["2", "3", "5", "6"], cfg)
    bridge = NetworkDataset(
        (
            Study(id="1", arms=(Arm(1, 5, 20), Arm(2, 8, 20))),
            Study(id="2", arms=(Arm(2, 5, 20), Arm(3, 8, 20))),
            Study(id="3", arms=(Arm(3, 5, 20), Arm(4, 8, 20))),
        ),
        num_treatments=4,
    )
    with pytest.raises(DatasetError):
        exclusion_fit(bridge, ["2"], cfg)
    with pytest.raises(KeyError):
        exclusion_fit(ds, ["99"], cfg)


def test_relative_bias_values_and_zero_truth_flag():
    truth = np.array([0.5, 1.0])
    est = {(1, 2): 0.55, (1, 3): 1.0, (2, 3): 0.5}
    out = relative_bias(est, truth)
    assert out[(1, 2)].value == pytest.approx(0.1)
    assert not out[(1, 2)].absolute
    assert out[(1, 3)].value == pytest.approx(0.0)
    assert out[(2, 3)].value == pytest.approx(0.0)
    # zero-truth contrast switches to absolute bias
    truth0 = np.array([0.0, 1.0])
    out0 = relative_bias({(1, 2): 0.2}, truth0)
    assert out0[(1, 2)].absolute
    assert out0[(1, 2)].value == pytest.approx(0.2)


def test_relative_bias_accepts_summary(fast_cfg):
    ds = _toy_network()
    _, summary = standard_fit(ds, fast_cfg)
    out = relative_bias(summary, np.array([0.3, 0.6]))
    assert set(out) == {(1, 2), (1, 3), (2, 3)}


def test_forest_csv_and_json(tmp_path, fast_cfg):
    ds = _toy_network()
    _, full = standard_fit(ds, fast_cfg)
    _, dw = downweighted_fit(ds, DownweightPlan({"6": (3.0, 3.0)}), fast_cfg)
    csv_path = tmp_path / "forest.csv"
    write_forest_csv(csv_path, {"full": full, "downweighted": dw})
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "contrast,analysis,or_median,ci_low,ci_high"
    assert len(lines) == 1 + 2 * len(full.pairs)
    json_path = tmp_path / "summary.json"
    write_summary_json(json_path, {"full": full, "downweighted": dw})
    import json

    doc = json.loads(json_path.read_text())
    assert set(doc) == {"full", "downweighted"}
    assert doc["downweighted"]["weights"]["6"]["median"] < 1.0
