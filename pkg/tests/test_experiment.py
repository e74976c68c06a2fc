from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from nmadetect.detect import DetectionThresholds
from nmadetect.experiment import (
    ExperimentConfig,
    _checkpoint_path,
    _read_rows,
    aggregate,
    run_experiment,
)
from nmadetect.mcmc import SamplerConfig

FAST_MCMC = SamplerConfig(iterations=3000, burn_in=1000, chains=2, thin=1, seed=0)


def _cfg(tmp_path, **kw):
    defaults = dict(
        scenario_ids=(25,),  # poorly-connected, tau2=0, one outlier: fast
        output_dir=tmp_path / "out",
        replications=3,
        mcmc=FAST_MCMC,
        seed=7,
        threads=1,
        parts=("table1",),
        max_ppp_draws=2000,
        min_reps_note=None,
    )
    defaults.pop("min_reps_note")
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(scenario_ids=(), output_dir=tmp_path)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario_ids=(1,), output_dir=tmp_path, replications=0)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario_ids=(1,), output_dir=tmp_path, parts=("tableX",))


def test_run_experiment_table1_and_outputs(tmp_path):
    cfg = _cfg(tmp_path)
    result = run_experiment(cfg)
    assert len(result.table1) == 1
    row = result.table1_row(25, "single")
    assert row["tau2"] == 0.0
    assert 0.0 <= row["mean_p_L"] <= 1.0
    assert row["mean_bf"] > 0
    out = cfg.output_dir
    assert (out / "table1.csv").exists()
    assert (out / "table2.csv").exists()
    assert (out / "bias.csv").exists()
    assert (out / "runlog.json").exists()
    with open(out / "table1.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scenario", "tau2", "outlier_slot", "mean_bf",
                       "mean_p_L", "mean_p_SDO", "mean_p_G"]
    assert len(rows) == 2


def test_checkpoints_match_aggregates_exactly(tmp_path):
    """Aggregation sanity: recomputing the table from checkpoint files by hand
    reproduces the emitted result exactly."""
    cfg = _cfg(tmp_path)
    result = run_experiment(cfg)
    logs, pls = [], []
    for rep in range(cfg.replications):
        rows = _read_rows(_checkpoint_path(cfg.output_dir, 25, "contaminated", rep))
        vals = {(k1, k2): v for k1, k2, v in rows}
        if any(k1 == "error" for k1, _, _ in rows):
            continue
        logs.append(float(vals[("slot_bf_log", "1")]))
        pls.append(float(vals[("slot_p_L", "1")]))
    row = result.table1_row(25, "single")
    assert row["mean_p_L"] == float(np.mean(pls))
    expect_bf = math.exp(
        float(np.log(np.sum(np.exp(np.array(logs) - max(logs))))) + max(logs)
        - math.log(len(logs)))
    assert row["mean_bf"] == pytest.approx(expect_bf, rel=1e-12)


def test_resume_invariance(tmp_path):
    """Interrupted-then-resumed runs produce identical aggregates."""
    cfg_a = _cfg(tmp_path, output_dir=tmp_path / "a", replications=4)
    res_a = run_experiment(cfg_a)

    cfg_b2 = _cfg(tmp_path, output_dir=tmp_path / "b", replications=2)
    run_experiment(cfg_b2)
    cfg_b4 = _cfg(tmp_path, output_dir=tmp_path / "b", replications=4)
    res_b = run_experiment(cfg_b4)
    assert res_a.table1 == res_b.table1
    assert (tmp_path / "a" / "table1.csv").read_text() == \
        (tmp_path / "b" / "table1.csv").read_text()


def test_parallel_equals_serial(tmp_path):
    res1 = run_experiment(_cfg(tmp_path, output_dir=tmp_path / "serial", replications=2))
    res2 = run_experiment(_cfg(tmp_path, output_dir=tmp_path / "par", replications=2,
                               threads=2))
    assert res1.table1 == res2.table1


def test_null_runs_produce_fp_columns(tmp_path):
    cfg = _cfg(tmp_path, parts=("table2",), replications=2,
               mcmc=SamplerConfig(iterations=3000, burn_in=1000, chains=2, seed=0))
    result = run_experiment(cfg)
    assert len(result.table2) == 1
    row = result.table2_row(25)
    for key in ("fp_bf", "fp_pL", "fp_pSDO", "fp_pG"):
        assert 0.0 <= row[key] <= 1.0
    assert row["design"] == "unbalanced_poor_15"


def test_bias_part_records_contrasts(tmp_path):
    cfg = _cfg(tmp_path, parts=("table1", "bias"), replications=2)
    result = run_experiment(cfg)
    assert result.bias, "bias rows missing"
    keys = {row["contrast"] for row in result.bias if row["scenario"] == 25}
    assert len(keys) == 10  # all pairs of 5 treatments
    assert 25 in result.bias_win_fraction
    with open(cfg.output_dir / "bias.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scenario", "contrast", "bias_plain", "bias_downweighted"]


def test_failures_are_counted_not_averaged(tmp_path):
    cfg = _cfg(tmp_path, replications=2)
    run_experiment(cfg)
    # poison one checkpoint with an error row and re-aggregate
    path = _checkpoint_path(cfg.output_dir, 25, "contaminated", 0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "key", "value"])
        writer.writerow(["meta", "scenario", "25"])
        writer.writerow(["error", "RuntimeError", "synthetic failure"])
    result = aggregate(cfg)
    assert result.completed["s25_contaminated"] == 1
    assert len(result.failures["s25_contaminated"]) == 1
    assert not math.isnan(result.table1_row(25, "single")["mean_p_L"])


def test_runlog_reports_failures(tmp_path):
    cfg = _cfg(tmp_path, replications=2)
    result = run_experiment(cfg)
    log = json.loads((cfg.output_dir / "runlog.json").read_text())
    assert log["completed"] == result.completed
    assert log["config"]["replications"] == 2
