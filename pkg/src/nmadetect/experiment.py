"""Experiment orchestration: scenario sweeps, checkpointing, aggregation.

Every (scenario, replication, variant) task derives its RNG from
(master seed, scenario id, replication index), runs generate -> fit ->
detect (-> down-weight), and writes one flat CSV checkpoint atomically.
Aggregates are always recomputed from the checkpoint files, so interrupted
runs resume to byte-identical outputs and the emitted tables can be audited
against the checkpoints directly.  Replications that fail (e.g. sampler
diagnostics) are recorded and excluded from means, with counts in the run
log, never silently averaged over.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.special import logsumexp

from .detect import DetectionThresholds, _all_ppp_values, check_convergence
from .downweight import downweighted_fit, summarize
from .evidence import bayes_factor, derive_seed
from .mcmc import SamplerConfig, sample
from .model import DownweightPlan, ModelSpec, PriorConfig
from .simulate import SimScenario, generate, scenario_grid

DESK_MCMC = SamplerConfig(iterations=10_000, burn_in=2000, chains=2, thin=1, seed=0)
PAPER_MCMC = SamplerConfig(iterations=50_000, burn_in=10_000, chains=2, thin=1, seed=0)

PARTS = ("table1", "table2", "bias")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario_ids: tuple[int, ...]
    output_dir: Path
    replications: int = 50
    mcmc: SamplerConfig = DESK_MCMC
    thresholds: DetectionThresholds = DetectionThresholds()
    seed: int = 0
    threads: int = 1
    parts: tuple[str, ...] = PARTS
    severity: float = 3.0
    s_range: tuple[float, float] = (4.0, 12.25)
    bf_method: str = "savage_dickey"
    max_ppp_draws: int | None = 4000
    downweight_beta: tuple[float, float] = (3.0, 3.0)
    priors: PriorConfig = field(default_factory=PriorConfig)
    rhat_max: float = 1.1

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.scenario_ids:
            raise ValueError("at least one scenario id required")
        bad = set(self.parts) - set(PARTS)
        if bad:
            raise ValueError(f"unknown parts {sorted(bad)}; options: {PARTS}")
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        object.__setattr__(self, "scenario_ids", tuple(int(x) for x in self.scenario_ids))
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass
class ExperimentResult:
    table1: list[dict]
    table2: list[dict]
    bias: list[dict]
    bias_win_fraction: dict[int, float]
    completed: dict[str, int]
    failures: dict[str, list[str]]

    def table1_row(self, scenario_id: int, slot: str) -> dict:
        for row in self.table1:
            if row["scenario"] == scenario_id and row["outlier_slot"] == slot:
                return row
        raise KeyError((scenario_id, slot))

    def table2_row(self, scenario_id: int) -> dict:
        for row in self.table2:
            if row["scenario"] == scenario_id:
                return row
        raise KeyError(scenario_id)


def _scenario_by_id(cfg: ExperimentConfig, scenario_id: int) -> SimScenario:
    return scenario_grid(severity=cfg.severity, s_range=cfg.s_range)[scenario_id - 1]


def _checkpoint_path(out: Path, scenario_id: int, variant: str, rep: int) -> Path:
    return out / "checkpoints" / f"s{scenario_id:02d}_{variant}_r{rep:04d}.csv"


def _write_rows_atomic(path: Path, rows: list[tuple[str, str, str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "key", "value"])
        writer.writerows(rows)
    os.replace(tmp, path)


def _read_rows(path: Path) -> list[tuple[str, str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["kind", "key", "value"]:
            raise ValueError(f"{path}: bad checkpoint header {header}")
        return [(k, key, val) for k, key, val in reader]


def _pair_key(h: int, k: int) -> str:
    return f"{h}:{k}"


def _run_replication(payload: dict) -> tuple[str, str | None]:
    """Worker: compute one checkpoint file.  Returns (path, error-or-None)."""
    cfg: ExperimentConfig = payload["cfg"]
    scenario_id: int = payload["scenario_id"]
    rep: int = payload["rep"]
    variant: str = payload["variant"]
    path = _checkpoint_path(cfg.output_dir, scenario_id, variant, rep)
    if path.exists():
        return str(path), None

    base = _scenario_by_id(cfg, scenario_id)
    scen = replace(base, seed=derive_seed(cfg.seed, scenario_id, rep, 1))
    if variant == "null":
        scen = scen.null_variant()
    rows: list[tuple[str, str, str]] = [
        ("meta", "scenario", str(scenario_id)),
        ("meta", "rep", str(rep)),
        ("meta", "variant", variant),
        ("meta", "tau2", repr(base.tau2)),
        ("meta", "geometry", base.geometry),
    ]
    try:
        gen = generate(scen)
        ds = gen.dataset
        fit_cfg = replace(cfg.mcmc, seed=derive_seed(cfg.seed, scenario_id, rep, 2))
        samples = sample(ds, ModelSpec.standard(priors=cfg.priors), fit_cfg)
        check_convergence(samples, cfg.rhat_max)
        pvals = _all_ppp_values(ds, samples, seed=derive_seed(cfg.seed, scenario_id, rep, 3),
                                max_draws=cfg.max_ppp_draws)

        need_all_bfs = variant == "null" or "bias" in cfg.parts
        tested = [s.id for s in ds.studies] if need_all_bfs else list(gen.outlier_ids)
        bf_logs: dict[str, float] = {}
        for sid in tested:
            idx = ds.study_index(sid)
            bf_cfg = replace(cfg.mcmc,
                             seed=derive_seed(cfg.seed, scenario_id, rep, 4, idx))
            bf = bayes_factor(ds, sid, bf_cfg, method=cfg.bf_method, priors=cfg.priors)
            bf_logs[sid] = bf.log_value

        if variant == "null":
            thr = cfg.thresholds
            fp = {
                "bf": any(lv > math.log(thr.bf) for lv in bf_logs.values()),
                "p_L": any(p.value < thr.p for p in pvals["likelihood"].values()),
                "p_SDO": any(p.value < thr.p for p in pvals["sdo"].values()),
                "p_G": any(p.value < thr.p for p in pvals["gelman_chi2"].values()),
            }
            for method, hit in fp.items():
                rows.append(("fp", method, str(int(hit))))
        else:
            for j, sid in enumerate(gen.outlier_ids, start=1):
                rows.append(("slot_bf_log", str(j), repr(bf_logs[sid])))
                rows.append(("slot_p_L", str(j), repr(pvals["likelihood"][sid].value)))
                rows.append(("slot_p_SDO", str(j), repr(pvals["sdo"][sid].value)))
                rows.append(("slot_p_G", str(j), repr(pvals["gelman_chi2"][sid].value)))

            if "bias" in cfg.parts:
                thr = cfg.thresholds
                flagged = [
                    sid for sid in (s.id for s in ds.studies)
                    if bf_logs[sid] > math.log(thr.bf)
                    or min(pvals["likelihood"][sid].value, pvals["sdo"][sid].value,
                           pvals["gelman_chi2"][sid].value) < thr.p
                ]
                plain = summarize(samples)
                if flagged:
                    a, b = cfg.downweight_beta
                    plan = DownweightPlan({sid: (a, b) for sid in flagged})
                    dw_cfg = replace(cfg.mcmc,
                                     seed=derive_seed(cfg.seed, scenario_id, rep, 5))
                    _, dw = downweighted_fit(ds, plan, dw_cfg, priors=cfg.priors)
                else:
                    dw = plain
                truth_full = np.concatenate([[0.0], gen.truth])
                touched = set()
                for sid in gen.outlier_ids:
                    ts = ds.study(sid).treatments
                    for h in ts:
                        for k in ts:
                            if h < k:
                                touched.add((h, k))
                for (h, k), est in sorted(plain.pairs.items()):
                    key = _pair_key(h, k)
                    rows.append(("theta_true", key, repr(float(truth_full[k - 1] - truth_full[h - 1]))))
                    rows.append(("theta_plain", key, repr(math.log(est.median))))
                    rows.append(("theta_dw", key, repr(math.log(dw.pairs[(h, k)].median))))
                    rows.append(("touched", key, str(int((h, k) in touched))))
                rows.append(("meta", "flagged", ";".join(flagged)))
    except Exception as exc:  # noqa: BLE001 - per-replication failures are data
        rows.append(("error", type(exc).__name__, str(exc)[:500]))
    _write_rows_atomic(path, rows)
    return str(path), None


def _mean_bf_from_logs(logs: list[float]) -> float:
    if not logs:
        return math.nan
    log_mean = float(logsumexp(np.array(logs)) - math.log(len(logs)))
    try:
        return math.exp(log_mean)
    except OverflowError:
        return math.inf


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for sid in cfg.scenario_ids:
        base = _scenario_by_id(cfg, sid)
        for rep in range(cfg.replications):
            if ("table1" in cfg.parts or "bias" in cfg.parts) and base.num_outliers > 0:
                tasks.append({"cfg": cfg, "scenario_id": sid, "rep": rep,
                              "variant": "contaminated"})
            if "table2" in cfg.parts:
                tasks.append({"cfg": cfg, "scenario_id": sid, "rep": rep,
                              "variant": "null"})

    pending = [t for t in tasks
               if not _checkpoint_path(cfg.output_dir, t["scenario_id"], t["variant"],
                                       t["rep"]).exists()]
    if pending:
        if cfg.threads > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
                list(pool.map(_run_replication, pending))
        else:
            for t in pending:
                _run_replication(t)

    result = aggregate(cfg)
    write_outputs(cfg, result)
    return result


def aggregate(cfg: ExperimentConfig) -> ExperimentResult:
    """Build the result tables purely from checkpoint files."""
    table1: list[dict] = []
    table2: list[dict] = []
    bias: list[dict] = []
    bias_win: dict[int, float] = {}
    completed: dict[str, int] = {}
    failures: dict[str, list[str]] = {}

    for sid in cfg.scenario_ids:
        base = _scenario_by_id(cfg, sid)
        for variant in ("contaminated", "null"):
            if variant == "contaminated" and not (
                    ("table1" in cfg.parts or "bias" in cfg.parts) and base.num_outliers > 0):
                continue
            if variant == "null" and "table2" not in cfg.parts:
                continue
            per_rep = []
            fail_msgs = []
            for rep in range(cfg.replications):
                path = _checkpoint_path(cfg.output_dir, sid, variant, rep)
                if not path.exists():
                    continue
                rows = _read_rows(path)
                err = [f"rep {rep}: {key}: {val}" for kind, key, val in rows if kind == "error"]
                if err:
                    fail_msgs.extend(err)
                    continue
                per_rep.append(rows)
            tag = f"s{sid:02d}_{variant}"
            completed[tag] = len(per_rep)
            failures[tag] = fail_msgs

            if variant == "null":
                if per_rep:
                    fp_means = {}
                    for method in ("bf", "p_L", "p_SDO", "p_G"):
                        hits = [
                            int(val) for rows in per_rep
                            for kind, key, val in rows if kind == "fp" and key == method
                        ]
                        fp_means[method] = float(np.mean(hits)) if hits else math.nan
                    table2.append({
                        "scenario": sid, "design": base.geometry, "tau2": base.tau2,
                        "fp_bf": fp_means["bf"], "fp_pL": fp_means["p_L"],
                        "fp_pSDO": fp_means["p_SDO"], "fp_pG": fp_means["p_G"],
                    })
                continue

            if "table1" in cfg.parts and per_rep:
                for j in range(1, base.num_outliers + 1):
                    slot = str(j)
                    logs, pls, psdos, pgs = [], [], [], []
                    for rows in per_rep:
                        vals = {(kind, key): val for kind, key, val in rows}
                        if ("slot_bf_log", slot) in vals:
                            logs.append(float(vals[("slot_bf_log", slot)]))
                            pls.append(float(vals[("slot_p_L", slot)]))
                            psdos.append(float(vals[("slot_p_SDO", slot)]))
                            pgs.append(float(vals[("slot_p_G", slot)]))
                    table1.append({
                        "scenario": sid, "tau2": base.tau2,
                        "outlier_slot": "single" if base.num_outliers == 1 else slot,
                        "mean_bf": _mean_bf_from_logs(logs),
                        "mean_p_L": float(np.mean(pls)) if pls else math.nan,
                        "mean_p_SDO": float(np.mean(psdos)) if psdos else math.nan,
                        "mean_p_G": float(np.mean(pgs)) if pgs else math.nan,
                    })

            if "bias" in cfg.parts and per_rep:
                acc_plain: dict[str, list[float]] = {}
                acc_dw: dict[str, list[float]] = {}
                truth: dict[str, float] = {}
                touched_any: dict[str, bool] = {}
                wins = 0
                scored = 0
                for rows in per_rep:
                    vals: dict[tuple[str, str], str] = {(k1, k2): v for k1, k2, v in rows}
                    keys = [key for kind, key, _ in rows if kind == "theta_true"]
                    errs_plain, errs_dw = [], []
                    for key in keys:
                        t = float(vals[("theta_true", key)])
                        p = float(vals[("theta_plain", key)])
                        d = float(vals[("theta_dw", key)])
                        truth[key] = t
                        acc_plain.setdefault(key, []).append(p)
                        acc_dw.setdefault(key, []).append(d)
                        if int(vals[("touched", key)]):
                            touched_any[key] = True
                            errs_plain.append(abs(p - t))
                            errs_dw.append(abs(d - t))
                    if errs_plain:
                        scored += 1
                        if float(np.mean(errs_dw)) < float(np.mean(errs_plain)):
                            wins += 1
                bias_win[sid] = wins / scored if scored else math.nan
                for key in sorted(acc_plain):
                    t = truth[key]
                    mp = float(np.mean(acc_plain[key]))
                    md = float(np.mean(acc_dw[key]))
                    if t == 0.0:
                        bp, bd = mp, md
                    else:
                        bp, bd = (mp - t) / t, (md - t) / t
                    bias.append({
                        "scenario": sid, "contrast": key,
                        "bias_plain": bp, "bias_downweighted": bd,
                        "touched": int(touched_any.get(key, False)),
                        "zero_truth": int(t == 0.0),
                    })

    return ExperimentResult(table1=table1, table2=table2, bias=bias,
                            bias_win_fraction=bias_win, completed=completed,
                            failures=failures)


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult) -> None:
    out = cfg.output_dir
    with open(out / "table1.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "tau2", "outlier_slot", "mean_bf",
                         "mean_p_L", "mean_p_SDO", "mean_p_G"])
        for row in result.table1:
            writer.writerow([row["scenario"], repr(row["tau2"]), row["outlier_slot"],
                             repr(row["mean_bf"]), repr(row["mean_p_L"]),
                             repr(row["mean_p_SDO"]), repr(row["mean_p_G"])])
    with open(out / "table2.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["design", "tau2", "fp_bf", "fp_pL", "fp_pSDO", "fp_pG"])
        for row in result.table2:
            writer.writerow([row["design"], repr(row["tau2"]), repr(row["fp_bf"]),
                             repr(row["fp_pL"]), repr(row["fp_pSDO"]), repr(row["fp_pG"])])
    with open(out / "bias.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "contrast", "bias_plain", "bias_downweighted"])
        for row in result.bias:
            writer.writerow([row["scenario"], row["contrast"], repr(row["bias_plain"]),
                             repr(row["bias_downweighted"])])
    runlog = {
        "completed": result.completed,
        "failures": {k: v for k, v in result.failures.items() if v},
        "failure_counts": {k: len(v) for k, v in result.failures.items()},
        "bias_win_fraction": result.bias_win_fraction,
        "config": {
            "scenario_ids": list(cfg.scenario_ids),
            "replications": cfg.replications,
            "seed": cfg.seed,
            "parts": list(cfg.parts),
            "mcmc": {"iterations": cfg.mcmc.iterations, "burn_in": cfg.mcmc.burn_in,
                     "chains": cfg.mcmc.chains, "thin": cfg.mcmc.thin},
            "thresholds": {"bf": cfg.thresholds.bf, "p": cfg.thresholds.p},
            "severity": cfg.severity,
            "s_range": list(cfg.s_range),
            "bf_method": cfg.bf_method,
        },
    }
    with open(out / "runlog.json", "w", encoding="utf-8") as fh:
        json.dump(runlog, fh, indent=2)
        fh.write("\n")
