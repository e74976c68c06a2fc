"""Command-line interface.

Subcommands: fit, detect, downweight, simulate, bench.  Exit codes: 0 on
success, 1 on validation/input errors, 2 on sampler diagnostic failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import DatasetError, load_dataset, write_dataset
from .detect import DetectionThresholds, detect
from .downweight import (
    downweighted_fit,
    exclusion_fit,
    parse_plan,
    standard_fit,
    summary_to_json,
    write_forest_csv,
    write_summary_json,
)
from .experiment import DESK_MCMC, PAPER_MCMC, ExperimentConfig, run_experiment
from .mcmc import SamplerConfig, SamplerDiagnosticError, sample
from .model import ModelSpec
from .simulate import SimScenario, generate, scenario, truth_sidecar


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmadetect",
        description="Bayesian outlier detection and down-weighting for binomial "
                    "network meta-analysis.",
    )
    parser.add_argument("--seed", type=int, default=0, help="master RNG seed")
    parser.add_argument("--chains", type=int, default=2)
    parser.add_argument("--iters", type=int, default=10_000, help="MCMC iterations per chain")
    parser.add_argument("--burnin", type=int, default=2000)
    parser.add_argument("--threads", type=int, default=1, help="worker processes")
    parser.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="output format for stdout reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the standard random-effects model")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--out", help="write the summary here instead of stdout")
    p_fit.add_argument("--dump-draws", help="long-format CSV draw dump (chain,iter,param,value)")

    p_det = sub.add_parser("detect", help="per-study outlier screening report")
    p_det.add_argument("--data", required=True)
    p_det.add_argument("--out", help="write the report here instead of stdout")
    p_det.add_argument("--bf-method", choices=("savage_dickey", "stepping_stone"),
                       default="savage_dickey")
    p_det.add_argument("--bf-threshold", type=float, default=3.2)
    p_det.add_argument("--p-threshold", type=float, default=0.05)
    p_det.add_argument("--freeze-sdo-pool", action="store_true",
                       help="score replicates against the observed pool's median/MAD")

    p_dw = sub.add_parser("downweight",
                          help="three-way comparison: full / down-weighted / excluded")
    p_dw.add_argument("--data", required=True)
    p_dw.add_argument("--plan", required=True,
                      help="e.g. 'study3=moderate' or '3=moderate,7=2:5'")
    p_dw.add_argument("--out", help="write the forest table / JSON here instead of stdout")

    p_sim = sub.add_parser("simulate", help="emit synthetic contaminated networks")
    p_sim.add_argument("--scenario", type=int, required=True, help="scenario id 1..32")
    p_sim.add_argument("--reps", type=int, default=1)
    p_sim.add_argument("--out-dir", default="simulated")
    p_sim.add_argument("--severity", type=float, default=3.0, choices=(2.5, 3.0))

    p_bench = sub.add_parser("bench", help="run the simulation study harness")
    p_bench.add_argument("--scenarios", required=True,
                         help="comma-separated scenario ids, e.g. '17,20'")
    p_bench.add_argument("--reps", type=int, default=50)
    p_bench.add_argument("--out-dir", default="bench-out")
    p_bench.add_argument("--parts", default="table1,table2,bias",
                         help="subset of table1,table2,bias")
    p_bench.add_argument("--severity", type=float, default=3.0, choices=(2.5, 3.0))
    p_bench.add_argument("--paper-scale", action="store_true",
                         help="1000 replications and 50k/10k MCMC (long)")
    return parser


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(iterations=args.iters, burn_in=args.burnin,
                         chains=args.chains, seed=args.seed)


def _emit(args, text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_fit(args) -> int:
    ds = load_dataset(args.data)
    ds.validate()
    samples, summary = standard_fit(ds, _sampler_config(args))
    if args.dump_draws:
        samples.dump_csv(args.dump_draws)
    if args.format == "json":
        text = json.dumps({"full": summary_to_json(summary)}, indent=2) + "\n"
        _emit(args, text, args.out)
    else:
        if args.out:
            write_forest_csv(args.out, {"full": summary})
        else:
            lines = ["contrast,analysis,or_median,ci_low,ci_high"]
            for (h, k), est in sorted(summary.pairs.items()):
                lines.append(f"{summary.pair_label(h, k)},full,{est.median!r},"
                             f"{est.ci_low!r},{est.ci_high!r}")
            sys.stdout.write("\n".join(lines) + "\n")
    sys.stderr.write(
        f"tau2 median {summary.tau2.median:.3f} "
        f"({summary.tau2.ci_low:.3f}, {summary.tau2.ci_high:.3f})\n")
    return 0


def _cmd_detect(args) -> int:
    ds = load_dataset(args.data)
    thresholds = DetectionThresholds(bf=args.bf_threshold, p=args.p_threshold)
    report = detect(ds, _sampler_config(args), thresholds=thresholds,
                    bf_method=args.bf_method, freeze_sdo_pool=args.freeze_sdo_pool,
                    threads=args.threads)
    if args.format == "json":
        text = json.dumps(report.to_json(), indent=2) + "\n"
        _emit(args, text, args.out)
    elif args.out:
        report.to_csv(args.out)
    else:
        lines = ["study,bf,bf_class,p_L,p_SDO,p_G,flagged"]
        for r in report.rows:
            lines.append(
                f"{r.study},{r.bayes_factor.value!r},{r.bayes_factor.evidence.label},"
                f"{r.p_L.value!r},{r.p_SDO.value!r},{r.p_G.value!r},{int(r.flagged)}")
        sys.stdout.write("\n".join(lines) + "\n")
    flagged = ", ".join(report.flagged_ids) or "none"
    sys.stderr.write(f"flagged studies: {flagged}\n")
    return 0


def _cmd_downweight(args) -> int:
    ds = load_dataset(args.data)
    plan = parse_plan(args.plan)
    cfg = _sampler_config(args)
    _, full = standard_fit(ds, cfg)
    _, dw = downweighted_fit(ds, plan, cfg)
    _, excl = exclusion_fit(ds, plan.study_ids, cfg)
    analyses = {"full": full, "downweighted": dw, "excluded": excl}
    if args.format == "json":
        text = json.dumps({k: summary_to_json(v) for k, v in analyses.items()},
                          indent=2) + "\n"
        _emit(args, text, args.out)
    elif args.out:
        write_forest_csv(args.out, analyses)
    else:
        lines = ["contrast,analysis,or_median,ci_low,ci_high"]
        for name, summary in analyses.items():
            for (h, k), est in sorted(summary.pairs.items()):
                lines.append(f"{summary.pair_label(h, k)},{name},{est.median!r},"
                             f"{est.ci_low!r},{est.ci_high!r}")
        sys.stdout.write("\n".join(lines) + "\n")
    for name, summary in analyses.items():
        sys.stderr.write(f"{name}: tau2 median {summary.tau2.median:.3f}\n")
    for sid, est in dw.weights.items():
        sys.stderr.write(f"w[{sid}] median {est.median:.3f} "
                         f"({est.ci_low:.3f}, {est.ci_high:.3f})\n")
    return 0


def _cmd_simulate(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = scenario(args.scenario, severity=args.severity)
    from .evidence import derive_seed

    for rep in range(args.reps):
        scen = SimScenario(geometry=base.geometry, tau2=base.tau2,
                           num_outliers=base.num_outliers, severity=base.severity,
                           s_range=base.s_range,
                           seed=derive_seed(args.seed, args.scenario, rep, 1),
                           scenario_id=base.scenario_id)
        gen = generate(scen)
        stem = f"scenario{args.scenario:02d}_rep{rep:04d}"
        write_dataset(gen.dataset, out / f"{stem}.csv")
        with open(out / f"{stem}_truth.json", "w", encoding="utf-8") as fh:
            json.dump(truth_sidecar(gen), fh, indent=2)
            fh.write("\n")
    sys.stderr.write(f"wrote {args.reps} network(s) to {out}\n")
    return 0


def _cmd_bench(args) -> int:
    ids = tuple(int(x) for x in args.scenarios.split(",") if x.strip())
    parts = tuple(p.strip() for p in args.parts.split(",") if p.strip())
    mcmc = PAPER_MCMC if args.paper_scale else SamplerConfig(
        iterations=args.iters, burn_in=args.burnin, chains=args.chains, seed=0)
    reps = 1000 if args.paper_scale else args.reps
    cfg = ExperimentConfig(
        scenario_ids=ids, output_dir=Path(args.out_dir), replications=reps,
        mcmc=mcmc, seed=args.seed, threads=args.threads, parts=parts,
        severity=args.severity,
    )
    result = run_experiment(cfg)
    done = sum(result.completed.values())
    fails = sum(len(v) for v in result.failures.values())
    sys.stderr.write(f"completed {done} replication task(s), {fails} failure(s); "
                     f"outputs in {cfg.output_dir}\n")
    return 0


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; map usage to 1
        return 0 if exc.code == 0 else 1
    try:
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "detect":
            return _cmd_detect(args)
        if args.command == "downweight":
            return _cmd_downweight(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "bench":
            return _cmd_bench(args)
        parser.error(f"unknown command {args.command!r}")
        return 1
    except SamplerDiagnosticError as exc:
        sys.stderr.write(f"sampler diagnostic failure: {exc}\n")
        if exc.dump:
            sys.stderr.write(json.dumps(exc.dump, indent=2, default=str) + "\n")
        return 2
    except (DatasetError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
