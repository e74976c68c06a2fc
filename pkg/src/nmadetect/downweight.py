"""Second-stage power-prior analysis and comparison summaries.

Flagged studies keep their data but contribute their likelihood raised to a
power w_j in (0,1), with w_j ~ Beta(a_j, b_j).  Presets: moderate = Beta(3,3)
centred at one half, severe = Beta(2,5) concentrated below it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetError, NetworkDataset, connectivity_check
from .mcmc import PosteriorSamples, SamplerConfig, sample
from .model import DownweightPlan, ModelSpec, PriorConfig


@dataclass(frozen=True)
class Estimate:
    median: float
    ci_low: float
    ci_high: float

    def __post_init__(self) -> None:
        if not self.ci_low <= self.median <= self.ci_high:
            raise ValueError("credible interval must bracket the median")


@dataclass(frozen=True)
class ComparisonSummary:
    """Posterior medians and 95% credible intervals for every treatment pair
    (odds-ratio scale), the heterogeneity, and any down-weighting factors."""

    pairs: Mapping[tuple[int, int], Estimate]
    tau2: Estimate
    weights: Mapping[str, Estimate]
    labels: tuple[str, ...] | None = None

    def odds_ratio(self, h: int, k: int) -> Estimate:
        if (h, k) in self.pairs:
            return self.pairs[(h, k)]
        if (k, h) in self.pairs:
            e = self.pairs[(k, h)]
            return Estimate(1.0 / e.median, 1.0 / e.ci_high, 1.0 / e.ci_low)
        raise KeyError(f"no pair ({h}, {k})")

    def pair_label(self, h: int, k: int) -> str:
        if self.labels:
            return f"{self.labels[k - 1]} vs {self.labels[h - 1]}"
        return f"{k} vs {h}"


def _estimate(draws: np.ndarray) -> Estimate:
    lo, med, hi = np.percentile(draws, [2.5, 50.0, 97.5])
    return Estimate(float(med), float(lo), float(hi))


def summarize(samples: PosteriorSamples) -> ComparisonSummary:
    """Pairwise odds ratios (all pairs, via the consistency identity),
    heterogeneity and weight summaries from pooled draws."""
    pm = samples.packed
    K = pm.num_treatments
    theta = samples.theta.reshape(-1, K - 1)
    theta_full = np.concatenate([np.zeros((theta.shape[0], 1)), theta], axis=1)
    pairs: dict[tuple[int, int], Estimate] = {}
    for h in range(1, K + 1):
        for k in range(h + 1, K + 1):
            lor = theta_full[:, k - 1] - theta_full[:, h - 1]
            pairs[(h, k)] = _estimate(np.exp(lor))
    tau2 = _estimate(samples.tau2.reshape(-1))
    weights = {}
    for j, sid in enumerate(pm.weight_ids):
        weights[sid] = _estimate(samples.w.reshape(-1, max(pm.n_weights, 1))[:, j])
    return ComparisonSummary(pairs=pairs, tau2=tau2, weights=weights,
                             labels=pm.ds.treatment_labels)


def downweighted_fit(ds: NetworkDataset, plan: DownweightPlan, cfg: SamplerConfig,
                     priors: PriorConfig | None = None
                     ) -> tuple[PosteriorSamples, ComparisonSummary]:
    """Joint fit with power-prior weights on the studies in the plan."""
    if not plan.entries:
        raise ValueError("down-weighting plan is empty")
    spec = ModelSpec.downweighted(plan, priors=priors)
    samples = sample(ds, spec, cfg)
    return samples, summarize(samples)


def exclusion_fit(ds: NetworkDataset, excluded: Sequence[str], cfg: SamplerConfig,
                  priors: PriorConfig | None = None
                  ) -> tuple[PosteriorSamples, ComparisonSummary]:
    """Standard fit with the given studies removed.  Errors if removal drops
    a treatment entirely or splits the comparison graph."""
    reduced = ds.without_studies(set(excluded))
    if not reduced.studies:
        raise DatasetError("excluding these studies empties the dataset")
    present = {a.treatment for s in reduced.studies for a in s.arms}
    missing = set(range(1, ds.num_treatments + 1)) - present
    if missing:
        names = [ds.label(t) for t in sorted(missing)]
        raise DatasetError(
            f"excluding {sorted(set(map(str, excluded)))} removes all evidence on "
            f"treatment(s) {names}"
        )
    conn = connectivity_check(reduced)
    if not conn.connected:
        comps = [sorted(ds.label(t) for t in comp) for comp in conn.components]
        raise DatasetError(
            f"excluding {sorted(set(map(str, excluded)))} disconnects the network; "
            f"components: {comps}"
        )
    samples = sample(reduced, ModelSpec.standard(priors=priors), cfg)
    return samples, summarize(samples)


def standard_fit(ds: NetworkDataset, cfg: SamplerConfig, priors: PriorConfig | None = None
                 ) -> tuple[PosteriorSamples, ComparisonSummary]:
    samples = sample(ds, ModelSpec.standard(priors=priors), cfg)
    return samples, summarize(samples)


@dataclass(frozen=True)
class ContrastBias:
    pair: tuple[int, int]
    value: float
    absolute: bool  # true when the zero-truth fallback (absolute bias) applied


def relative_bias(estimates: ComparisonSummary | Mapping[tuple[int, int], float],
                  truth: np.ndarray) -> dict[tuple[int, int], ContrastBias]:
    """(estimate - truth)/truth per treatment pair on the log-odds-ratio
    scale.  truth holds the K-1 basic contrasts against treatment 1; other
    pairs follow from consistency.  Zero-truth contrasts are reported as
    absolute bias and flagged."""
    truth = np.asarray(truth, dtype=float)
    truth_full = np.concatenate([[0.0], truth])
    if isinstance(estimates, ComparisonSummary):
        points = {pair: math.log(e.median) for pair, e in estimates.pairs.items()}
    else:
        points = dict(estimates)
    out: dict[tuple[int, int], ContrastBias] = {}
    for (h, k), est in points.items():
        t = truth_full[k - 1] - truth_full[h - 1]
        if t == 0.0:
            out[(h, k)] = ContrastBias((h, k), est - t, absolute=True)
        else:
            out[(h, k)] = ContrastBias((h, k), (est - t) / t, absolute=False)
    return out


def parse_plan(text: str) -> DownweightPlan:
    """Parse 'study3=moderate,study5=severe,study7=2:5' style plan strings.
    Study keys may carry an optional 'study' prefix."""
    entries: dict[str, tuple[float, float]] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"bad plan entry {part!r}; expected study=preset or study=a:b")
        key, _, val = part.partition("=")
        sid = key.strip()
        if sid.lower().startswith("study"):
            sid = sid[5:].strip()
        val = val.strip()
        if ":" in val:
            a_str, _, b_str = val.partition(":")
            entries[sid] = (float(a_str), float(b_str))
        else:
            entries[sid] = DownweightPlan.preset(val)
    if not entries:
        raise ValueError("empty down-weighting plan")
    return DownweightPlan(entries)


def write_forest_csv(path: str | Path,
                     analyses: Mapping[str, ComparisonSummary]) -> None:
    """Forest-plot-ready table: contrast,analysis,or_median,ci_low,ci_high."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["contrast", "analysis", "or_median", "ci_low", "ci_high"])
        for name, summary in analyses.items():
            for (h, k), est in sorted(summary.pairs.items()):
                writer.writerow([
                    summary.pair_label(h, k), name,
                    repr(est.median), repr(est.ci_low), repr(est.ci_high),
                ])


def summary_to_json(summary: ComparisonSummary) -> dict:
    return {
        "pairs": [
            {
                "h": h, "k": k, "contrast": summary.pair_label(h, k),
                "or_median": e.median, "ci_low": e.ci_low, "ci_high": e.ci_high,
            }
            for (h, k), e in sorted(summary.pairs.items())
        ],
        "tau2": {"median": summary.tau2.median, "ci_low": summary.tau2.ci_low,
                 "ci_high": summary.tau2.ci_high},
        "weights": {
            sid: {"median": e.median, "ci_low": e.ci_low, "ci_high": e.ci_high}
            for sid, e in summary.weights.items()
        },
    }


def write_summary_json(path: str | Path, analyses: Mapping[str, ComparisonSummary]) -> None:
    doc = {name: summary_to_json(s) for name, s in analyses.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
