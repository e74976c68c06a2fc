"""Synthetic contaminated-network generator.

Four network geometries (bundled as a versioned fixture file) are crossed
with four heterogeneity levels and one or three injected outliers into a grid
of 32 numbered scenarios.  Per study: arm sizes ~ round(U(50,200)), baseline
event risk ~ U(0.4,0.6), study log odds ratios drawn around the true basic
contrasts with the compound-symmetric covariance, and event counts binomial.
Outlying studies draw their log odds ratios with the mean shifted by
+-C where C = severity * sqrt(s2_max + tau2).

Everything is deterministic given the scenario seed: one generator stream,
fixed draw order (outlier choice, signs, then per study sizes, baseline
risk, effects, counts).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping

import numpy as np
from scipy.special import expit, logit

from .data import Arm, NetworkDataset, Study

TAU2_GRID = (0.0, 0.032, 0.096, 0.287)
SEVERITIES = (2.5, 3.0)
S_RANGES = ((4.0, 12.25), (0.25, 4.0))
GEOMETRY_ORDER = ("balanced_100", "unbalanced_well_35", "unbalanced_fair_27",
                  "unbalanced_poor_15")

_MAX_REDRAWS = 100


def load_geometries() -> dict:
    with resources.files("nmadetect.datasets").joinpath("geometries.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class SimScenario:
    geometry: str
    tau2: float
    num_outliers: int
    severity: float = 3.0
    s_range: tuple[float, float] = (4.0, 12.25)
    seed: int = 0
    scenario_id: int | None = None

    def __post_init__(self) -> None:
        if self.geometry not in GEOMETRY_ORDER:
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.tau2 not in TAU2_GRID:
            raise ValueError(f"tau2 must be one of {TAU2_GRID}")
        if self.num_outliers not in (0, 1, 3):
            raise ValueError("num_outliers must be 0, 1 or 3")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}")
        if tuple(self.s_range) not in S_RANGES:
            raise ValueError(f"s_range must be one of {S_RANGES}")

    @property
    def contamination_shift(self) -> float:
        """C = severity * sqrt(s2_max + tau2) on the log odds ratio scale."""
        return self.severity * math.sqrt(self.s_range[1] + self.tau2)

    def null_variant(self) -> "SimScenario":
        return replace(self, num_outliers=0)


@dataclass(frozen=True, eq=False)
class GeneratedNetwork:
    dataset: NetworkDataset
    truth: np.ndarray  # K-1 true basic contrasts vs treatment 1
    outlier_ids: tuple[str, ...]
    outlier_directions: tuple[int, ...]
    baseline_risks: Mapping[str, float] = field(default_factory=dict)
    study_log_ors: Mapping[str, tuple[float, ...]] = field(default_factory=dict)


def scenario_grid(severity: float = 3.0, s_range: tuple[float, float] = (4.0, 12.25)
                  ) -> list[SimScenario]:
    """The 32 numbered scenarios: geometry blocks of eight, within each block
    one outlier over the tau2 grid then three outliers over the grid."""
    grid: list[SimScenario] = []
    sid = 1
    for geom in GEOMETRY_ORDER:
        for n_out in (1, 3):
            for tau2 in TAU2_GRID:
                grid.append(SimScenario(geometry=geom, tau2=tau2, num_outliers=n_out,
                                        severity=severity, s_range=s_range,
                                        scenario_id=sid))
                sid += 1
    return grid


def scenario(scenario_id: int, **kw) -> SimScenario:
    grid = scenario_grid(**kw)
    if not 1 <= scenario_id <= len(grid):
        raise ValueError(f"scenario_id must be in 1..{len(grid)}")
    return grid[scenario_id - 1]


def _cs_cholesky(tau2: float, dim: int) -> np.ndarray:
    cov = np.full((dim, dim), tau2 / 2.0)
    np.fill_diagonal(cov, tau2)
    return np.linalg.cholesky(cov)


def generate(scen: SimScenario) -> GeneratedNetwork:
    geoms = load_geometries()
    geom = geoms[scen.geometry]
    K = int(geom["num_treatments"])
    truth = np.array([k / (K - 1) for k in range(1, K)])  # equal steps in (0, 1]
    truth_full = np.concatenate([[0.0], truth])

    comparisons: list[tuple[int, ...]] = []
    for h, k, count in geom["edges"]:
        comparisons.extend([(int(h), int(k))] * int(count))
    n_studies = len(comparisons)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=scen.seed))
    if scen.num_outliers > 0:
        chosen = rng.choice(n_studies, size=scen.num_outliers, replace=False)
        outlier_pos = [int(p) for p in chosen]
        directions = [1 if rng.random() < 0.5 else -1 for _ in outlier_pos]
    else:
        outlier_pos, directions = [], []
    shift = scen.contamination_shift

    studies: list[Study] = []
    baseline_risks: dict[str, float] = {}
    study_log_ors: dict[str, tuple[float, ...]] = {}
    for pos, treatments in enumerate(comparisons):
        sid = str(pos + 1)
        dim = len(treatments) - 1
        base = treatments[0]
        sizes = [int(round(rng.uniform(50.0, 200.0))) for _ in treatments]
        p_base = rng.uniform(0.4, 0.6)
        mean = np.array([truth_full[t - 1] - truth_full[base - 1] for t in treatments[1:]])
        if pos in outlier_pos:
            mean = mean + directions[outlier_pos.index(pos)] * shift
        chol = _cs_cholesky(scen.tau2, dim) if scen.tau2 > 0 else None

        for attempt in range(_MAX_REDRAWS):
            lors = mean + chol @ rng.standard_normal(dim) if chol is not None else mean.copy()
            probs = expit(logit(p_base) + lors)
            if np.all((probs > 0.0) & (probs < 1.0)):
                break
        else:
            raise RuntimeError(
                f"study {sid}: could not back-calculate a valid event probability "
                f"after {_MAX_REDRAWS} redraws"
            )

        arms = [Arm(treatment=base, events=int(rng.binomial(sizes[0], p_base)),
                    total=sizes[0])]
        for j, t in enumerate(treatments[1:]):
            arms.append(Arm(treatment=t, events=int(rng.binomial(sizes[j + 1], probs[j])),
                            total=sizes[j + 1]))
        studies.append(Study(id=sid, arms=tuple(arms)))
        baseline_risks[sid] = float(p_base)
        study_log_ors[sid] = tuple(float(x) for x in lors)

    labels = tuple(str(t) for t in range(1, K + 1))
    ds = NetworkDataset(tuple(studies), num_treatments=K, treatment_labels=labels)
    ds.validate()
    return GeneratedNetwork(
        dataset=ds, truth=truth,
        outlier_ids=tuple(str(p + 1) for p in outlier_pos),
        outlier_directions=tuple(directions),
        baseline_risks=baseline_risks, study_log_ors=study_log_ors,
    )


def truth_sidecar(gen: GeneratedNetwork) -> dict:
    return {
        "theta_true": [float(x) for x in gen.truth],
        "outliers": [
            {"study": sid, "direction": d}
            for sid, d in zip(gen.outlier_ids, gen.outlier_directions)
        ],
    }
