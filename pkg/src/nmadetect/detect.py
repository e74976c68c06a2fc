"""Posterior predictive outlier screening and the per-study detection report.

The checking distribution conditions on (mu, theta, tau^2) only: study random
effects are nuisance draws.  At each retained posterior draw s a replicated
dataset redraws every study's random effect vector from N(0, Psi(tau^2(s)))
and then arm counts from the binomial; the replicate RNG is keyed by
(seed, s) so parallel and serial execution produce identical numbers.

Three discrepancy measures are scored per study:

* likelihood (f_L): the study's log-likelihood contribution with the random
  effect integrated out (per arm, by quadrature).  Orientation is inverted
  in the p-value so that a surprisingly LOW observed likelihood yields a
  small p.
* sdo (f_SDO): summed |x - median(pool)| / MAD(pool) of the study's arm
  proportions, a Stahel-Donoho style outlyingness score.  Data-only; the
  replicate side is scored against its own pool's median/MAD by default.
* gelman_chi2 (f_G): omnibus standardized chi-square comparator, evaluated
  conditionally on each side's own study effects (observed data at the
  fitted effects, replicates at their generating effects), which is what
  makes it weak at flagging single studies.

A study is flagged when its Bayes factor exceeds the evidence threshold or
any posterior predictive p-value falls below the significance threshold.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit, gammaln

from ._ppc_kernel import integrated_arm_loglik, integrated_loglik_table
from .data import NetworkDataset, ObservedProportions, observed_proportions
from .evidence import BayesFactor, bayes_factor, derive_seed
from .mcmc import PosteriorSamples, SamplerConfig, SamplerDiagnosticError, sample
from .model import ModelSpec, ParameterState, PriorConfig, pack_model

DiscrepancyKind = Literal["likelihood", "sdo", "gelman_chi2"]
KINDS: tuple[DiscrepancyKind, ...] = ("likelihood", "sdo", "gelman_chi2")


class DegenerateProportionPool(ValueError):
    """All proportions in the scoring pool are equal, so the MAD is zero."""


@dataclass(frozen=True)
class Discrepancy:
    kind: DiscrepancyKind
    value: float

    def __post_init__(self) -> None:
        if self.kind == "sdo" and self.value < 0:
            raise ValueError("sdo discrepancy must be non-negative")
        if self.kind == "likelihood" and self.value > 0:
            raise ValueError("likelihood discrepancy is a log-likelihood and must be <= 0")


@dataclass(frozen=True)
class PPPValue:
    study: str
    kind: DiscrepancyKind
    value: float
    num_draws: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("p-value must lie in [0,1]")


@dataclass(frozen=True)
class DetectionThresholds:
    bf: float = 3.2
    p: float = 0.05


@dataclass(frozen=True, eq=False)
class ReplicateDataset:
    """Replicated event counts (and the redrawn study effects behind them),
    one row per requested posterior draw."""

    events: np.ndarray   # (n_draws, n_arms) integers
    effects: np.ndarray  # (n_draws, n_delta) redrawn random effects
    draw_indices: tuple[int, ...]
    ds: NetworkDataset

    def row(self, k: int = 0) -> np.ndarray:
        return self.events[k]


@dataclass(frozen=True)
class DetectionRow:
    study: str
    bayes_factor: BayesFactor
    p_L: PPPValue
    p_SDO: PPPValue
    p_G: PPPValue
    flagged: bool


@dataclass(frozen=True)
class DetectionReport:
    rows: tuple[DetectionRow, ...]
    thresholds: DetectionThresholds

    @property
    def flagged_ids(self) -> tuple[str, ...]:
        return tuple(r.study for r in self.rows if r.flagged)

    def row(self, study_id: str) -> DetectionRow:
        for r in self.rows:
            if r.study == str(study_id):
                return r
        raise KeyError(f"no report row for study {study_id!r}")

    def to_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["study", "bf", "bf_class", "p_L", "p_SDO", "p_G", "flagged"])
            for r in self.rows:
                writer.writerow([
                    r.study, repr(r.bayes_factor.value),
                    r.bayes_factor.evidence.label if r.bayes_factor.evidence else "",
                    repr(r.p_L.value), repr(r.p_SDO.value), repr(r.p_G.value),
                    int(r.flagged),
                ])

    def to_json(self, path: str | Path | None = None) -> dict:
        doc = {
            "thresholds": {"bf": self.thresholds.bf, "p": self.thresholds.p},
            "studies": [
                {
                    "study": r.study,
                    "bf": r.bayes_factor.value,
                    "log_bf": r.bayes_factor.log_value,
                    "bf_class": r.bayes_factor.evidence.label if r.bayes_factor.evidence else None,
                    "bf_mc_error": r.bayes_factor.mc_error,
                    "bf_estimator": r.bayes_factor.estimator,
                    "eta_prior_sd": r.bayes_factor.eta_prior_sd,
                    "p_L": r.p_L.value,
                    "p_SDO": r.p_SDO.value,
                    "p_G": r.p_G.value,
                    "flagged": r.flagged,
                }
                for r in self.rows
            ],
        }
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=2)
                fh.write("\n")
        return doc


# --- replicate generation ---

_CS_CHOL_CACHE: dict[int, np.ndarray] = {}


def _cs_chol_unit(dim: int) -> np.ndarray:
    """Cholesky of the unit compound-symmetric matrix (1 on the diagonal,
    1/2 off it); scale by tau for the random-effect draw."""
    if dim not in _CS_CHOL_CACHE:
        m = np.full((dim, dim), 0.5)
        np.fill_diagonal(m, 1.0)
        _CS_CHOL_CACHE[dim] = np.linalg.cholesky(m)
    return _CS_CHOL_CACHE[dim]


def _pooled_draws(samples: PosteriorSamples):
    C, S = samples.mu.shape[0], samples.mu.shape[1]
    return (
        samples.mu.reshape(C * S, -1),
        samples.theta.reshape(C * S, -1),
        samples.delta.reshape(C * S, -1),
        samples.tau2.reshape(C * S),
    )


def _anchor_matrix(pm, mu: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """(draws, arms) linear predictors without study effects: mu + theta term."""
    theta_full = np.concatenate([np.zeros((theta.shape[0], 1)), theta], axis=1)
    return mu[:, pm.arm_study] + theta_full[:, pm.arm_t] - theta_full[:, pm.arm_b]


def _pooled_linear_predictors(samples: PosteriorSamples) -> np.ndarray:
    """(draws, arms) linear predictors at the fitted study effects."""
    pm = samples.packed
    mu, theta, delta, _ = _pooled_draws(samples)
    lp = _anchor_matrix(pm, mu, theta)
    delta_pad = np.concatenate([np.zeros((delta.shape[0], 1)), delta], axis=1)
    lp = lp + delta_pad[:, pm.arm_delta]
    if samples.packed.spec.variant == "mean_shift":
        C, S = samples.eta.shape[0], samples.eta.shape[1]
        eta = samples.eta.reshape(C * S, -1)
        eta_pad = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
        lp = lp + eta_pad[:, pm.arm_eta]
    return lp


def replicate_events(ds: NetworkDataset, samples: PosteriorSamples, seed: int,
                     draws: Sequence[int] | None = None) -> ReplicateDataset:
    """Replicated datasets: per draw s, fresh study effects
    delta* ~ N(0, Psi(tau^2(s))) and r*_ik ~ Binomial(n_ik, expit(anchor + delta*))."""
    pm = samples.packed
    mu, theta, _, tau2 = _pooled_draws(samples)
    anchors = _anchor_matrix(pm, mu, theta)
    total = anchors.shape[0]
    idx = tuple(range(total)) if draws is None else tuple(int(s) for s in draws)
    n = pm.arm_n.astype(np.int64)
    dims = [int(pm.study_delta_ptr[i + 1] - pm.study_delta_ptr[i])
            for i in range(pm.n_studies)]
    out = np.empty((len(idx), pm.n_arms), dtype=np.int64)
    eff = np.empty((len(idx), pm.n_delta))
    for k, s in enumerate(idx):
        if not 0 <= s < total:
            raise IndexError(f"draw index {s} out of range [0, {total})")
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(s,)))
        tau = math.sqrt(tau2[s])
        pos = 0
        for dim in dims:
            if dim:
                z = rng.standard_normal(dim)
                eff[k, pos:pos + dim] = tau * (_cs_chol_unit(dim) @ z)
                pos += dim
        eff_pad = np.concatenate([[0.0], eff[k]])
        lp = anchors[s] + eff_pad[pm.arm_delta]
        out[k] = rng.binomial(n, expit(lp))
    return ReplicateDataset(events=out, effects=eff, draw_indices=idx, ds=ds)


def replicate(ds: NetworkDataset, samples: PosteriorSamples, s: int, seed: int = 0
              ) -> ReplicateDataset:
    """Single replicated dataset at pooled draw s, deterministic in (seed, s)."""
    return replicate_events(ds, samples, seed, draws=[s])


# --- discrepancy measures ---


def _study_arm_slice(ds: NetworkDataset, study_id: str) -> tuple[int, int]:
    pos = 0
    for s in ds.studies:
        width = len(s.arms)
        if s.id == str(study_id):
            return pos, pos + width
        pos += width
    raise KeyError(f"no study with id {study_id!r}")


def _arm_arrays(ds: NetworkDataset):
    r = np.array([a.events for s in ds.studies for a in s.arms], dtype=float)
    n = np.array([a.total for s in ds.studies for a in s.arms], dtype=float)
    return r, n


def f_likelihood(data: NetworkDataset | ReplicateDataset, study_id: str,
                 state: ParameterState) -> Discrepancy:
    """Study log-likelihood contribution at (mu, theta, tau^2), with the
    study random effect integrated out arm by arm (binomial coefficient
    included).  The state's delta/eta play no role."""
    ds = data if isinstance(data, NetworkDataset) else data.ds
    lo, hi = _study_arm_slice(ds, study_id)
    if isinstance(data, NetworkDataset):
        r_all, n_all = _arm_arrays(ds)
    else:
        if data.events.shape[0] != 1:
            raise ValueError("pass a single-draw ReplicateDataset (use .row selection)")
        _, n_all = _arm_arrays(ds)
        r_all = data.events[0].astype(float)
    pm = pack_model(ds, ModelSpec.standard())
    theta_full = np.concatenate([[0.0], np.asarray(state.theta, dtype=float)])
    tau = math.sqrt(state.tau2)
    value = 0.0
    for a in range(lo, hi):
        anchor = float(state.mu[pm.arm_study[a]]) \
            + theta_full[pm.arm_t[a]] - theta_full[pm.arm_b[a]]
        r, n = r_all[a], n_all[a]
        logchoose = float(gammaln(n + 1) - gammaln(r + 1) - gammaln(n - r + 1))
        if pm.arm_delta[a] > 0:
            value += integrated_arm_loglik(r, n, logchoose, anchor, tau)
        else:
            value += logchoose + r * anchor - n * np.logaddexp(0.0, anchor)
    return Discrepancy(kind="likelihood", value=min(float(value), 0.0))


def _sdo_score(pool: np.ndarray, study_values: np.ndarray) -> float:
    med = float(np.median(pool))
    mad = float(np.median(np.abs(pool - med)))
    if mad == 0.0:
        raise DegenerateProportionPool("degenerate proportion pool: MAD is zero")
    return float(np.sum(np.abs(study_values - med)) / mad)


def f_sdo(x: ObservedProportions, study_id: str) -> Discrepancy:
    """Summed outlyingness of the study's arms against the whole pool."""
    pool = np.asarray(x.pool(), dtype=float)
    vals = np.asarray(x.for_study(study_id), dtype=float)
    if vals.size == 0:
        raise KeyError(f"no arms for study {study_id!r}")
    return Discrepancy(kind="sdo", value=_sdo_score(pool, vals))


def replicate_proportions(rep: ReplicateDataset, k: int = 0) -> ObservedProportions:
    ds = rep.ds
    totals = np.array([a.total for s in ds.studies for a in s.arms], dtype=float)
    props = rep.events[k] / totals
    keys = [(s.id, a.treatment) for s in ds.studies for a in s.arms]
    return ObservedProportions(tuple((sid, t, float(p)) for (sid, t), p in zip(keys, props)))


def f_gelman_chi2(data: NetworkDataset | ReplicateDataset, study_id: str,
                  state: ParameterState, spec: ModelSpec | None = None) -> Discrepancy:
    """Per-study standardized chi-square at the state's fitted probabilities:
    sum (r - n pi)^2 / (n pi (1 - pi))."""
    ds = data if isinstance(data, NetworkDataset) else data.ds
    lo, hi = _study_arm_slice(ds, study_id)
    if isinstance(data, NetworkDataset):
        r_all, n_all = _arm_arrays(ds)
    else:
        if data.events.shape[0] != 1:
            raise ValueError("pass a single-draw ReplicateDataset")
        _, n_all = _arm_arrays(ds)
        r_all = data.events[0].astype(float)
    r = r_all[lo:hi]
    n = n_all[lo:hi]
    pm = pack_model(ds, spec or ModelSpec.standard())
    pi = expit(pm.linear_predictors(state)[lo:hi])
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("fitted probability exactly 0 or 1; chi-square undefined")
    value = float(np.sum((r - n * pi) ** 2 / (n * pi * (1.0 - pi))))
    return Discrepancy(kind="gelman_chi2", value=value)


# --- p-values ---


def _select_draws(total: int, max_draws: int | None) -> np.ndarray:
    if max_draws is None or total <= max_draws:
        return np.arange(total)
    stride = int(math.ceil(total / max_draws))
    return np.arange(0, total, stride)


def _all_ppp_values(ds: NetworkDataset, samples: PosteriorSamples, seed: int,
                    freeze_sdo_pool: bool = False, min_draws: int = 1000,
                    max_draws: int | None = None,
                    ) -> dict[DiscrepancyKind, dict[str, PPPValue]]:
    """All three p-values for every study from one standard-model fit."""
    pm = samples.packed
    mu, theta, delta, tau2 = _pooled_draws(samples)
    total = mu.shape[0]
    sel = _select_draws(total, max_draws)
    S = sel.size
    if S < min_draws:
        raise ValueError(f"need at least {min_draws} post-burn-in draws, have {S}")

    anchors = _anchor_matrix(pm, mu[sel], theta[sel])
    taus = np.sqrt(tau2[sel])
    rep = replicate_events(ds, samples, seed, draws=sel)
    r_obs = np.broadcast_to(pm.arm_r, (S, pm.n_arms))
    r_rep = rep.events.astype(float)
    n = pm.arm_n
    has_effect = pm.arm_delta > 0

    coeff_obs = np.broadcast_to(pm.arm_logchoose, (S, pm.n_arms)).copy()
    coeff_rep = gammaln(n[None, :] + 1) - gammaln(r_rep + 1) - gammaln(n[None, :] - r_rep + 1)
    ll_obs = integrated_loglik_table(np.ascontiguousarray(r_obs, dtype=float), n,
                                     coeff_obs, anchors, taus, has_effect)
    ll_rep = integrated_loglik_table(r_rep, n, coeff_rep, anchors, taus, has_effect)

    # conditional chi-square: observed side at the fitted effects, replicate
    # side at its generating effects
    delta_pad_fit = np.concatenate([np.zeros((S, 1)), delta[sel]], axis=1)
    pi_obs = expit(anchors + delta_pad_fit[:, pm.arm_delta])
    eff_pad_rep = np.concatenate([np.zeros((S, 1)), rep.effects], axis=1)
    pi_rep = expit(anchors + eff_pad_rep[:, pm.arm_delta])
    if (np.any(pi_obs <= 0.0) or np.any(pi_obs >= 1.0)
            or np.any(pi_rep <= 0.0) or np.any(pi_rep >= 1.0)):
        raise ValueError("fitted probability exactly 0 or 1; chi-square undefined")
    chi_obs = (r_obs - n * pi_obs) ** 2 / (n * pi_obs * (1.0 - pi_obs))
    chi_rep = (r_rep - n * pi_rep) ** 2 / (n * pi_rep * (1.0 - pi_rep))

    x_obs = (pm.arm_r / pm.arm_n)[None, :]
    x_rep = r_rep / n[None, :]
    med_obs = float(np.median(x_obs))
    mad_obs = float(np.median(np.abs(x_obs - med_obs)))
    if mad_obs == 0.0:
        raise DegenerateProportionPool("degenerate proportion pool: MAD is zero")
    if freeze_sdo_pool:
        med_rep = np.full(S, med_obs)
        mad_rep = np.full(S, mad_obs)
    else:
        med_rep = np.median(x_rep, axis=1)
        mad_rep = np.median(np.abs(x_rep - med_rep[:, None]), axis=1)
    sdo_obs_arm = np.abs(x_obs - med_obs) / mad_obs
    # a rare replicate pool can be degenerate (MAD 0, mostly on tiny
    # networks); score its arms inf off the median and 0 on it
    with np.errstate(divide="ignore", invalid="ignore"):
        sdo_rep_arm = np.abs(x_rep - med_rep[:, None]) / mad_rep[:, None]
    sdo_rep_arm = np.nan_to_num(sdo_rep_arm, nan=0.0, posinf=np.inf)

    out: dict[DiscrepancyKind, dict[str, PPPValue]] = {k: {} for k in KINDS}
    for i, study in enumerate(ds.studies):
        lo, hi = pm.study_arm_ptr[i], pm.study_arm_ptr[i + 1]
        fl_obs = ll_obs[:, lo:hi].sum(axis=1)
        fl_rep = ll_rep[:, lo:hi].sum(axis=1)
        # inverted orientation: surprise = low likelihood = small p
        out["likelihood"][study.id] = PPPValue(
            study.id, "likelihood", float(np.mean(fl_rep <= fl_obs)), S)
        fg_obs = chi_obs[:, lo:hi].sum(axis=1)
        fg_rep = chi_rep[:, lo:hi].sum(axis=1)
        out["gelman_chi2"][study.id] = PPPValue(
            study.id, "gelman_chi2", float(np.mean(fg_rep >= fg_obs)), S)
        fs_obs = sdo_obs_arm[:, lo:hi].sum(axis=1)
        fs_rep = sdo_rep_arm[:, lo:hi].sum(axis=1)
        out["sdo"][study.id] = PPPValue(
            study.id, "sdo", float(np.mean(fs_rep >= fs_obs)), S)
    return out


def ppp_value(ds: NetworkDataset, samples: PosteriorSamples, study_id: str,
              kind: DiscrepancyKind, seed: int = 0, freeze_sdo_pool: bool = False,
              min_draws: int = 1000, max_draws: int | None = None) -> PPPValue:
    """Posterior predictive p-value for one study under one discrepancy."""
    if kind not in KINDS:
        raise ValueError(f"unknown discrepancy kind {kind!r}")
    table = _all_ppp_values(ds, samples, seed, freeze_sdo_pool, min_draws, max_draws)
    sid = str(study_id)
    if sid not in table[kind]:
        raise KeyError(f"no study with id {study_id!r}")
    return table[kind][sid]


# --- full detection pass ---


def _bf_task(args) -> tuple[str, BayesFactor]:
    ds, sid, cfg, method, priors = args
    return sid, bayes_factor(ds, sid, cfg, method=method, priors=priors)


def check_convergence(samples: PosteriorSamples, rhat_max: float = 1.1) -> None:
    bad = {k: v for k, v in samples.rhats.items() if np.isfinite(v) and v > rhat_max}
    if bad:
        worst = dict(sorted(bad.items(), key=lambda kv: -kv[1])[:10])
        raise SamplerDiagnosticError(
            f"split R-hat above {rhat_max} for {len(bad)} parameter(s); worst: {worst}",
            dump={"rhat": worst},
        )


def detect(ds: NetworkDataset, cfg: SamplerConfig,
           thresholds: DetectionThresholds = DetectionThresholds(),
           priors: PriorConfig | None = None, bf_method: str = "savage_dickey",
           freeze_sdo_pool: bool = False, threads: int = 1,
           rhat_max: float = 1.1, min_draws: int = 1000,
           max_ppp_draws: int | None = None,
           studies: Sequence[str] | None = None) -> DetectionReport:
    """Screen every study: one standard fit feeds all p-values, then one
    mean-shift fit per tested study yields its Bayes factor.

    `studies` restricts the Bayes-factor testing to a subset (p-values are
    always computed for all studies); the report then covers that subset.
    """
    ds.validate()
    spec = ModelSpec.standard(priors=priors)
    samples = sample(ds, spec, cfg)
    check_convergence(samples, rhat_max)
    pvals = _all_ppp_values(ds, samples, seed=derive_seed(cfg.seed, 3),
                            freeze_sdo_pool=freeze_sdo_pool, min_draws=min_draws,
                            max_draws=max_ppp_draws)

    tested = [str(s) for s in studies] if studies is not None else [s.id for s in ds.studies]
    tasks = []
    for sid in tested:
        idx = ds.study_index(sid)
        bf_cfg = SamplerConfig(
            iterations=cfg.iterations, burn_in=cfg.burn_in, chains=cfg.chains,
            thin=cfg.thin, seed=derive_seed(cfg.seed, 11, idx),
            adapt_window=cfg.adapt_window, target_accept=cfg.target_accept,
        )
        tasks.append((ds, sid, bf_cfg, bf_method, priors))

    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(_bf_task, tasks))
    else:
        results = dict(map(_bf_task, tasks))

    rows = []
    for sid in tested:
        bf = results[sid]
        p_l = pvals["likelihood"][sid]
        p_s = pvals["sdo"][sid]
        p_g = pvals["gelman_chi2"][sid]
        flagged = bool(
            bf.value > thresholds.bf
            or min(p_l.value, p_s.value, p_g.value) < thresholds.p
        )
        rows.append(DetectionRow(study=sid, bayes_factor=bf, p_L=p_l, p_SDO=p_s,
                                 p_G=p_g, flagged=flagged))
    return DetectionReport(rows=tuple(rows), thresholds=thresholds)
