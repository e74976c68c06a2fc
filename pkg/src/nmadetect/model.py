"""Log-density evaluation for the random-effects network meta-analysis model.

Three variants share one linear predictor:

    standard:      logit(pi_ik) = mu_i + theta_bk + delta_i,bk
    mean-shift:    logit(pi_ik) = mu_i + theta_bk + eta_bk + delta_i,bk
                   (eta applies only to the single study under test)
    down-weighted: standard likelihood with each flagged study's
                   log-likelihood contribution multiplied by w_j in (0,1)

Identifiability: treatment 1 is the reference with theta_11 = 0; theta stores
the K-1 free components and theta_hk = theta_1k - theta_1h by consistency.
Study random effects delta_i are multivariate normal with tau^2 on the
diagonal and tau^2/2 off-diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np

from .data import Arm, NetworkDataset, Study

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorConfig:
    """Vague priors: N(0, normal_sd^2) on location parameters and a uniform
    prior on the heterogeneity, placed on tau^2 or tau per tau_prior_scale."""

    normal_sd: float = math.sqrt(1000.0)
    tau_upper: float = 5.0
    tau_prior_scale: Literal["on_tau", "on_tau2"] = "on_tau2"

    def __post_init__(self) -> None:
        if self.normal_sd <= 0:
            raise ValueError("normal_sd must be positive")
        if self.tau_upper <= 0:
            raise ValueError("tau_upper must be positive")
        if self.tau_prior_scale not in ("on_tau", "on_tau2"):
            raise ValueError(f"bad tau_prior_scale {self.tau_prior_scale!r}")

    def log_tau2_prior(self, tau2: float) -> float:
        """Log prior density of tau^2 (Jacobian included for the on_tau scale)."""
        if tau2 <= 0.0 or not np.isfinite(tau2):
            return -math.inf
        if self.tau_prior_scale == "on_tau2":
            return -math.log(self.tau_upper) if tau2 <= self.tau_upper else -math.inf
        tau = math.sqrt(tau2)
        if tau > self.tau_upper:
            return -math.inf
        return -math.log(self.tau_upper) - math.log(2.0 * tau)


@dataclass(frozen=True)
class DownweightPlan:
    """Per-study beta hyperparameters for power-prior down-weighting factors."""

    entries: Mapping[str, tuple[float, float]]

    def __post_init__(self) -> None:
        for sid, (a, b) in self.entries.items():
            if a <= 0 or b <= 0:
                raise ValueError(f"beta hyperparameters must be positive, study {sid!r}: ({a}, {b})")
        object.__setattr__(self, "entries", dict(self.entries))

    @property
    def study_ids(self) -> list[str]:
        return list(self.entries)

    @staticmethod
    def preset(name: str) -> tuple[float, float]:
        presets = {"moderate": (3.0, 3.0), "severe": (2.0, 5.0)}
        if name not in presets:
            raise ValueError(f"unknown down-weighting preset {name!r}; options: {sorted(presets)}")
        return presets[name]


@dataclass(frozen=True)
class ModelSpec:
    """Model variant plus prior configuration."""

    variant: Literal["standard", "mean_shift", "downweighted"] = "standard"
    shift_study: str | None = None
    plan: DownweightPlan | None = None
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self) -> None:
        if self.variant == "mean_shift" and self.shift_study is None:
            raise ValueError("mean_shift variant requires shift_study")
        if self.variant == "downweighted" and (self.plan is None or not self.plan.entries):
            raise ValueError("downweighted variant requires a non-empty plan")
        if self.variant == "standard" and (self.shift_study is not None or self.plan is not None):
            raise ValueError("standard variant takes no shift_study or plan")

    @classmethod
    def standard(cls, priors: PriorConfig | None = None) -> "ModelSpec":
        return cls(priors=priors or PriorConfig())

    @classmethod
    def mean_shift(cls, study_id: str, priors: PriorConfig | None = None) -> "ModelSpec":
        return cls(variant="mean_shift", shift_study=str(study_id), priors=priors or PriorConfig())

    @classmethod
    def downweighted(cls, plan: DownweightPlan, priors: PriorConfig | None = None) -> "ModelSpec":
        return cls(variant="downweighted", plan=plan, priors=priors or PriorConfig())

    def validate_against(self, ds: NetworkDataset) -> None:
        if self.variant == "mean_shift":
            ds.study(self.shift_study)  # raises KeyError if absent
        if self.variant == "downweighted":
            for sid in self.plan.study_ids:
                ds.study(sid)


@dataclass(frozen=True, eq=False)
class ParameterState:
    """One point in the joint parameter space.

    mu has one entry per study (dataset order), theta the K-1 basic contrasts
    for treatments 2..K, delta one block per study with k_i - 1 components in
    study arm order.  eta exists only for the mean-shift variant (components
    for the tested study's non-baseline arms); weights only for the
    down-weighted variant.
    """

    mu: np.ndarray
    theta: np.ndarray
    delta: tuple[np.ndarray, ...]
    tau2: float
    eta: np.ndarray | None = None
    weights: Mapping[str, float] | None = None

    def __post_init__(self) -> None:
        if self.tau2 < 0:
            raise ValueError("tau2 must be non-negative")
        if self.weights is not None:
            for sid, w in self.weights.items():
                if not 0.0 < w < 1.0:
                    raise ValueError(f"weight for study {sid!r} must be in (0,1), got {w}")

    def theta_full(self, num_treatments: int) -> np.ndarray:
        """Contrasts against treatment 1 for all treatments, theta_11 = 0."""
        full = np.zeros(num_treatments)
        full[1:] = self.theta
        return full


@dataclass(frozen=True)
class RandomEffectsCovariance:
    """Compound-symmetric covariance of the study random effects:
    tau^2 on the diagonal, tau^2/2 off the diagonal."""

    tau2: float
    dimension: int

    def matrix(self) -> np.ndarray:
        m = np.full((self.dimension, self.dimension), self.tau2 / 2.0)
        np.fill_diagonal(m, self.tau2)
        return m


def theta_contrast(theta: np.ndarray, h: int, k: int) -> float:
    """theta_hk = theta_1k - theta_1h with theta_11 = 0 (1-based treatments)."""
    t_k = 0.0 if k == 1 else float(theta[k - 2])
    t_h = 0.0 if h == 1 else float(theta[h - 2])
    return t_k - t_h


def compound_symmetric_logpdf(x: np.ndarray, tau2: float) -> float:
    """Log density of N(0, Psi) with Psi = tau^2 I + (tau^2/2)(J - I).

    Uses the closed-form inverse of (I + J)/2 scaling: for dimension d the
    determinant is (tau^2/2)^d (d+1) and the quadratic form is
    (2/tau^2) (||x||^2 - (sum x)^2 / (d+1)).
    """
    d = len(x)
    if d == 0:
        return 0.0
    if tau2 <= 0.0:
        return -math.inf
    quad = (2.0 / tau2) * (float(np.dot(x, x)) - float(np.sum(x)) ** 2 / (d + 1))
    logdet = d * math.log(tau2 / 2.0) + math.log(d + 1.0)
    return -0.5 * (d * LOG_2PI + logdet + quad)


def _normal_logpdf(x: float, sd: float) -> float:
    return -0.5 * (LOG_2PI + 2.0 * math.log(sd) + (x / sd) ** 2)


def beta_logpdf(w: float, a: float, b: float) -> float:
    if not 0.0 < w < 1.0:
        return -math.inf
    logbeta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return (a - 1.0) * math.log(w) + (b - 1.0) * math.log1p(-w) - logbeta


def log_binom_coeff(n: int, r: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)


def binomial_logpmf(r: float, n: float, logit_p: float) -> float:
    """Stable log Binomial(r | n, expit(logit_p)) including the coefficient."""
    coeff = math.lgamma(n + 1) - math.lgamma(r + 1) - math.lgamma(n - r + 1)
    # log(p) = lp - softplus(lp); log(1-p) = -softplus(lp)
    softplus = np.logaddexp(0.0, logit_p)
    return coeff + r * logit_p - n * softplus


def linear_predictor(state: ParameterState, study: Study, arm: Arm, spec: ModelSpec,
                     study_index: int) -> float:
    """logit(pi) for one arm.  Baseline arms reduce to mu_i exactly."""
    mu_i = float(state.mu[study_index])
    b = study.baseline
    k = arm.treatment
    if k == b:
        return mu_i
    value = mu_i + theta_contrast(state.theta, b, k)
    nonbase = [a.treatment for a in study.arms if a.treatment != b]
    j = nonbase.index(k)
    value += float(state.delta[study_index][j])
    if spec.variant == "mean_shift" and study.id == spec.shift_study:
        if state.eta is None:
            raise ValueError("mean_shift evaluation requires state.eta")
        value += float(state.eta[j])
    return value


@dataclass(frozen=True, eq=False)
class PackedModel:
    """Flat array view of (dataset, spec) shared by the likelihood evaluator
    and the sampler kernel.

    Per arm: observed counts, log binomial coefficient (cached once), the
    owning study, 0-based treatment/baseline indices, and 1-based slots into
    zero-padded delta/eta vectors (slot 0 means no component).
    """

    ds: NetworkDataset
    spec: ModelSpec
    arm_study: np.ndarray
    arm_r: np.ndarray
    arm_n: np.ndarray
    arm_logchoose: np.ndarray
    arm_t: np.ndarray
    arm_b: np.ndarray
    arm_delta: np.ndarray
    arm_eta: np.ndarray
    study_arm_ptr: np.ndarray
    delta_study: np.ndarray
    delta_arm: np.ndarray
    study_delta_ptr: np.ndarray
    eta_arm: np.ndarray
    weight_study_pos: np.ndarray
    weight_beta_a: np.ndarray
    weight_beta_b: np.ndarray
    weight_ids: tuple[str, ...]

    @property
    def n_studies(self) -> int:
        return len(self.ds.studies)

    @property
    def n_arms(self) -> int:
        return len(self.arm_r)

    @property
    def n_delta(self) -> int:
        return len(self.delta_study)

    @property
    def n_eta(self) -> int:
        return len(self.eta_arm)

    @property
    def n_weights(self) -> int:
        return len(self.weight_study_pos)

    @property
    def num_treatments(self) -> int:
        return self.ds.num_treatments

    def study_weight_factors(self, state: ParameterState) -> np.ndarray:
        w = np.ones(self.n_studies)
        if self.spec.variant == "downweighted":
            if state.weights is None:
                raise ValueError("downweighted evaluation requires state.weights")
            for sid in self.weight_ids:
                w[self.ds.study_index(sid)] = state.weights[sid]
        return w

    def linear_predictors(self, state: ParameterState) -> np.ndarray:
        theta_full = state.theta_full(self.num_treatments)
        delta_pad = np.concatenate(([0.0], *[np.asarray(d, dtype=float) for d in state.delta])) \
            if state.delta else np.zeros(1)
        if self.spec.variant == "mean_shift":
            if state.eta is None:
                raise ValueError("mean_shift evaluation requires state.eta")
            eta_pad = np.concatenate(([0.0], np.asarray(state.eta, dtype=float)))
        else:
            eta_pad = np.zeros(1)
        lp = (
            np.asarray(state.mu, dtype=float)[self.arm_study]
            + theta_full[self.arm_t]
            - theta_full[self.arm_b]
            + delta_pad[self.arm_delta]
            + eta_pad[self.arm_eta]
        )
        return lp

    def arm_loglik(self, state: ParameterState) -> np.ndarray:
        lp = self.linear_predictors(state)
        if not np.all(np.isfinite(lp)):
            raise FloatingPointError("non-finite linear predictor")
        softplus = np.logaddexp(0.0, lp)
        return self.arm_logchoose + self.arm_r * lp - self.arm_n * softplus


def pack_model(ds: NetworkDataset, spec: ModelSpec) -> PackedModel:
    spec.validate_against(ds)
    arm_study, arm_r, arm_n, arm_t, arm_b = [], [], [], [], []
    arm_logchoose, arm_delta, arm_eta = [], [], []
    study_arm_ptr = [0]
    delta_study, delta_arm, study_delta_ptr = [], [], [0]
    eta_arm: list[int] = []
    next_delta = 1  # slot 0 is the zero pad

    for i, s in enumerate(ds.studies):
        b = s.baseline
        for a in s.arms:
            arm_idx = len(arm_r)
            arm_study.append(i)
            arm_r.append(float(a.events))
            arm_n.append(float(a.total))
            arm_logchoose.append(log_binom_coeff(a.total, a.events))
            arm_t.append(a.treatment - 1)
            arm_b.append(b - 1)
            if a.treatment == b:
                arm_delta.append(0)
                arm_eta.append(0)
            else:
                arm_delta.append(next_delta)
                delta_study.append(i)
                delta_arm.append(arm_idx)
                next_delta += 1
                if spec.variant == "mean_shift" and s.id == spec.shift_study:
                    eta_arm.append(arm_idx)
                    arm_eta.append(len(eta_arm))
                else:
                    arm_eta.append(0)
        study_arm_ptr.append(len(arm_r))
        study_delta_ptr.append(len(delta_study))

    if spec.variant == "downweighted":
        weight_ids = tuple(spec.plan.study_ids)
        weight_study_pos = np.array([ds.study_index(sid) for sid in weight_ids], dtype=np.int64)
        weight_beta_a = np.array([spec.plan.entries[sid][0] for sid in weight_ids])
        weight_beta_b = np.array([spec.plan.entries[sid][1] for sid in weight_ids])
    else:
        weight_ids = ()
        weight_study_pos = np.zeros(0, dtype=np.int64)
        weight_beta_a = np.zeros(0)
        weight_beta_b = np.zeros(0)

    return PackedModel(
        ds=ds,
        spec=spec,
        arm_study=np.array(arm_study, dtype=np.int64),
        arm_r=np.array(arm_r),
        arm_n=np.array(arm_n),
        arm_logchoose=np.array(arm_logchoose),
        arm_t=np.array(arm_t, dtype=np.int64),
        arm_b=np.array(arm_b, dtype=np.int64),
        arm_delta=np.array(arm_delta, dtype=np.int64),
        arm_eta=np.array(arm_eta, dtype=np.int64),
        study_arm_ptr=np.array(study_arm_ptr, dtype=np.int64),
        delta_study=np.array(delta_study, dtype=np.int64),
        delta_arm=np.array(delta_arm, dtype=np.int64),
        study_delta_ptr=np.array(study_delta_ptr, dtype=np.int64),
        eta_arm=np.array(eta_arm, dtype=np.int64),
        weight_study_pos=weight_study_pos,
        weight_beta_a=weight_beta_a,
        weight_beta_b=weight_beta_b,
        weight_ids=weight_ids,
    )


def log_likelihood(state: ParameterState, ds: NetworkDataset, spec: ModelSpec,
                   packed: PackedModel | None = None) -> float:
    """Sum over studies and arms of binomial log-pmfs (coefficients included).
    Down-weighted studies contribute w_j times their log-likelihood."""
    pm = packed if packed is not None else pack_model(ds, spec)
    per_arm = pm.arm_loglik(state)
    factors = pm.study_weight_factors(state)[pm.arm_study]
    return float(np.sum(per_arm * factors))


def log_prior(state: ParameterState, spec: ModelSpec, ds: NetworkDataset | None = None) -> float:
    """Joint log prior.  Returns -inf (never raises) outside the tau support."""
    pr = spec.priors
    total = 0.0
    for x in np.asarray(state.mu, dtype=float):
        total += _normal_logpdf(float(x), pr.normal_sd)
    for x in np.asarray(state.theta, dtype=float):
        total += _normal_logpdf(float(x), pr.normal_sd)
    if spec.variant == "mean_shift":
        if state.eta is None:
            raise ValueError("mean_shift prior requires state.eta")
        for x in np.asarray(state.eta, dtype=float):
            total += _normal_logpdf(float(x), pr.normal_sd)

    tau_term = pr.log_tau2_prior(state.tau2)
    if tau_term == -math.inf:
        return -math.inf
    total += tau_term

    for block in state.delta:
        if len(block):
            dterm = compound_symmetric_logpdf(np.asarray(block, dtype=float), state.tau2)
            if dterm == -math.inf:
                return -math.inf
            total += dterm

    if spec.variant == "downweighted":
        if state.weights is None:
            raise ValueError("downweighted prior requires state.weights")
        for sid in spec.plan.study_ids:
            a, b = spec.plan.entries[sid]
            total += beta_logpdf(state.weights[sid], a, b)
    return total


def log_posterior_unnorm(state: ParameterState, ds: NetworkDataset, spec: ModelSpec,
                         packed: PackedModel | None = None) -> float:
    lp = log_prior(state, spec, ds)
    if lp == -math.inf:
        return -math.inf
    return lp + log_likelihood(state, ds, spec, packed)
