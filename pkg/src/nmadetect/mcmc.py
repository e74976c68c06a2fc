"""Adaptive Metropolis-within-Gibbs sampling and convergence diagnostics.

Chains are seeded independently by splitting the master seed with the chain
index, so a (seed, chain) pair fully determines every draw regardless of
execution order.  Step sizes adapt during burn-in only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernel
from .data import NetworkDataset
from .model import ModelSpec, PackedModel, ParameterState, log_posterior_unnorm, pack_model


class SamplerDiagnosticError(RuntimeError):
    """Sampler failed a health check (bad initialization, dead blocks,
    or non-converged chains)."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 50_000
    burn_in: int = 10_000
    chains: int = 2
    thin: int = 1
    seed: int = 0
    adapt_window: int = 50
    target_accept: float = 0.44
    likelihood_power: float = 1.0

    def __post_init__(self) -> None:
        if self.iterations <= 0 or self.burn_in < 0:
            raise ValueError("iterations must be positive and burn_in non-negative")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.chains < 1 or self.thin < 1 or self.adapt_window < 1:
            raise ValueError("chains, thin and adapt_window must be >= 1")
        if (self.iterations - self.burn_in) % self.thin != 0:
            raise ValueError("thin must divide iterations - burn_in")
        if self.burn_in % self.adapt_window != 0 or self.iterations % self.adapt_window != 0:
            raise ValueError("burn_in and iterations must be multiples of adapt_window")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0,1)")
        if not 0.0 <= self.likelihood_power <= 1.0:
            raise ValueError("likelihood_power must be in [0,1]")

    @property
    def draws_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def chain_seed(master_seed: int, chain: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(chain,))
    return int(ss.generate_state(1, np.uint32)[0])


def _theta_csr(pm: PackedModel) -> tuple[np.ndarray, ...]:
    """Arms whose linear predictor involves each free theta component, with
    the +-1 coefficient from theta_bk = theta_1k - theta_1b, plus the
    distinct studies each component touches (for the sweep moves)."""
    km1 = pm.num_treatments - 1
    per: list[list[tuple[int, float]]] = [[] for _ in range(km1)]
    for a in range(pm.n_arms):
        t, b = int(pm.arm_t[a]), int(pm.arm_b[a])
        if t == b:
            continue
        if t >= 1:
            per[t - 1].append((a, 1.0))
        if b >= 1:
            per[b - 1].append((a, -1.0))
    ptr = [0]
    idx: list[int] = []
    coef: list[float] = []
    sptr = [0]
    sidx: list[int] = []
    for lst in per:
        studies = set()
        for a, c in lst:
            idx.append(a)
            coef.append(c)
            studies.add(int(pm.arm_study[a]))
        sidx.extend(sorted(studies))
        ptr.append(len(idx))
        sptr.append(len(sidx))
    return (np.array(ptr, dtype=np.int64), np.array(idx, dtype=np.int64), np.array(coef),
            np.array(sptr, dtype=np.int64), np.array(sidx, dtype=np.int64))


def initial_state(pm: PackedModel) -> ParameterState:
    """In-support, data-informed start: mu at the continuity-corrected
    baseline logit, theta/delta/eta at zero, tau at 0.1, w at the prior mean."""
    ds, spec = pm.ds, pm.spec
    mu0 = np.zeros(pm.n_studies)
    for i, s in enumerate(ds.studies):
        base = next(a for a in s.arms if a.treatment == s.baseline)
        p = (base.events + 0.5) / (base.total + 1.0)
        mu0[i] = math.log(p / (1.0 - p))
    delta0 = tuple(
        np.zeros(int(pm.study_delta_ptr[i + 1] - pm.study_delta_ptr[i]))
        for i in range(pm.n_studies)
    )
    eta0 = np.zeros(pm.n_eta) if spec.variant == "mean_shift" else None
    weights0 = None
    if spec.variant == "downweighted":
        weights0 = {
            sid: float(a / (a + b))
            for sid, (a, b) in spec.plan.entries.items()
        }
    return ParameterState(mu=mu0, theta=np.zeros(pm.num_treatments - 1), delta=delta0,
                          tau2=0.01, eta=eta0, weights=weights0)


def _block_names(pm: PackedModel) -> list[str]:
    ds = pm.ds
    names = [f"mu[{s.id}]" for s in ds.studies]
    names += [f"theta[{t}]" for t in range(2, pm.num_treatments + 1)]
    for i, s in enumerate(ds.studies):
        for j in range(int(pm.study_delta_ptr[i + 1] - pm.study_delta_ptr[i])):
            names.append(f"delta[{s.id}][{j}]")
    names += [f"eta[{j}]" for j in range(pm.n_eta)]
    names.append("tau2")
    names += [f"w[{sid}]" for sid in pm.weight_ids]
    return names


@dataclass(eq=False)
class PosteriorSamples:
    """Thinned post-burn-in draws from one or more chains."""

    packed: PackedModel
    config: SamplerConfig
    mu: np.ndarray      # (chains, draws, n_studies)
    theta: np.ndarray   # (chains, draws, K-1)
    delta: np.ndarray   # (chains, draws, n_delta)
    tau2: np.ndarray    # (chains, draws)
    eta: np.ndarray     # (chains, draws, n_eta)
    w: np.ndarray       # (chains, draws, n_weights)
    loglik: np.ndarray  # (chains, draws)
    accept_rates: dict[str, float]
    step_log: np.ndarray  # (chains, windows, blocks), log step sizes
    final_states: list[ParameterState] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.mu.shape[0]

    @property
    def n_draws(self) -> int:
        return self.mu.shape[1]

    def param_names(self) -> list[str]:
        return _block_names(self.packed)

    def get(self, param: str) -> np.ndarray:
        """Per-chain draws of one scalar parameter, shape (chains, draws)."""
        names = self.param_names()
        try:
            pos = names.index(param)
        except ValueError:
            raise KeyError(f"unknown parameter {param!r}") from None
        pm = self.packed
        n, km1, d, e = pm.n_studies, pm.num_treatments - 1, pm.n_delta, pm.n_eta
        if pos < n:
            return self.mu[:, :, pos]
        pos -= n
        if pos < km1:
            return self.theta[:, :, pos]
        pos -= km1
        if pos < d:
            return self.delta[:, :, pos]
        pos -= d
        if pos < e:
            return self.eta[:, :, pos]
        pos -= e
        if pos == 0:
            return self.tau2
        return self.w[:, :, pos - 1]

    def pooled(self, param: str) -> np.ndarray:
        return self.get(param).reshape(-1)

    def state_at(self, chain: int, draw: int) -> ParameterState:
        pm = self.packed
        blocks = tuple(
            self.delta[chain, draw, pm.study_delta_ptr[i]:pm.study_delta_ptr[i + 1]].copy()
            for i in range(pm.n_studies)
        )
        eta = self.eta[chain, draw].copy() if pm.spec.variant == "mean_shift" else None
        weights = None
        if pm.spec.variant == "downweighted":
            weights = {sid: float(self.w[chain, draw, j]) for j, sid in enumerate(pm.weight_ids)}
        return ParameterState(mu=self.mu[chain, draw].copy(), theta=self.theta[chain, draw].copy(),
                              delta=blocks, tau2=float(self.tau2[chain, draw]), eta=eta,
                              weights=weights)

    @cached_property
    def rhats(self) -> dict[str, float]:
        """Split R-hat per scalar parameter (nan for single-chain runs or
        zero-variance parameters)."""
        out: dict[str, float] = {}
        for name in self.param_names():
            draws = self.get(name)
            try:
                out[name] = rhat_arrays(draws)
            except ValueError:
                out[name] = math.nan
        return out

    @cached_property
    def diagnostics(self) -> dict[str, tuple[float, float]]:
        """{param: (rhat, ess)} for every stored scalar."""
        out: dict[str, tuple[float, float]] = {}
        for name in self.param_names():
            draws = self.get(name)
            try:
                r = rhat_arrays(draws)
            except ValueError:
                r = math.nan
            try:
                e = ess_arrays(draws)
            except ValueError:
                e = math.nan
            out[name] = (r, e)
        return out

    def dump_csv(self, path: str | Path) -> None:
        """Long-format draw dump: chain,iter,param,value."""
        names = self.param_names()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "iter", "param", "value"])
            for name in names:
                draws = self.get(name)
                for c in range(self.n_chains):
                    for s in range(self.n_draws):
                        writer.writerow([c, s, name, repr(float(draws[c, s]))])


def sample(ds: NetworkDataset, spec: ModelSpec, cfg: SamplerConfig,
           init: ParameterState | None = None,
           packed: PackedModel | None = None) -> PosteriorSamples:
    """Draw from the unnormalized posterior of the given model variant.

    Raises SamplerDiagnosticError for a non-finite log-posterior at
    initialization or for any update block with zero accepted proposals
    over the full burn-in.
    """
    pm = packed if packed is not None else pack_model(ds, spec)
    state0 = init if init is not None else initial_state(pm)
    lp0 = log_posterior_unnorm(state0, ds, spec, pm)
    if not np.isfinite(lp0):
        raise SamplerDiagnosticError(f"non-finite log-posterior at initialization: {lp0}")

    theta_ptr, theta_idx, theta_coef, sweep_sptr, sweep_sidx = _theta_csr(pm)
    delta0 = np.concatenate([np.asarray(b, dtype=float) for b in state0.delta]) \
        if state0.delta else np.zeros(0)
    eta0 = np.asarray(state0.eta, dtype=float) if state0.eta is not None else np.zeros(0)
    w0 = np.array([state0.weights[sid] for sid in pm.weight_ids]) \
        if state0.weights is not None else np.zeros(0)

    # trailing kernel blocks are proposal-only moves, not parameters
    move_names = ["tau_delta_rescale"] + [
        f"theta_delta_sweep[{t}]" for t in range(2, pm.num_treatments + 1)
    ]
    names = _block_names(pm) + move_names
    mu_all, theta_all, delta_all, tau2_all = [], [], [], []
    eta_all, w_all, ll_all, steps_all = [], [], [], []
    acc_post_total = np.zeros(len(names))
    finals: list[ParameterState] = []

    for c in range(cfg.chains):
        out = _kernel.run_chain(
            pm.arm_study, pm.arm_r, pm.arm_n, pm.arm_logchoose, pm.arm_t, pm.arm_b,
            pm.arm_delta, pm.arm_eta, pm.study_arm_ptr, pm.delta_study, pm.delta_arm,
            pm.study_delta_ptr, pm.eta_arm, theta_ptr, theta_idx, theta_coef,
            sweep_sptr, sweep_sidx,
            pm.weight_study_pos, pm.weight_beta_a, pm.weight_beta_b,
            pm.num_treatments,
            spec.priors.normal_sd, spec.priors.tau_upper,
            spec.priors.tau_prior_scale == "on_tau", cfg.likelihood_power,
            cfg.iterations, cfg.burn_in, cfg.thin, cfg.adapt_window,
            cfg.target_accept, chain_seed(cfg.seed, c),
            np.asarray(state0.mu, dtype=float), np.asarray(state0.theta, dtype=float),
            delta0, float(state0.tau2), eta0, w0,
        )
        (mu_d, theta_d, delta_d, tau2_d, eta_d, w_d, ll_d,
         acc_burn, acc_post, steps_log,
         mu_f, theta_f, delta_f, tau2_f, eta_f, w_f) = out

        if cfg.burn_in > 0:
            never_proposed = set()
            if pm.n_delta == 0:
                never_proposed.add("tau_delta_rescale")
            for j in range(pm.num_treatments - 1):
                if theta_ptr[j + 1] == theta_ptr[j]:
                    never_proposed.add(f"theta_delta_sweep[{j + 2}]")
            dead = [
                names[b] for b in range(len(names))
                if acc_burn[b] == 0 and names[b] not in never_proposed
            ]
            if dead:
                raise SamplerDiagnosticError(
                    f"zero acceptance over the full burn-in in chain {c} for blocks: {dead}",
                    dump={"chain": c, "blocks": dead},
                )
        mu_all.append(mu_d)
        theta_all.append(theta_d)
        delta_all.append(delta_d)
        tau2_all.append(tau2_d)
        eta_all.append(eta_d)
        w_all.append(w_d)
        ll_all.append(ll_d)
        steps_all.append(steps_log)
        acc_post_total += acc_post

        blocks = tuple(
            delta_f[pm.study_delta_ptr[i]:pm.study_delta_ptr[i + 1]].copy()
            for i in range(pm.n_studies)
        )
        finals.append(ParameterState(
            mu=mu_f, theta=theta_f, delta=blocks, tau2=float(tau2_f),
            eta=eta_f.copy() if spec.variant == "mean_shift" else None,
            weights={sid: float(w_f[j]) for j, sid in enumerate(pm.weight_ids)}
            if spec.variant == "downweighted" else None,
        ))

    post_iters = (cfg.iterations - cfg.burn_in) * cfg.chains
    accept_rates = {
        names[b]: float(acc_post_total[b]) / post_iters for b in range(len(names))
    }
    return PosteriorSamples(
        packed=pm, config=cfg,
        mu=np.stack(mu_all), theta=np.stack(theta_all), delta=np.stack(delta_all),
        tau2=np.stack(tau2_all), eta=np.stack(eta_all), w=np.stack(w_all),
        loglik=np.stack(ll_all), accept_rates=accept_rates,
        step_log=np.stack(steps_all), final_states=finals,
    )


# --- convergence diagnostics ---


def rhat_arrays(draws: np.ndarray) -> float:
    """Split-chain potential scale reduction factor.

    draws: (chains, samples).  Requires >= 2 chains and >= 4 draws per chain;
    degenerate zero-variance input is an error rather than 1.0.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must be 2-D (chains, samples)")
    m, n = draws.shape
    if m < 2:
        raise ValueError("rhat requires at least 2 chains")
    if n < 4:
        raise ValueError("rhat requires at least 4 draws per chain")
    half = n // 2
    split = np.vstack([draws[:, :half], draws[:, n - half:]])
    means = split.mean(axis=1)
    variances = split.var(axis=1, ddof=1)
    w_var = variances.mean()
    b_var = half * means.var(ddof=1)
    if w_var == 0.0 and b_var == 0.0:
        raise ValueError("degenerate draws: zero within- and between-chain variance")
    if w_var == 0.0:
        return math.inf
    var_hat = (half - 1) / half * w_var + b_var / half
    return float(math.sqrt(var_hat / w_var))


def ess_1d(x: np.ndarray) -> float:
    """Effective sample size via the initial monotone positive sequence
    estimator on FFT autocovariances."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        raise ValueError("ess requires at least 4 draws")
    x = x - x.mean()
    if np.all(x == 0.0):
        raise ValueError("degenerate draws: zero variance")
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real / n
    gamma0 = acov[0]
    # pair sums Gamma_m = gamma_{2m} + gamma_{2m+1}; keep the initial
    # positive, monotone-decreasing run
    pair_count = (n - 1) // 2
    rho_sum = 0.0
    prev = math.inf
    for mpair in range(pair_count):
        g = acov[2 * mpair + 1] + acov[2 * mpair + 2]
        if g <= 0.0:
            break
        g = min(g, prev)
        prev = g
        rho_sum += g
    act = 1.0 + 2.0 * rho_sum / gamma0
    ess = n / max(act, 1.0 / n)
    return float(min(ess, n))


def ess_arrays(draws: np.ndarray) -> float:
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    return float(sum(ess_1d(chain) for chain in draws))


def rhat(samples: PosteriorSamples, param: str) -> float:
    return rhat_arrays(samples.get(param))


def effective_sample_size(samples: PosteriorSamples, param: str) -> float:
    draws = samples.get(param)
    if draws.shape[0] * draws.shape[1] < 100:
        raise ValueError("effective_sample_size requires at least 100 post-burn-in draws")
    return ess_arrays(draws)


def mc_standard_error(samples: PosteriorSamples, param: str) -> float:
    pooled = samples.pooled(param)
    return float(pooled.std(ddof=1) / math.sqrt(ess_arrays(samples.get(param))))
