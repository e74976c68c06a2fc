"""Compiled Metropolis-within-Gibbs core.

One full iteration sweeps scalar Gaussian random-walk updates over every
mu_i, free theta component, delta component and eta component, then the
heterogeneity on the log-tau^2 scale (with Jacobian) and any down-weighting
factors on the logit scale.  Per-arm log-likelihood terms, per-study
log-likelihood sums and per-study random-effect prior terms are cached and
updated incrementally; caches are refreshed from scratch at every recorded
draw to bound floating-point drift.

Step sizes adapt toward a target acceptance rate in windows during burn-in
only and are frozen afterwards, so the recorded portion of the chain is a
valid Markov chain.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# block layout: [mu (N)] [theta (K-1)] [delta (D)] [eta (E)] [tau (1)] [w (W)]
# plus trailing proposal-only blocks:
#   * a joint rescale of (tau^2, delta) along the funnel direction (random
#     walk on log tau^2 with delta scaled by exp(dz/2); the delta prior
#     change cancels the rescale Jacobian exactly), and
#   * one sweep per free theta component that shifts theta and counter-shifts
#     the coupled delta components, leaving every linear predictor unchanged
#     (unit-Jacobian shear; only prior terms enter the acceptance ratio).

STEP_LOG_MIN = -12.0
STEP_LOG_MAX = 6.0


@njit(cache=True, inline="always")
def _arm_ll(logchoose, r, n, lp):
    return logchoose + r * lp - n * np.logaddexp(0.0, lp)


@njit(cache=True, inline="always")
def _cs_logpdf(sumsq, total, d, tau2):
    """Compound-symmetric MVN log density from block sufficient statistics."""
    if d == 0:
        return 0.0
    quad = (2.0 / tau2) * (sumsq - total * total / (d + 1.0))
    logdet = d * math.log(tau2 / 2.0) + math.log(d + 1.0)
    return -0.5 * (d * 1.8378770664093453 + logdet + quad)


@njit(cache=True, inline="always")
def _log_tau2_prior(tau2, tau_upper, on_tau_scale):
    if tau2 <= 0.0:
        return -1e300
    if on_tau_scale:
        tau = math.sqrt(tau2)
        if tau > tau_upper:
            return -1e300
        return -math.log(tau_upper) - math.log(2.0 * tau)
    if tau2 > tau_upper:
        return -1e300
    return -math.log(tau_upper)


@njit(cache=True)
def _study_delta_prior(delta_pad, study_delta_ptr, i, tau2):
    lo = study_delta_ptr[i]
    hi = study_delta_ptr[i + 1]
    d = hi - lo
    if d == 0:
        return 0.0
    sumsq = 0.0
    total = 0.0
    for j in range(lo, hi):
        v = delta_pad[j + 1]
        sumsq += v * v
        total += v
    return _cs_logpdf(sumsq, total, d, tau2)


@njit(cache=True)
def run_chain(
    arm_study, arm_r, arm_n, arm_logchoose, arm_t, arm_b, arm_delta, arm_eta,
    study_arm_ptr, delta_study, delta_arm, study_delta_ptr, eta_arm,
    theta_arm_ptr, theta_arm_idx, theta_arm_coef,
    sweep_study_ptr, sweep_study_idx,
    weight_study_pos, weight_beta_a, weight_beta_b,
    num_treatments,
    normal_sd, tau_upper, tau_on_tau_scale, lik_power,
    n_iter, burn_in, thin, adapt_every, target_accept, seed,
    mu0, theta0, delta0, tau20, eta0, w0,
):
    np.random.seed(seed)

    N = study_arm_ptr.shape[0] - 1
    A = arm_r.shape[0]
    Km1 = num_treatments - 1
    D = delta_study.shape[0]
    E = eta_arm.shape[0]
    W = weight_study_pos.shape[0]
    n_blocks = N + Km1 + D + E + 1 + W + 1 + Km1
    off_theta = N
    off_delta = N + Km1
    off_eta = off_delta + D
    off_tau = off_eta + E
    off_w = off_tau + 1
    off_scale = off_w + W
    off_sweep = off_scale + 1

    mu = mu0.copy()
    theta_full = np.zeros(num_treatments)
    for j in range(Km1):
        theta_full[j + 1] = theta0[j]
    delta_pad = np.zeros(D + 1)
    for j in range(D):
        delta_pad[j + 1] = delta0[j]
    eta_pad = np.zeros(E + 1)
    for j in range(E):
        eta_pad[j + 1] = eta0[j]
    tau2 = tau20
    log_tau2 = math.log(tau20)
    w = w0.copy()
    w_logit = np.empty(W)
    for j in range(W):
        w_logit[j] = math.log(w[j] / (1.0 - w[j]))
    w_factor = np.ones(N)
    for j in range(W):
        w_factor[weight_study_pos[j]] = w[j]

    arm_lp = np.empty(A)
    arm_ll = np.empty(A)
    study_ll = np.zeros(N)
    delta_prior = np.zeros(N)

    for a in range(A):
        lp = mu[arm_study[a]] + theta_full[arm_t[a]] - theta_full[arm_b[a]] \
            + delta_pad[arm_delta[a]] + eta_pad[arm_eta[a]]
        arm_lp[a] = lp
        arm_ll[a] = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp)
        study_ll[arm_study[a]] += arm_ll[a]
    for i in range(N):
        delta_prior[i] = _study_delta_prior(delta_pad, study_delta_ptr, i, tau2)

    log_step = np.zeros(n_blocks)
    for b in range(n_blocks):
        log_step[b] = math.log(0.5)
    acc_win = np.zeros(n_blocks)
    acc_burn = np.zeros(n_blocks)
    acc_post = np.zeros(n_blocks)

    n_draws = (n_iter - burn_in) // thin
    S = n_draws if n_draws > 0 else 0
    mu_d = np.empty((S, N))
    theta_d = np.empty((S, Km1))
    delta_d = np.empty((S, D))
    tau2_d = np.empty(S)
    eta_d = np.empty((S, E))
    w_d = np.empty((S, W))
    ll_d = np.empty(S)

    n_windows = n_iter // adapt_every
    steps_log = np.empty((n_windows, n_blocks))
    window_num = 1.0

    inv_var = 1.0 / (normal_sd * normal_sd)
    draw_idx = 0

    for it in range(n_iter):
        # --- mu blocks ---
        for i in range(N):
            step = math.exp(log_step[i])
            cur = mu[i]
            prop = cur + step * np.random.normal()
            dprior = -0.5 * inv_var * (prop * prop - cur * cur)
            dlik = 0.0
            for a in range(study_arm_ptr[i], study_arm_ptr[i + 1]):
                lp_new = arm_lp[a] + (prop - cur)
                dlik += _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new) - arm_ll[a]
            log_alpha = dprior + lik_power * w_factor[i] * dlik
            if math.log(np.random.random()) < log_alpha:
                mu[i] = prop
                raw = 0.0
                for a in range(study_arm_ptr[i], study_arm_ptr[i + 1]):
                    arm_lp[a] += prop - cur
                    new_ll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], arm_lp[a])
                    raw += new_ll - arm_ll[a]
                    arm_ll[a] = new_ll
                study_ll[i] += raw
                acc_win[i] += 1.0

        # --- theta blocks ---
        for j in range(Km1):
            b = off_theta + j
            step = math.exp(log_step[b])
            change = step * np.random.normal()
            cur = theta_full[j + 1]
            prop = cur + change
            dprior = -0.5 * inv_var * (prop * prop - cur * cur)
            dlik = 0.0
            for p in range(theta_arm_ptr[j], theta_arm_ptr[j + 1]):
                a = theta_arm_idx[p]
                lp_new = arm_lp[a] + theta_arm_coef[p] * change
                dll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new) - arm_ll[a]
                dlik += w_factor[arm_study[a]] * dll
            log_alpha = dprior + lik_power * dlik
            if math.log(np.random.random()) < log_alpha:
                theta_full[j + 1] = prop
                for p in range(theta_arm_ptr[j], theta_arm_ptr[j + 1]):
                    a = theta_arm_idx[p]
                    arm_lp[a] += theta_arm_coef[p] * change
                    new_ll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], arm_lp[a])
                    study_ll[arm_study[a]] += new_ll - arm_ll[a]
                    arm_ll[a] = new_ll
                acc_win[b] += 1.0

        # --- delta blocks ---
        for dcomp in range(D):
            b = off_delta + dcomp
            step = math.exp(log_step[b])
            a = delta_arm[dcomp]
            i = delta_study[dcomp]
            cur = delta_pad[dcomp + 1]
            change = step * np.random.normal()
            prop = cur + change
            lp_new = arm_lp[a] + change
            dll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new) - arm_ll[a]
            delta_pad[dcomp + 1] = prop
            new_prior = _study_delta_prior(delta_pad, study_delta_ptr, i, tau2)
            delta_pad[dcomp + 1] = cur
            log_alpha = lik_power * w_factor[i] * dll + (new_prior - delta_prior[i])
            if math.log(np.random.random()) < log_alpha:
                delta_pad[dcomp + 1] = prop
                arm_lp[a] = lp_new
                new_ll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new)
                study_ll[i] += new_ll - arm_ll[a]
                arm_ll[a] = new_ll
                delta_prior[i] = new_prior
                acc_win[b] += 1.0

        # --- eta blocks ---
        for e in range(E):
            b = off_eta + e
            step = math.exp(log_step[b])
            a = eta_arm[e]
            i = arm_study[a]
            cur = eta_pad[e + 1]
            change = step * np.random.normal()
            prop = cur + change
            lp_new = arm_lp[a] + change
            dll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new) - arm_ll[a]
            dprior = -0.5 * inv_var * (prop * prop - cur * cur)
            log_alpha = dprior + lik_power * w_factor[i] * dll
            if math.log(np.random.random()) < log_alpha:
                eta_pad[e + 1] = prop
                arm_lp[a] = lp_new
                new_ll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new)
                study_ll[i] += new_ll - arm_ll[a]
                arm_ll[a] = new_ll
                acc_win[b] += 1.0

        # --- tau block (random walk on log tau^2) ---
        step = math.exp(log_step[off_tau])
        z_prop = log_tau2 + step * np.random.normal()
        tau2_prop = math.exp(z_prop)
        prior_new = _log_tau2_prior(tau2_prop, tau_upper, tau_on_tau_scale)
        if prior_new > -1e299:
            dtarget = prior_new - _log_tau2_prior(tau2, tau_upper, tau_on_tau_scale) \
                + (z_prop - log_tau2)
            dp_sum = 0.0
            for i in range(N):
                dp_sum += _study_delta_prior(delta_pad, study_delta_ptr, i, tau2_prop) \
                    - delta_prior[i]
            log_alpha = dtarget + dp_sum
            if math.log(np.random.random()) < log_alpha:
                tau2 = tau2_prop
                log_tau2 = z_prop
                for i in range(N):
                    delta_prior[i] = _study_delta_prior(delta_pad, study_delta_ptr, i, tau2)
                acc_win[off_tau] += 1.0

        # --- w blocks (random walk on logit w) ---
        for j in range(W):
            b = off_w + j
            step = math.exp(log_step[b])
            i = weight_study_pos[j]
            xi = w_logit[j]
            xi_prop = xi + step * np.random.normal()
            w_prop = 1.0 / (1.0 + math.exp(-xi_prop))
            if w_prop <= 0.0 or w_prop >= 1.0:
                continue
            cur_w = w[j]
            a_par = weight_beta_a[j]
            b_par = weight_beta_b[j]
            dprior = (a_par - 1.0) * (math.log(w_prop) - math.log(cur_w)) \
                + (b_par - 1.0) * (math.log1p(-w_prop) - math.log1p(-cur_w))
            djac = math.log(w_prop) + math.log1p(-w_prop) \
                - math.log(cur_w) - math.log1p(-cur_w)
            dlik = lik_power * (w_prop - cur_w) * study_ll[i]
            log_alpha = dlik + dprior + djac
            if math.log(np.random.random()) < log_alpha:
                w[j] = w_prop
                w_logit[j] = xi_prop
                w_factor[i] = w_prop
                acc_win[b] += 1.0

        # --- joint (tau^2, delta) rescale along the funnel ---
        if D > 0:
            step = math.exp(log_step[off_scale])
            dz = step * np.random.normal()
            z_prop = log_tau2 + dz
            tau2_prop = math.exp(z_prop)
            prior_new = _log_tau2_prior(tau2_prop, tau_upper, tau_on_tau_scale)
            if prior_new > -1e299:
                c = math.exp(0.5 * dz)
                dlik = 0.0
                for dcomp in range(D):
                    a = delta_arm[dcomp]
                    lp_new = arm_lp[a] + (c - 1.0) * delta_pad[dcomp + 1]
                    dll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp_new) - arm_ll[a]
                    dlik += w_factor[arm_study[a]] * dll
                log_alpha = (prior_new - _log_tau2_prior(tau2, tau_upper, tau_on_tau_scale)
                             + dz + lik_power * dlik)
                if math.log(np.random.random()) < log_alpha:
                    tau2 = tau2_prop
                    log_tau2 = z_prop
                    for dcomp in range(D):
                        a = delta_arm[dcomp]
                        arm_lp[a] += (c - 1.0) * delta_pad[dcomp + 1]
                        delta_pad[dcomp + 1] *= c
                        new_ll = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], arm_lp[a])
                        study_ll[arm_study[a]] += new_ll - arm_ll[a]
                        arm_ll[a] = new_ll
                    for i in range(N):
                        delta_prior[i] = _study_delta_prior(delta_pad, study_delta_ptr, i, tau2)
                    acc_win[off_scale] += 1.0

        # --- theta/delta sweeps (linear predictors invariant) ---
        for j in range(Km1):
            b = off_sweep + j
            lo = theta_arm_ptr[j]
            hi = theta_arm_ptr[j + 1]
            if hi == lo:
                continue
            step = math.exp(log_step[b])
            change = step * np.random.normal()
            cur = theta_full[j + 1]
            prop = cur + change
            dprior = -0.5 * inv_var * (prop * prop - cur * cur)
            for p in range(lo, hi):
                a = theta_arm_idx[p]
                delta_pad[arm_delta[a]] -= theta_arm_coef[p] * change
            dp_sum = 0.0
            for q in range(sweep_study_ptr[j], sweep_study_ptr[j + 1]):
                i = sweep_study_idx[q]
                dp_sum += _study_delta_prior(delta_pad, study_delta_ptr, i, tau2) \
                    - delta_prior[i]
            if math.log(np.random.random()) < dprior + dp_sum:
                theta_full[j + 1] = prop
                for q in range(sweep_study_ptr[j], sweep_study_ptr[j + 1]):
                    i = sweep_study_idx[q]
                    delta_prior[i] = _study_delta_prior(delta_pad, study_delta_ptr, i, tau2)
                acc_win[b] += 1.0
            else:
                for p in range(lo, hi):
                    a = theta_arm_idx[p]
                    delta_pad[arm_delta[a]] += theta_arm_coef[p] * change

        # --- adaptation (burn-in only) and step logging ---
        if (it + 1) % adapt_every == 0:
            win = (it + 1) // adapt_every - 1
            if it < burn_in:
                gamma = 1.0 / math.sqrt(window_num)
                for b in range(n_blocks):
                    rate = acc_win[b] / adapt_every
                    log_step[b] += gamma * (rate - target_accept)
                    if log_step[b] < STEP_LOG_MIN:
                        log_step[b] = STEP_LOG_MIN
                    elif log_step[b] > STEP_LOG_MAX:
                        log_step[b] = STEP_LOG_MAX
                window_num += 1.0
            if win < n_windows:
                for b in range(n_blocks):
                    steps_log[win, b] = log_step[b]

        if it < burn_in:
            for b in range(n_blocks):
                acc_burn[b] += acc_win[b] if (it + 1) % adapt_every == 0 else 0.0
        # accumulate acceptance tallies
        if (it + 1) % adapt_every == 0:
            if it >= burn_in:
                for b in range(n_blocks):
                    acc_post[b] += acc_win[b]
            for b in range(n_blocks):
                acc_win[b] = 0.0

        # --- record draw ---
        if it >= burn_in and (it - burn_in + 1) % thin == 0:
            # refresh caches from scratch to bound drift
            total_ll = 0.0
            for i in range(N):
                study_ll[i] = 0.0
            for a in range(A):
                lp = mu[arm_study[a]] + theta_full[arm_t[a]] - theta_full[arm_b[a]] \
                    + delta_pad[arm_delta[a]] + eta_pad[arm_eta[a]]
                arm_lp[a] = lp
                arm_ll[a] = _arm_ll(arm_logchoose[a], arm_r[a], arm_n[a], lp)
                study_ll[arm_study[a]] += arm_ll[a]
            for i in range(N):
                delta_prior[i] = _study_delta_prior(delta_pad, study_delta_ptr, i, tau2)
                total_ll += w_factor[i] * study_ll[i]
            if draw_idx < S:
                for i in range(N):
                    mu_d[draw_idx, i] = mu[i]
                for j in range(Km1):
                    theta_d[draw_idx, j] = theta_full[j + 1]
                for j in range(D):
                    delta_d[draw_idx, j] = delta_pad[j + 1]
                tau2_d[draw_idx] = tau2
                for j in range(E):
                    eta_d[draw_idx, j] = eta_pad[j + 1]
                for j in range(W):
                    w_d[draw_idx, j] = w[j]
                ll_d[draw_idx] = total_ll
                draw_idx += 1

    mu_fin = mu.copy()
    theta_fin = np.empty(Km1)
    for j in range(Km1):
        theta_fin[j] = theta_full[j + 1]
    delta_fin = np.empty(D)
    for j in range(D):
        delta_fin[j] = delta_pad[j + 1]
    eta_fin = np.empty(E)
    for j in range(E):
        eta_fin[j] = eta_pad[j + 1]
    w_fin = w.copy()

    return (mu_d, theta_d, delta_d, tau2_d, eta_d, w_d, ll_d,
            acc_burn, acc_post, steps_log,
            mu_fin, theta_fin, delta_fin, tau2, eta_fin, w_fin)
