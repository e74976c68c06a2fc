"""Compiled helper for the integrated per-arm log-likelihood.

The likelihood discrepancy scores each arm against (mu, theta, tau^2) with
the study random effect integrated out:

    log integral Bin(r | n, expit(a + d)) N(d; 0, tau^2) dd

evaluated by trapezoid quadrature in log space on a merged grid covering the
prior hump (+-8 tau) and the likelihood's informative window.  Baseline arms
carry no random effect and reduce to the plain log-pmf.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SQRT_2PI = math.sqrt(2.0 * math.pi)


@njit(cache=True, inline="always")
def _ll(logchoose, r, n, lp):
    return logchoose + r * lp - n * np.logaddexp(0.0, lp)


@njit(cache=True)
def integrated_arm_loglik(r, n, logchoose, a, tau):
    """Marginal log-likelihood of one arm given anchor a = mu + theta term."""
    if tau < 1e-8:
        return _ll(logchoose, r, n, a)
    half = 41
    grid = np.empty(2 * half)
    for j in range(half):
        grid[j] = -8.0 * tau + j * (16.0 * tau / (half - 1))
    center = math.log((r + 0.5) / (n - r + 0.5)) - a
    se = math.sqrt(1.0 / (r + 0.5) + 1.0 / (n - r + 0.5))
    for j in range(half):
        grid[half + j] = center - 10.0 * se + j * (20.0 * se / (half - 1))
    grid = np.sort(grid)
    log_norm = -math.log(tau * SQRT_2PI)
    best = -1e308
    total = 0.0
    # two passes: find max of segment logs, then accumulate stably
    seg = np.empty(grid.shape[0] - 1)
    prev_f = log_norm - 0.5 * (grid[0] / tau) ** 2 + _ll(logchoose, r, n, a + grid[0])
    for j in range(grid.shape[0] - 1):
        cur_f = log_norm - 0.5 * (grid[j + 1] / tau) ** 2 \
            + _ll(logchoose, r, n, a + grid[j + 1])
        dx = grid[j + 1] - grid[j]
        if dx > 0.0:
            m = prev_f if prev_f > cur_f else cur_f
            seg[j] = m + math.log(0.5 * (math.exp(prev_f - m) + math.exp(cur_f - m))) \
                + math.log(dx)
        else:
            seg[j] = -1e308
        if seg[j] > best:
            best = seg[j]
        prev_f = cur_f
    if best <= -1e307:
        return -1e308
    for j in range(seg.shape[0]):
        total += math.exp(seg[j] - best)
    return best + math.log(total)


@njit(cache=True)
def integrated_loglik_table(r_matrix, n_arms, logchoose_matrix, anchors, taus, has_effect):
    """(draws, arms) table of integrated per-arm log-likelihoods.

    r_matrix, logchoose_matrix, anchors: (S, A); taus: (S,); has_effect: (A,)
    flags arms with a random effect (non-baseline).
    """
    S, A = r_matrix.shape
    out = np.empty((S, A))
    for s in range(S):
        tau = taus[s]
        for a in range(A):
            if has_effect[a]:
                out[s, a] = integrated_arm_loglik(
                    r_matrix[s, a], n_arms[a], logchoose_matrix[s, a], anchors[s, a], tau)
            else:
                out[s, a] = _ll(logchoose_matrix[s, a], r_matrix[s, a], n_arms[a],
                                anchors[s, a])
    return out
