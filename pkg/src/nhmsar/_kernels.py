"""Compiled log-space forward/backward recursions.

All arrays are float64.  ``log_trans[t, i, j]`` is the log-probability of
moving from regime ``i`` to regime ``j`` at step ``t`` and ``log_emit[t, j]``
the log-density of observation ``t`` under regime ``j``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _lse(v):
    m = v.max()
    if m == -np.inf:
        return -np.inf
    acc = 0.0
    for i in range(v.shape[0]):
        acc += np.exp(v[i] - m)
    return m + np.log(acc)


@njit(cache=True)
def forward(log_init, log_trans, log_emit):
    """Scaled forward pass.

    Returns the log filtered probabilities ``(T, M)`` and the per-step log
    normalizers ``(T,)``.  A normalizer of ``-inf`` marks a degenerate step;
    the recursion stops there and the caller raises.
    """
    T, M = log_emit.shape
    log_filt = np.full((T, M), -np.inf)
    c = np.full(T, -np.inf)
    prev = log_init.copy()
    buf = np.empty(M)
    joint = np.empty(M)
    for t in range(T):
        for j in range(M):
            for i in range(M):
                buf[i] = prev[i] + log_trans[t, i, j]
            joint[j] = _lse(buf) + log_emit[t, j]
        ct = _lse(joint)
        c[t] = ct
        if ct == -np.inf:
            return log_filt, c
        for j in range(M):
            log_filt[t, j] = joint[j] - ct
        prev = log_filt[t]
    return log_filt, c


@njit(cache=True)
def backward(log_filt, c, log_trans, log_emit):
    """Scaled backward pass; returns ``(gamma, xi)``.

    ``xi[t - 1]`` holds the pairwise posterior of ``(X_{t-1}, X_t)`` for
    ``t = 1..T-1`` (0-based rows of ``log_emit``).
    """
    T, M = log_emit.shape
    log_beta = np.zeros((T, M))
    buf = np.empty(M)
    for t in range(T - 1, 0, -1):
        for i in range(M):
            for j in range(M):
                buf[j] = log_trans[t, i, j] + log_emit[t, j] + log_beta[t, j]
            log_beta[t - 1, i] = _lse(buf) - c[t]
    gamma = np.exp(log_filt + log_beta)
    xi = np.zeros((max(T - 1, 0), M, M))
    for t in range(1, T):
        for i in range(M):
            for j in range(M):
                xi[t - 1, i, j] = np.exp(
                    log_filt[t - 1, i] + log_trans[t, i, j] + log_emit[t, j]
                    + log_beta[t, j] - c[t]
                )
    return gamma, xi
