"""Compiled inner loops. Public wrappers live in markov.py and backtest.py."""

import numpy as np
from numba import njit

K = 15

EXIT_NONE = -1
EXIT_STOP = 0
EXIT_TIMEOUT = 1
EXIT_TAKE_PROFIT = 2
EXIT_SESSION_CLOSE = 3


@njit(cache=True)
def encode_states(ts, close, volume, window_s):
    """State index for bars 1..n-1 of one session (bar 0 has no predecessor)."""
    n = ts.shape[0]
    out = np.empty(max(n - 1, 0), np.int64)
    lo = 0
    for i in range(1, n):
        while ts[lo] <= ts[i] - window_s:
            lo += 1
        below = 0
        for j in range(lo, i + 1):
            if volume[j] <= volume[i]:
                below += 1
        m = i - lo + 1
        q = (5 * below + m - 1) // m
        if q < 1:
            q = 1
        elif q > 5:
            q = 5
        d = close[i] - close[i - 1]
        s = 1 if d > 0 else (-1 if d < 0 else 0)
        out[i - 1] = (s + 1) * 5 + (q - 1)
    return out


@njit(cache=True)
def probs_from_counts(counts):
    k = counts.shape[0]
    P = np.empty((k, k))
    for i in range(k):
        tot = 0.0
        for j in range(k):
            tot += counts[i, j]
        if tot > 0:
            for j in range(k):
                P[i, j] = counts[i, j] / tot
        else:
            for j in range(k):
                P[i, j] = 1.0 / k
    return P


@njit(cache=True)
def _vecmat(v, M, out):
    k = M.shape[0]
    for j in range(k):
        acc = 0.0
        for i in range(k):
            acc += v[i] * M[i, j]
        out[j] = acc


@njit(cache=True)
def _residual(pi, P, y):
    _vecmat(pi, P, y)
    r = 0.0
    for j in range(pi.shape[0]):
        r += abs(y[j] - pi[j])
    return r


@njit(cache=True)
def _normalize(v):
    tot = 0.0
    for j in range(v.shape[0]):
        tot += v[j]
    for j in range(v.shape[0]):
        v[j] /= tot


PLAIN_STEPS = 32
LAZY = 0.1


@njit(cache=True)
def stationary_power(P, tol, max_iter):
    """Power iteration on the lazy chain L = a I + (1 - a) P from the uniform vector.

    With a = LAZY > 0, L has the same fixed points as P but no periodic
    eigenvalues (-1 maps to 2a - 1), so the
    iterate converges whenever the recurrent class is unique. After
    PLAIN_STEPS single steps the iterate is advanced by repeated squaring
    (pi L^2, pi L^4, ...); ``iterations`` counts powers of L applied.
    Returns (pi, residual ||pi P - pi||_1, iterations, converged).
    """
    k = P.shape[0]
    pi = np.full(k, 1.0 / k)
    y = np.empty(k)
    it = 0
    residual = _residual(pi, P, y)
    while residual > tol and it < max_iter and it < PLAIN_STEPS:
        for j in range(k):
            pi[j] = LAZY * pi[j] + (1.0 - LAZY) * y[j]
        _normalize(pi)
        it += 1
        residual = _residual(pi, P, y)
    if residual > tol and it < max_iter:
        M = (1.0 - LAZY) * P
        for i in range(k):
            M[i, i] += LAZY
        step = 1
        while residual > tol and it + 2 * step <= max_iter:
            M = M @ M
            for i in range(k):
                _normalize(M[i])
            step *= 2
            _vecmat(pi, M, y)
            pi[:] = y
            _normalize(pi)
            it += step
            residual = _residual(pi, P, y)
    return pi, residual, it, residual <= tol


@njit(cache=True)
def normalized_entropy(P, pi):
    k = P.shape[0]
    logk = np.log(k)
    uniform_p = 1.0 / k
    num = 0.0
    den = 0.0
    for i in range(k):
        row = 0.0
        uniform = True
        for j in range(k):
            p = P[i, j]
            if p != uniform_p:
                uniform = False
            if p > 0.0:
                row -= p * np.log(p)
        # exact 1 for uniform rows so a fully uniform chain gives H == 1.0
        r = 1.0 if uniform else row / logk
        num += pi[i] * r
        den += pi[i]
    h = num / den
    if h > 1.0:
        h = 1.0
    elif h < 0.0:
        h = 0.0
    return h


@njit(cache=True)
def entropy_series(ts, idx, window_s, min_transitions, tol, max_iter):
    """Rolling normalized entropy over one session's state sequence.

    Transition k joins idx[k-1] -> idx[k] and is stamped ts[k]; the window
    at point k holds transitions stamped in (ts[k] - window_s, ts[k]].
    """
    m = ts.shape[0]
    h = np.full(m, np.nan)
    n_trans = np.zeros(m, np.int64)
    converged = np.ones(m, np.bool_)
    residual = np.zeros(m)
    counts = np.zeros((K, K))
    lo = 1
    for k in range(m):
        if k >= 1:
            counts[idx[k - 1], idx[k]] += 1.0
        while lo <= k and ts[lo] <= ts[k] - window_s:
            counts[idx[lo - 1], idx[lo]] -= 1.0
            lo += 1
        n = k - lo + 1 if k >= 1 else 0
        n_trans[k] = n
        if n < min_transitions:
            continue
        P = probs_from_counts(counts)
        pi, res, _, ok = stationary_power(P, tol, max_iter)
        residual[k] = res
        converged[k] = ok
        h[k] = normalized_entropy(P, pi)
    return h, n_trans, converged, residual


@njit(cache=True)
def simulate_exit(ts, close, entry, direction, stop_bps, take_profit_bps, timeout_s):
    """Walk bars after ``entry`` until the first exit condition; returns (exit index, reason)."""
    n = ts.shape[0]
    if entry >= n - 1:
        return -1, EXIT_NONE
    entry_px = close[entry]
    for j in range(entry + 1, n):
        move = direction * np.log(close[j] / entry_px) * 1e4
        if move <= -stop_bps:
            return j, EXIT_STOP
        if move >= take_profit_bps:
            return j, EXIT_TAKE_PROFIT
        if ts[j] - ts[entry] >= timeout_s:
            return j, EXIT_TIMEOUT
    return n - 1, EXIT_SESSION_CLOSE


@njit(cache=True)
def exit_gross_bps(ts, close, entries, direction, stop_bps, take_profit_bps, timeout_s):
    """Gross bps for many independent trades entered at ``entries`` with one direction."""
    out = np.full(entries.shape[0], np.nan)
    for k in range(entries.shape[0]):
        e = entries[k]
        j, reason = simulate_exit(ts, close, e, direction, stop_bps, take_profit_bps, timeout_s)
        if reason != EXIT_NONE:
            out[k] = direction * np.log(close[j] / close[e]) * 1e4
    return out
