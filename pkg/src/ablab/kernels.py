"""Hot loops, each in a numba and a pure-numpy flavour.

The public wrappers dispatch on :func:`ablab._jit.use_numba`.  Both paths
must produce identical results; ``tests/test_kernels.py`` holds them to that.
"""
from __future__ import annotations

import numpy as np

from ._jit import njit, use_numba

# --------------------------------------------------------------------------
# delayed-reaction stepping
# --------------------------------------------------------------------------


@njit
def _euler_delay_numba(hist, gamma_lag, target_lag, n_sub, h):
    n_pulses, n_hist = hist.shape
    n_steps = gamma_lag.shape[0]
    out = np.empty((n_pulses, n_hist + n_steps))
    for p in range(n_pulses):
        for k in range(n_hist):
            out[p, k] = hist[p, k]
        for s in range(n_steps):
            k = n_sub + s
            out[p, k + 1] = out[p, k] - h * gamma_lag[s] * (out[p, k - n_sub] - target_lag[s])
    return out


def _euler_delay_numpy(hist, gamma_lag, target_lag, n_sub, h):
    n_pulses, n_hist = hist.shape
    n_steps = gamma_lag.shape[0]
    out = np.empty((n_pulses, n_hist + n_steps))
    out[:, :n_hist] = hist
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(n_steps):
            k = n_sub + s
            out[:, k + 1] = out[:, k] - h * gamma_lag[s] * (out[:, k - n_sub] - target_lag[s])
    return out


def euler_delay(hist, gamma_lag, target_lag, n_sub, h):
    """Forward-Euler march of ``x' = -G(t - tau) [x(t - tau) - target(t - tau/2)]``.

    ``hist`` is ``(pulses, n_sub + 1)``: the samples on ``[0, tau]``.
    ``gamma_lag[s]`` and ``target_lag[s]`` are the delayed drive and target
    read at step ``s`` (grid index ``n_sub + s``).  Returns the full grid,
    history included, shape ``(pulses, n_sub + 1 + len(gamma_lag))``.
    """
    hist = np.ascontiguousarray(hist, dtype=np.float64)
    if hist.ndim != 2 or hist.shape[1] != n_sub + 1:
        raise ValueError(f"history must have shape (pulses, {n_sub + 1}), got {hist.shape}")
    gamma_lag = np.ascontiguousarray(gamma_lag, dtype=np.float64)
    target_lag = np.ascontiguousarray(target_lag, dtype=np.float64)
    if gamma_lag.shape != target_lag.shape:
        raise ValueError("gamma_lag and target_lag differ in length")
    fn = _euler_delay_numba if use_numba() else _euler_delay_numpy
    return fn(hist, gamma_lag, target_lag, int(n_sub), float(h))


# --------------------------------------------------------------------------
# coincidence candidates and greedy acceptance
# --------------------------------------------------------------------------


@njit
def _candidates_numba(ta, tb, window):
    na = ta.shape[0]
    nb = tb.shape[0]
    lo = 0
    total = 0
    for i in range(na):
        while lo < nb and tb[lo] < ta[i] - window:
            lo += 1
        j = lo
        while j < nb and tb[j] <= ta[i] + window:
            total += 1
            j += 1
    ia = np.empty(total, dtype=np.int64)
    ib = np.empty(total, dtype=np.int64)
    lo = 0
    c = 0
    for i in range(na):
        while lo < nb and tb[lo] < ta[i] - window:
            lo += 1
        j = lo
        while j < nb and tb[j] <= ta[i] + window:
            ia[c] = i
            ib[c] = j
            c += 1
            j += 1
    return ia, ib


def _candidates_numpy(ta, tb, window):
    lo = np.searchsorted(tb, ta - window, side="left")
    hi = np.searchsorted(tb, ta + window, side="right")
    counts = hi - lo
    total = int(counts.sum())
    ia = np.repeat(np.arange(ta.shape[0], dtype=np.int64), counts)
    starts = np.repeat(lo - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
    ib = (starts + np.arange(total)).astype(np.int64)
    return ia, ib


@njit
def _greedy_accept_numba(ca, cb, na, nb):
    used_a = np.zeros(na, dtype=np.bool_)
    used_b = np.zeros(nb, dtype=np.bool_)
    keep = np.zeros(ca.shape[0], dtype=np.bool_)
    for c in range(ca.shape[0]):
        i = ca[c]
        j = cb[c]
        if not used_a[i] and not used_b[j]:
            used_a[i] = True
            used_b[j] = True
            keep[c] = True
    return keep


def _greedy_accept_numpy(ca, cb, na, nb):
    # Rounds of "first remaining candidate for both its endpoints"; every such
    # candidate is also taken by the sequential scan, so the result is equal.
    keep = np.zeros(ca.shape[0], dtype=bool)
    live = np.arange(ca.shape[0])
    used_a = np.zeros(na, dtype=bool)
    used_b = np.zeros(nb, dtype=bool)
    while live.size:
        la, lb = ca[live], cb[live]
        first_a = np.zeros(live.size, dtype=bool)
        first_a[np.unique(la, return_index=True)[1]] = True
        first_b = np.zeros(live.size, dtype=bool)
        first_b[np.unique(lb, return_index=True)[1]] = True
        acc = first_a & first_b
        keep[live[acc]] = True
        used_a[la[acc]] = True
        used_b[lb[acc]] = True
        live = live[~used_a[la] & ~used_b[lb]]
    return keep


def greedy_match(ta, tb, window):
    """Closest-first greedy one-to-one matching of two sorted tick arrays.

    Candidates are all pairs with ``|ta[i] - tb[j]| <= window``, visited in
    order of (distance, earlier timestamp, i, j).  Returns index arrays
    ``(ia, ib)`` sorted by ``ia``.
    """
    ta = np.ascontiguousarray(ta, dtype=np.int64)
    tb = np.ascontiguousarray(tb, dtype=np.int64)
    window = int(window)
    if window < 0:
        raise ValueError("window must be >= 0")
    if ta.size == 0 or tb.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    if use_numba():
        ca, cb = _candidates_numba(ta, tb, window)
    else:
        ca, cb = _candidates_numpy(ta, tb, window)
    if ca.size == 0:
        return ca, cb
    dist = np.abs(ta[ca] - tb[cb])
    earlier = np.minimum(ta[ca], tb[cb])
    order = np.lexsort((cb, ca, earlier, dist))
    ca, cb = ca[order], cb[order]
    if use_numba():
        keep = _greedy_accept_numba(ca, cb, ta.size, tb.size)
    else:
        keep = _greedy_accept_numpy(ca, cb, ta.size, tb.size)
    ia, ib = ca[keep], cb[keep]
    srt = np.argsort(ia, kind="stable")
    return ia[srt], ib[srt]
