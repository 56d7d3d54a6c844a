"""Compiled inner loops for the gather/pool operations in ``tensor``.

All loops run sequentially in a fixed order, so results are deterministic.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def gather_max_forward(flat, rows):
    """``out[m, c] = max_j flat[rows[m, j], c]`` and the first maximizing row."""
    m_total, k = rows.shape
    c_total = flat.shape[1]
    out = np.empty((m_total, c_total), dtype=flat.dtype)
    src = np.empty((m_total, c_total), dtype=np.int64)
    for m in range(m_total):
        r0 = rows[m, 0]
        for c in range(c_total):
            out[m, c] = flat[r0, c]
            src[m, c] = r0
        for j in range(1, k):
            r = rows[m, j]
            for c in range(c_total):
                v = flat[r, c]
                if v > out[m, c]:
                    out[m, c] = v
                    src[m, c] = r
    return out, src


@njit(cache=True)
def scatter_channels(grad, src, n_rows):
    """``out[src[m, c], c] += grad[m, c]``."""
    m_total, c_total = grad.shape
    out = np.zeros((n_rows, c_total), dtype=grad.dtype)
    for m in range(m_total):
        for c in range(c_total):
            out[src[m, c], c] += grad[m, c]
    return out


@njit(cache=True)
def argmax_middle(x):
    """First argmax over axis 1 of a 3-D array ``(P, L, Q) -> (P, Q)``."""
    p_total, l_total, q_total = x.shape
    arg = np.zeros((p_total, q_total), dtype=np.int64)
    best = np.empty(q_total, dtype=x.dtype)
    for p in range(p_total):
        for q in range(q_total):
            best[q] = x[p, 0, q]
        for i in range(1, l_total):
            for q in range(q_total):
                v = x[p, i, q]
                if v > best[q]:
                    best[q] = v
                    arg[p, q] = i
    return arg


@njit(cache=True)
def pooled_linear_backward(x, w, pre, weights, arg, g):
    """Backward of ``max_n(weights[b, n] * relu(x[b] @ w + bias)[n, c])``.

    Only the pooled row ``arg[b, c]`` of each channel carries gradient.
    Returns ``(dx, dw, dbias, dweights)``.
    """
    b_total, n_total, d_total = x.shape
    c_total = w.shape[1]
    wt = np.ascontiguousarray(w.T)
    dx = np.zeros_like(x)
    dwt = np.zeros_like(wt)
    db = np.zeros(c_total, dtype=x.dtype)
    dweights = np.zeros((b_total, n_total), dtype=x.dtype)
    for b in range(b_total):
        for c in range(c_total):
            r = arg[b, c]
            z = pre[b, r, c]
            if z <= 0:
                continue
            dweights[b, r] += g[b, c] * z
            gc = g[b, c] * weights[b, r]
            db[c] += gc
            for d in range(d_total):
                dwt[c, d] += gc * x[b, r, d]
            for d in range(d_total):
                dx[b, r, d] += gc * wt[c, d]
    return dx, np.ascontiguousarray(dwt.T), db, dweights


@njit(cache=True)
def knn_from_gram(gram, sq, k):
    """Per row, the ``k`` nearest other rows, ascending, ties to the lower index.

    ``gram`` is ``B x N x N`` (``x @ x.T`` per cloud) and ``sq`` the squared
    norms ``B x N``. Ranking row ``i`` by ``sq[j] - 2 * gram[i, j]`` is the
    squared distance minus the per-row constant ``sq[i]``.
    """
    b_total, n, _ = gram.shape
    out = np.empty((b_total, n, k), dtype=np.int64)
    # keys and the running best list stay in float64 so float32 inputs rank
    # exactly like the double-precision distances
    best = np.empty(k, dtype=np.float64)
    idx = np.empty(k, dtype=np.int64)
    v = np.empty(n, dtype=np.float64)
    for b in range(b_total):
        s = sq[b]
        for i in range(n):
            g = gram[b, i]
            for j in range(n):
                v[j] = s[j] - 2.0 * g[j]
            v[i] = np.inf
            for t in range(k):
                best[t] = np.inf
                idx[t] = n
            thresh = np.inf
            for j in range(n):
                x = v[j]
                if x < thresh:
                    pos = k - 1
                    while pos > 0 and x < best[pos - 1]:
                        best[pos] = best[pos - 1]
                        idx[pos] = idx[pos - 1]
                        pos -= 1
                    best[pos] = x
                    idx[pos] = j
                    thresh = best[k - 1]
            for t in range(k):
                out[b, i, t] = idx[t]
    return out


@njit(cache=True)
def relu_pool(pre, weights):
    """``max_r weights[b, r] * relu(pre[b, r, c])`` and the first maximizing ``r``."""
    b_total, n, c_total = pre.shape
    values = np.empty((b_total, c_total), dtype=pre.dtype)
    arg = np.zeros((b_total, c_total), dtype=np.int64)
    for b in range(b_total):
        w0 = weights[b, 0]
        for c in range(c_total):
            a = pre[b, 0, c]
            values[b, c] = (a if a > 0 else 0) * w0
        for r in range(1, n):
            w = weights[b, r]
            for c in range(c_total):
                a = pre[b, r, c]
                v = (a if a > 0 else 0) * w
                if v > values[b, c]:
                    values[b, c] = v
                    arg[b, c] = r
    return values, arg


@njit(cache=True, fastmath=True)
def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    """One in-place ADAM update over flat float arrays."""
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1 - beta1) * gi
        vi = beta2 * v[i] + (1 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
