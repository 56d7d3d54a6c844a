"""Brute-force reference implementations written with explicit Python loops.

They share no code with the library beyond numpy scalars, so agreement
between the two is meaningful.
"""

import math

import numpy as np


def matmul_loops(x, w, b=None):
    n, d = len(x), len(x[0])
    m = len(w[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                s += float(x[i][k]) * float(w[k][j])
            out[i, j] = s + (float(b[j]) if b is not None else 0.0)
    return out


def softmax_loops(v):
    v = [float(a) for a in v]
    top = max(v)
    e = [math.exp(a - top) for a in v]
    z = sum(e)
    return np.array([a / z for a in e])


def sq_dist(a, b):
    return sum((float(p) - float(q)) ** 2 for p, q in zip(a, b))


def knn_loops(x, k):
    """Neighbors ascending by distance, ties by lower index, self excluded."""
    n = len(x)
    out = []
    for i in range(n):
        cand = [(sq_dist(x[i], x[j]), j) for j in range(n) if j != i]
        cand.sort()
        out.append([j for _, j in cand[:k]])
    return np.array(out, dtype=np.int64)


def fps_loops(x, m, start=0):
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for j in range(len(x)):
            if j in chosen:
                continue
            d = min(sq_dist(x[j], x[c]) for c in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return chosen


def attentive_scores_loops(p, wg, bg, wh, bh):
    """Column-normalized bilinear attention; alpha_i = sum_j beta[i, j]."""
    n = len(p)
    g = matmul_loops(p, wg, bg)
    h = matmul_loops(p, wh, bh)
    s = [[sum(g[i][c] * h[j][c] for c in range(len(g[0]))) for j in range(n)] for i in range(n)]
    alpha = [0.0] * n
    for j in range(n):
        col = softmax_loops([s[i][j] for i in range(n)])
        for i in range(n):
            alpha[i] += col[i]
    return np.array(alpha)


def edge_features_loops(f, nbr):
    n, k = len(nbr), len(nbr[0])
    c = len(f[0])
    out = np.zeros((n, k, 2 * c))
    for i in range(n):
        for j in range(k):
            q = nbr[i][j]
            for ch in range(c):
                out[i, j, ch] = f[i][ch]
                out[i, j, c + ch] = f[q][ch] - f[i][ch]
    return out


def edge_conv_loops(f, nbr, w, b):
    """relu(max_j (h_ij W + b)) computed on explicit edge features."""
    h = edge_features_loops(f, nbr)
    n, k, _ = h.shape
    cout = len(w[0])
    out = np.zeros((n, cout))
    for i in range(n):
        resp = matmul_loops(h[i], w, b)
        for o in range(cout):
            best = max(resp[j, o] for j in range(k))
            out[i, o] = max(best, 0.0)
    return out


def fusion_weights_loops(omegas):
    """Per-channel softmax across the branch list."""
    m, c = len(omegas), len(omegas[0])
    psi = np.zeros((m, c))
    for ch in range(c):
        col = softmax_loops([omegas[b][ch] for b in range(m)])
        for b in range(m):
            psi[b, ch] = col[b]
    return psi


def fuse_loops(psi, feats):
    m, c = len(feats), len(feats[0])
    return np.array([sum(psi[b][ch] * feats[b][ch] for b in range(m)) for ch in range(c)])


def spearman(a, b):
    """Rank correlation with average ranks for ties."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(order):
            j = i
            while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for t in range(i, j + 1):
                r[order[t]] = (i + j) / 2.0
            i = j + 1
        return np.array(r)
    ra, rb = ranks(list(a)), ranks(list(b))
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float((ra ** 2).sum() * (rb ** 2).sum()))
    return float((ra * rb).sum() / den) if den > 0 else 0.0
