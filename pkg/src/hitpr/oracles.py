"""Slow, straight-line reference computations.

Plain Python loops over the same definitions the vectorized code implements;
used by the selftest and the test-suite as independent checks.
"""

from __future__ import annotations

import math

import numpy as np


def _d2(a, b):
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def _key(pts, i):
    return (float(pts[i][0]), float(pts[i][1]), float(pts[i][2]), i)


def fps_bruteforce(points, n_centers):
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    p = len(pts)
    seed = min(range(p), key=lambda i: (-_d2(pts[i], centroid),) + _key(pts, i))
    chosen = [seed]
    while len(chosen) < n_centers:
        best, best_key = None, None
        for i in range(p):
            if i in chosen:
                continue
            md = min(_d2(pts[i], pts[j]) for j in chosen)
            key = (-md,) + _key(pts, i)
            if best_key is None or key < best_key:
                best, best_key = i, key
        chosen.append(best)
    return chosen


def fps_min_distances(points, selected):
    """Min squared distance of each pick to the picks before it (seed excluded)."""
    pts = np.asarray(points, dtype=np.float64)
    return [min(_d2(pts[s], pts[t]) for t in selected[:i]) for i, s in enumerate(selected) if i]


def knn_bruteforce(points, centers, k):
    pts = np.asarray(points, dtype=np.float64)
    out = []
    for c in centers:
        order = sorted(range(len(pts)),
                       key=lambda j: (_d2(pts[j], pts[c]), j != c) + _key(pts, j))
        out.append(order[:k])
    return out


def srt_attention_loops(q, k, v, delta, attn_w, attn_b, ln_g, ln_b, proj_w, proj_b, eps=1e-5):
    """One cloud: q (N, D); k, v, delta (N, K, D).  Returns (N, D_S) and weights (N, K, D)."""
    n_cells, n_nb, d = k.shape
    out = np.zeros((n_cells, proj_w.shape[1]))
    weights = np.zeros((n_cells, n_nb, d))
    for n in range(n_cells):
        logits = []
        for j in range(n_nb):
            rel = [q[n][c] - k[n][j][c] + delta[n][j][c] for c in range(d)]
            h = [sum(rel[i] * attn_w[i][c] for i in range(d)) + attn_b[c] for c in range(d)]
            mu = sum(h) / d
            var = sum((x - mu) ** 2 for x in h) / d
            logits.append([(h[c] - mu) / math.sqrt(var + eps) * ln_g[c] + ln_b[c] for c in range(d)])
        s = [0.0] * d
        for c in range(d):
            top = max(logits[j][c] for j in range(n_nb))
            ex = [math.exp(logits[j][c] - top) for j in range(n_nb)]
            tot = sum(ex)
            for j in range(n_nb):
                weights[n, j, c] = ex[j] / tot
                s[c] += weights[n, j, c] * (v[n][j][c] + delta[n][j][c])
        for o in range(proj_w.shape[1]):
            out[n, o] = sum(s[c] * proj_w[c][o] for c in range(d)) + proj_b[o]
    return out, weights


def lrt_attention_loops(q, k, v):
    n, d_k = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        scores = [sum(q[i][c] * k[j][c] for c in range(d_k)) / math.sqrt(d_k) for j in range(n)]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        tot = sum(ex)
        for c in range(v.shape[1]):
            out[i, c] = sum(ex[j] / tot * v[j][c] for j in range(n))
    return out


def quadruplet_loss_arith(anchor, positives, negatives, other, alpha, beta):
    """(total, term_neg, term_other) by plain arithmetic, squared distances."""
    d_pos = max(_d2(anchor, p) for p in positives)
    term_neg = max(max(alpha + d_pos - _d2(anchor, n), 0.0) for n in negatives)
    term_other = max(max(beta + d_pos - _d2(other, n), 0.0) for n in negatives)
    return term_neg + term_other, term_neg, term_other
