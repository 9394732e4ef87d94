"""Lazy quadruplet loss and distance-based tuple mining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc

POS_RADIUS = 10.0
NEG_RADIUS = 50.0


@dataclass
class QuadTuple:
    anchor: str
    positives: list
    negatives: list
    other_negative: str

    @property
    def ids(self):
        return [self.anchor, *self.positives, *self.negatives, self.other_negative]


@dataclass
class LossValue:
    total: nc.Tensor
    term_neg: nc.Tensor
    term_other: nc.Tensor

    def floats(self):
        return float(self.total.data), float(self.term_neg.data), float(self.term_other.data)


def pairwise_sq_dist(a, b) -> nc.Tensor:
    """Squared Euclidean distance over the last axis (broadcasts over leading axes)."""
    a, b = nc.as_tensor(a), nc.as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise nc.DimensionError(f"descriptor widths differ: {a.shape} vs {b.shape}")
    d = nc.sub(a, b)
    return nc.sum(nc.mul(d, d), axis=-1)


def _dist(a, b, squared):
    d2 = pairwise_sq_dist(a, b)
    return d2 if squared else nc.sqrt(d2)


def lazy_quadruplet_loss(anchor, positives, negatives, other, alpha=0.5, beta=0.2,
                         squared=True) -> LossValue:
    """Hardest positive against the closest negative, plus the other-negative term.

    anchor, other: (D,); positives: (n_pos, D); negatives: (n_neg, D).
    term_neg   = max_j [alpha + d(a, p_hard) - d(a, n_j)]_+
    term_other = max_j [beta  + d(a, p_hard) - d(o, n_j)]_+
    """
    anchor, other = nc.as_tensor(anchor), nc.as_tensor(other)
    positives, negatives = nc.as_tensor(positives), nc.as_tensor(negatives)
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise ValueError("need at least one positive and one negative")
    d_pos = nc.max_along(_dist(positives, anchor, squared), axis=0)
    d_neg = _dist(negatives, anchor, squared)
    d_other = _dist(negatives, other, squared)
    term_neg = nc.relu(nc.max_along(nc.sub(nc.add(d_pos, alpha), d_neg), axis=0))
    term_other = nc.relu(nc.max_along(nc.sub(nc.add(d_pos, beta), d_other), axis=0))
    return LossValue(nc.add(term_neg, term_other), term_neg, term_other)


def tuple_loss(desc, n_pos, n_neg, alpha=0.5, beta=0.2, squared=True) -> LossValue:
    """Loss on a (1 + n_pos + n_neg + 1, D) descriptor batch laid out as QuadTuple.ids."""
    if desc.shape[0] != n_pos + n_neg + 2:
        raise nc.DimensionError(f"batch of {desc.shape[0]} rows, tuple needs {n_pos + n_neg + 2}")
    a = nc.index_rows(desc, 0)
    p = nc.index_rows(desc, slice(1, 1 + n_pos))
    n = nc.index_rows(desc, slice(1 + n_pos, 1 + n_pos + n_neg))
    o = nc.index_rows(desc, -1)
    return lazy_quadruplet_loss(a, p, n, o, alpha, beta, squared)


def _pose_dist(poses):
    p = np.asarray(poses, dtype=np.float64)
    return np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))


def mine_tuples(catalog, n_pos, n_neg, rng, max_tries=1000):
    """Yield one QuadTuple per usable anchor, in catalog order.

    ``catalog`` is a list of (id, (northing, easting)).  Positives lie within
    10 m of the anchor, negatives beyond 50 m; the other negative is beyond
    50 m of every chosen negative and is not a positive of the anchor.
    """
    ids = [c[0] for c in catalog]
    if len(ids) == 0:
        return
    dist = _pose_dist([c[1] for c in catalog])
    n = len(ids)
    for a in range(n):
        pos = np.flatnonzero(dist[a] <= POS_RADIUS)
        pos = pos[pos != a]
        neg = np.flatnonzero(dist[a] > NEG_RADIUS)
        if len(pos) < n_pos or len(neg) < n_neg:
            continue
        pos_pick = rng.choice(pos, size=n_pos, replace=False)
        neg_pick = rng.choice(neg, size=n_neg, replace=False)
        used = {a, *pos_pick.tolist(), *neg_pick.tolist()}
        other = None
        for _ in range(max_tries):
            cand = int(rng.integers(n))
            if cand in used or dist[a, cand] <= POS_RADIUS:
                continue
            if np.all(dist[cand, neg_pick] > NEG_RADIUS):
                other = cand
                break
        if other is None:
            continue
        yield QuadTuple(ids[a], [ids[i] for i in pos_pick], [ids[i] for i in neg_pick], ids[other])


def tuple_is_valid(t: QuadTuple, poses: dict) -> bool:
    """Exhaustive check of every distance rule of a mined tuple."""
    if len(set(t.ids)) != len(t.ids):
        return False

    def d(x, y):
        return float(np.hypot(*(np.asarray(poses[x]) - np.asarray(poses[y]))))

    return (all(d(t.anchor, p) <= POS_RADIUS for p in t.positives)
            and all(d(t.anchor, n) > NEG_RADIUS for n in t.negatives)
            and all(d(t.other_negative, n) > NEG_RADIUS for n in t.negatives))
