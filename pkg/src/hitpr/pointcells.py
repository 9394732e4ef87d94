"""Point cells: normalization, farthest point sampling, kNN grouping, embedding.

All selection rules break exact distance ties by the point's (x, y, z)
coordinates and then by index, so the cells depend only on the point set
and not on the order points are stored in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3)
    pose: tuple | None = None  # (northing, easting) in meters
    id: str = ""


@dataclass
class CellSet:
    center_idx: np.ndarray  # (N,)
    neighbor_idx: np.ndarray  # (N, K)
    rel_offsets: np.ndarray  # (N, K, 3) center minus neighbor

    @property
    def n(self):
        return len(self.center_idx)

    @property
    def k(self):
        return self.neighbor_idx.shape[1]


@dataclass
class CellEmbedding:
    center_emb: nc.Tensor  # (B, N, D_I)
    neighbor_emb: nc.Tensor  # (B, N, K, D_I)


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return np.asarray(pts, dtype=np.float64)


def normalize_cloud(raw, pose=None, id="") -> PointCloud:
    """Zero-mean, then divide every axis by the largest absolute coordinate."""
    pts = np.asarray(raw, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected a P x 3 array, got shape {pts.shape}")
    if len(pts) == 0:
        raise ValueError("cannot normalize an empty point cloud")
    centered = pts - pts.mean(axis=0)
    peak = np.abs(centered).max()
    # spread at round-off level of the raw coordinates means a constant cloud
    if peak > 16 * np.finfo(np.float64).eps * np.abs(pts).max():
        centered = centered / peak
    else:
        centered = np.zeros_like(centered)
    return PointCloud(centered, pose, id)


def _lex_first(pts, cand):
    """Smallest candidate index under (x, y, z, index) ordering."""
    if len(cand) == 1:
        return int(cand[0])
    c = pts[cand]
    order = np.lexsort((cand, c[:, 2], c[:, 1], c[:, 0]))
    return int(cand[order[0]])


def fps(cloud, n_centers: int) -> np.ndarray:
    """Farthest point sampling, seeded at the point farthest from the centroid."""
    pts = _points(cloud)
    p = len(pts)
    if not 1 <= n_centers <= p:
        raise ValueError(f"n_centers={n_centers} must lie in [1, {p}]")
    centroid = pts.mean(axis=0)
    d0 = ((pts - centroid) ** 2).sum(axis=1)
    selected = np.empty(n_centers, dtype=np.int64)
    selected[0] = _lex_first(pts, np.flatnonzero(d0 == d0.max()))
    mind = ((pts - pts[selected[0]]) ** 2).sum(axis=1)
    mind[selected[0]] = -1.0
    for i in range(1, n_centers):
        cand = np.flatnonzero(mind == mind.max())
        nxt = _lex_first(pts, cand)
        selected[i] = nxt
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
        mind[selected[: i + 1]] = -1.0
    return selected


def knn(cloud, centers, k: int) -> np.ndarray:
    """k nearest points of the full cloud for every center, nearest first.

    The center itself always comes first; other ties go by (x, y, z), then index.
    """
    pts = _points(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    p = len(pts)
    if not 1 <= k <= p:
        raise ValueError(f"k={k} must lie in [1, {p}]")
    out = np.empty((len(centers), k), dtype=np.int64)
    idx = np.arange(p)
    for row, c in enumerate(centers):
        d = ((pts - pts[c]) ** 2).sum(axis=1)
        not_self = idx != c
        if k < p:
            # anything strictly beyond the k-th smallest distance cannot be chosen
            cut = np.partition(d, k - 1)[k - 1]
            keep = np.flatnonzero(d <= cut)
        else:
            keep = idx
        order = np.lexsort((keep, pts[keep, 2], pts[keep, 1], pts[keep, 0],
                            not_self[keep], d[keep]))
        out[row] = keep[order[:k]]
    return out


def build_cells(cloud, tau: int, k: int) -> CellSet:
    pts = _points(cloud)
    p = len(pts)
    if tau < 1 or p < tau:
        raise ValueError(f"cloud has {p} points, needs at least tau={tau}")
    if p < k:
        raise ValueError(f"cloud has {p} points, needs at least k={k}")
    centers = fps(pts, p // tau)
    nbrs = knn(pts, centers, k)
    rel = pts[centers][:, None, :] - pts[nbrs]
    return CellSet(centers, nbrs, rel)


def embed_cells(cells, clouds, embed_mlp) -> CellEmbedding:
    """Run the shared MLP on every point once, then gather centers and neighbors.

    ``cells``/``clouds`` may be single items or equal-length lists (a batch).
    """
    if isinstance(cells, CellSet):
        cells, clouds = [cells], [clouds]
    pts = np.stack([_points(c) for c in clouds])
    emb = nc.mlp(pts, embed_mlp)
    center_idx = np.stack([c.center_idx for c in cells])
    neighbor_idx = np.stack([c.neighbor_idx for c in cells])
    return CellEmbedding(nc.take_rows(emb, center_idx), nc.take_rows(emb, neighbor_idx))
