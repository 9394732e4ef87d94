"""Submap I/O, synthetic scenes, training loop, descriptor index and recall evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .descriptor import HiTPRConfig, ModelParams, cells_for, extract_descriptor, forward_batch, init_model
from .metric import mine_tuples, tuple_loss
from .pointcells import PointCloud, normalize_cloud

log = logging.getLogger(__name__)

CURVE_LENGTH = 25
DEFAULT_RADIUS = 25.0


class CatalogError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- submaps and catalogs


def write_submap(path, points):
    pts = np.ascontiguousarray(points, dtype="<f8")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"submap must be P x 3, got {pts.shape}")
    Path(path).write_bytes(pts.tobytes())


def load_submap(path) -> np.ndarray:
    """Little-endian float64 (x, y, z) triples; P comes from the file size."""
    raw = Path(path).read_bytes()
    if len(raw) % 24:
        raise ValueError(f"{path}: {len(raw)} bytes is not a whole number of 24-byte points")
    return np.frombuffer(raw, dtype="<f8").reshape(-1, 3).astype(np.float64)


@dataclass
class CatalogEntry:
    id: str
    path: Path
    northing: float
    easting: float

    @property
    def pose(self):
        return (self.northing, self.easting)


@dataclass
class SubmapCatalog:
    entries: list = field(default_factory=list)
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e.id for e in self.entries]

    @property
    def poses(self):
        return np.array([e.pose for e in self.entries], dtype=np.float64).reshape(-1, 2)

    def load(self, i) -> PointCloud:
        e = self.entries[i]
        return normalize_cloud(load_submap(e.path), e.pose, e.id)


def write_catalog(path, entries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "northing", "easting"])
        for e in entries:
            w.writerow([e.id, repr(float(e.northing)), repr(float(e.easting))])


def load_catalog(csv_path, data_dir=None, split="train", check_files=True) -> SubmapCatalog:
    csv_path = Path(csv_path)
    data_dir = Path(data_dir) if data_dir is not None else csv_path.parent
    entries, seen = [], set()
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "northing", "easting"]:
            raise CatalogError(f"{csv_path}:1: expected header 'id,northing,easting', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise CatalogError(f"{csv_path}:{lineno}: expected 3 fields, got {len(row)}")
            cid = row[0].strip()
            try:
                north, east = float(row[1]), float(row[2])
            except ValueError:
                raise CatalogError(f"{csv_path}:{lineno}: non-numeric pose {row[1:]}") from None
            if not cid or not (math.isfinite(north) and math.isfinite(east)):
                raise CatalogError(f"{csv_path}:{lineno}: empty id or non-finite pose")
            if cid in seen:
                raise CatalogError(f"{csv_path}:{lineno}: duplicate id {cid!r}")
            seen.add(cid)
            entries.append(CatalogEntry(cid, data_dir / f"{cid}.bin", north, east))
    if check_files:
        missing = [e.id for e in entries if not e.path.is_file()]
        if missing:
            raise CatalogError(f"{csv_path}: submap files missing for ids {missing}")
    return SubmapCatalog(entries, split)


# ---------------------------------------------------------------- synthetic scenes


def _box_faces(rng):
    center = np.array([rng.uniform(-15, 15), rng.uniform(-15, 15), rng.uniform(0.5, 3)])
    size = rng.uniform(1.0, 6.0, size=3)
    yaw = rng.uniform(0, np.pi)
    rot = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1]])
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        for sign in (-1, 1):
            origin = np.zeros(3)
            origin[ax] = sign * size[ax] / 2
            origin[u], origin[v] = -size[u] / 2, -size[v] / 2
            eu, ev = np.zeros(3), np.zeros(3)
            eu[u], ev[v] = size[u], size[v]
            faces.append((center + rot @ origin, rot @ eu, rot @ ev))
    return faces


def _wall(rng):
    yaw = rng.uniform(0, np.pi)
    length, height = rng.uniform(8, 25), rng.uniform(2, 8)
    start = np.array([rng.uniform(-15, 15), rng.uniform(-15, 15), 0.0])
    return [(start, length * np.array([np.cos(yaw), np.sin(yaw), 0.0]), np.array([0, 0, height]))]


def random_scene(rng):
    """A place: a handful of boxes and walls, as (origin, edge_u, edge_v) rectangles."""
    rects = []
    for _ in range(rng.integers(3, 7)):
        rects += _box_faces(rng)
    for _ in range(rng.integers(1, 3)):
        rects += _wall(rng)
    return rects


def sample_scene(rects, n_points, rng, noise=0.05):
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in rects])
    pick = rng.choice(len(rects), size=n_points, p=areas / areas.sum())
    st = rng.uniform(size=(n_points, 2))
    origin = np.array([r[0] for r in rects])[pick]
    eu = np.array([r[1] for r in rects])[pick]
    ev = np.array([r[2] for r in rects])[pick]
    pts = origin + st[:, :1] * eu + st[:, 1:] * ev
    return pts + rng.normal(scale=noise, size=pts.shape)


def gen_synthetic(out_dir, n_places=20, clouds_per_place=4, points_per_cloud=512,
                  place_spacing=100.0, jitter=2.0, seed=0) -> SubmapCatalog:
    """Write ``<id>.bin`` submaps plus catalog.csv, database.csv and queries.csv.

    Places sit on a square grid; each cloud of a place is a fresh resample of
    the same scene, seen from a pose jittered within ``jitter`` meters.  The
    last cloud of every place is listed in queries.csv, the rest in database.csv.
    """
    if not 0 <= jitter <= 5:
        raise nc.ConfigError(f"jitter must lie in [0, 5] m, got {jitter}")
    if not place_spacing > 50 + 2 * jitter:
        raise nc.ConfigError(f"place_spacing {place_spacing} must exceed 50 + 2*jitter")
    if n_places < 1 or clouds_per_place < 1 or points_per_cloud < 1:
        raise nc.ConfigError("n_places, clouds_per_place and points_per_cloud must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(n_places))
    entries, queries, database = [], [], []
    for place in range(n_places):
        scene = random_scene(rng)
        base = np.array([(place // cols) * place_spacing, (place % cols) * place_spacing])
        for c in range(clouds_per_place):
            r, th = jitter * np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
            offset = np.array([r * np.cos(th), r * np.sin(th)])
            pts = sample_scene(scene, points_per_cloud, rng)
            pts[:, :2] -= offset[::-1]  # sensor frame; easting is x, northing is y
            cid = f"p{place:03d}_c{c:02d}"
            path = out / f"{cid}.bin"
            write_submap(path, normalize_cloud(pts).points)
            e = CatalogEntry(cid, path, float(base[0] + offset[0]), float(base[1] + offset[1]))
            entries.append(e)
            (queries if c == clouds_per_place - 1 and clouds_per_place > 1 else database).append(e)
    write_catalog(out / "catalog.csv", entries)
    write_catalog(out / "database.csv", database)
    write_catalog(out / "queries.csv", queries)
    return SubmapCatalog(entries, "train")


# ---------------------------------------------------------------- training


LOSS_LOG_HEADER = ["epoch", "step", "loss", "term_neg", "term_other", "lr"]


def epoch_lr(config: HiTPRConfig, epoch: int) -> float:
    """Linear decay from lr_init (epoch 1) to lr_final (last epoch)."""
    if config.epochs <= 1:
        return config.lr_init
    frac = (epoch - 1) / (config.epochs - 1)
    return config.lr_init + frac * (config.lr_final - config.lr_init)


class CloudCache:
    """Loaded clouds and their (parameter-independent) cells, keyed by id."""

    def __init__(self, catalog: SubmapCatalog, config: HiTPRConfig):
        self.catalog, self.config = catalog, config
        self._index = {e.id: i for i, e in enumerate(catalog.entries)}
        self._items = {}

    def __getitem__(self, cid):
        if cid not in self._items:
            cloud = self.catalog.load(self._index[cid])
            self._items[cid] = (cloud, cells_for(cloud, self.config))
        return self._items[cid]


def train(catalog: SubmapCatalog, config: HiTPRConfig, seed=0, out_dir=None, params=None,
          progress=None):
    """Adam on the lazy quadruplet loss, one mined tuple per step.

    Returns (params, log rows).  When ``out_dir`` is given, writes
    ``checkpoint_epochNNN.ckpt`` per epoch, ``model.ckpt`` and ``loss_log.csv``.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_model(config, seed=int(rng.integers(2**31)))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cache = CloudCache(catalog, config)
    mining = [(e.id, e.pose) for e in catalog.entries]
    rows = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        tuples = list(mine_tuples(mining, config.n_pos, config.n_neg, rng))
        if not tuples:
            raise CatalogError("catalog yields no valid training tuple")
        lr = epoch_lr(config, epoch)
        params.set_mode("train")
        for ti in rng.permutation(len(tuples)):
            items = [cache[cid] for cid in tuples[ti].ids]
            desc = forward_batch([c for _, c in items], [cl for cl, _ in items], params)
            lv = tuple_loss(desc, config.n_pos, config.n_neg, config.alpha, config.beta,
                            config.squared_distance)
            total, tn, to = lv.floats()
            if not math.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} (anchor {tuples[ti].anchor}, lr {lr})"
                )
            params.store.zero_grad()
            lv.total.backward()
            nc.adam_step(params.store, lr)
            step += 1
            rows.append((epoch, step, total, tn, to, lr))
        mean = float(np.mean([r[2] for r in rows if r[0] == epoch]))
        log.info("epoch %d: mean loss %.6g over %d tuples (lr %.3g)", epoch, mean, len(tuples), lr)
        if progress is not None:
            progress(epoch, mean)
        if out is not None:
            nc.save_checkpoint(params.store, out / f"checkpoint_epoch{epoch:03d}.ckpt")
    params.set_mode("eval")
    if out is not None:
        nc.save_checkpoint(params.store, out / "model.ckpt")
        write_loss_log(out / "loss_log.csv", rows)
    return params, rows


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), repr(r[5])])


def epoch_means(rows) -> list[float]:
    epochs = sorted({r[0] for r in rows})
    return [float(np.mean([r[2] for r in rows if r[0] == e])) for e in epochs]


# ---------------------------------------------------------------- retrieval


@dataclass
class DescriptorIndex:
    descriptors: np.ndarray
    ids: list
    poses: np.ndarray

    def __post_init__(self):
        if not len(self.descriptors) == len(self.ids) == len(self.poses):
            raise ValueError("descriptor, id and pose counts differ")

    def __len__(self):
        return len(self.ids)


def build_index(catalog: SubmapCatalog, params: ModelParams) -> DescriptorIndex:
    rows = []
    for i, e in enumerate(catalog.entries):
        try:
            rows.append(extract_descriptor(catalog.load(i), params, mode="eval").vec)
        except ValueError as exc:
            raise ValueError(f"descriptor extraction failed for {e.id}: {exc}") from exc
    width = params.config.d_g
    return DescriptorIndex(np.array(rows, dtype=np.float64).reshape(-1, width),
                           catalog.ids, catalog.poses)


def rank(index: DescriptorIndex, query, exclude=None) -> np.ndarray:
    """Row indices of ``index`` by ascending Euclidean distance, ties by id."""
    q = np.asarray(query, dtype=np.float64).ravel()
    d = np.sqrt(((index.descriptors - q) ** 2).sum(axis=1))
    order = np.lexsort((np.array(index.ids, dtype=object).astype(str), d))
    if exclude is not None:
        order = np.array([i for i in order if index.ids[i] != exclude], dtype=np.int64)
    return order


def query_topn(index: DescriptorIndex, query, n: int, exclude=None) -> list:
    size = len(index) - (exclude in index.ids if exclude is not None else 0)
    if not 1 <= n <= size:
        raise ValueError(f"n={n} must lie in [1, {size}]")
    return [index.ids[i] for i in rank(index, query, exclude)[:n]]


@dataclass
class EvalReport:
    recall_at_1: float
    recall_at_1pct: float
    recall_curve: list
    query_count: int
    one_percent_n: int = 1

    def summary(self) -> str:
        return (f"queries: {self.query_count}\n"
                f"recall@1: {self.recall_at_1:.4f}\n"
                f"recall@1% (top {self.one_percent_n}): {self.recall_at_1pct:.4f}\n")

    def write_curve(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "recall"])
            for n, r in enumerate(self.recall_curve, start=1):
                w.writerow([n, repr(float(r))])


def recall_from_indices(queries: DescriptorIndex, db: DescriptorIndex,
                        radius=DEFAULT_RADIUS) -> EvalReport:
    if len(db) == 0:
        raise ValueError("database is empty")
    one_pct = max(1, int(math.floor(len(db) / 100 + 0.5)))
    depth = max(CURVE_LENGTH, one_pct)
    hits = np.zeros((len(queries), depth), dtype=bool)
    for qi in range(len(queries)):
        order = rank(db, queries.descriptors[qi], exclude=queries.ids[qi])[:depth]
        geo = np.sqrt(((db.poses[order] - queries.poses[qi]) ** 2).sum(axis=1))
        ok = geo <= radius
        # a success at rank n stays a success for every larger n
        hits[qi, : len(ok)] = np.logical_or.accumulate(ok)
        if len(ok) < depth:
            hits[qi, len(ok):] = ok.any()
    curve = hits.mean(axis=0) if len(queries) else np.zeros(depth)
    return EvalReport(float(curve[0]), float(curve[one_pct - 1]),
                      [float(c) for c in curve[:CURVE_LENGTH]], len(queries), one_pct)


def evaluate(query_catalog, db_catalog, params, success_radius=DEFAULT_RADIUS) -> EvalReport:
    if len(db_catalog) == 0:
        raise ValueError("database catalog is empty")
    return recall_from_indices(build_index(query_catalog, params), build_index(db_catalog, params),
                               success_radius)
