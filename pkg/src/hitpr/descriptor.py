"""Global descriptor head, full network composition and parameter accounting."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .lrt import LrtStackParams, lrt_stack
from .pointcells import CellSet, PointCloud, build_cells, normalize_cloud
from .srt import SrtParams, srt_forward


@dataclass
class HiTPRConfig:
    tau: int = 4
    k: int = 32
    d_i: int = 64
    d_a: int = 512
    d_s: int = 64
    d_k: int = 64
    d_v: int = 256
    d_b: int = 256
    m_blocks: int = 4
    d_g: int = 1024
    pos_hidden: int = 64
    alpha: float = 0.5
    beta: float = 0.2
    lr_init: float = 5e-5
    lr_final: float = 1e-5
    epochs: int = 20
    n_pos: int = 2
    n_neg: int = 8
    l2_normalize: bool = False
    squared_distance: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not v > 0 and f.name != "epochs":
                raise nc.ConfigError(f"{f.name} must be positive, got {v}")
        if self.epochs < 0:
            raise nc.ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def as_dict(self):
        return asdict(self)


def tiny_config(**overrides) -> HiTPRConfig:
    """All widths 8; the size used for end-to-end gradient checks."""
    base = dict(tau=4, k=4, d_i=8, d_a=8, d_s=8, d_k=4, d_v=8, d_b=8, m_blocks=2,
                d_g=8, pos_hidden=8)
    base.update(overrides)
    return HiTPRConfig(**base)


@dataclass
class GlobalDescriptor:
    vec: np.ndarray
    cloud_id: str = ""


@dataclass
class ModelParams:
    config: HiTPRConfig
    store: nc.ParamStore
    embed_mlp: nc.MLP
    srt: SrtParams
    lrt: LrtStackParams
    agg_lin: nc.Linear
    agg_bn: nc.BatchNorm

    @property
    def batch_norms(self):
        return [b.bn for b in self.lrt.blocks] + [self.agg_bn]

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        for bn in self.batch_norms:
            bn.mode = mode
        return self

    def set_track_stats(self, flag: bool):
        for bn in self.batch_norms:
            bn.track_stats = flag


def init_model(config: HiTPRConfig, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    c = config
    store = nc.ParamStore()
    embed = nc.MLP.create(store, "embed", [3, c.d_i, c.d_i], rng)
    srt = SrtParams.create(store, "srt", c.d_i, c.d_a, c.d_s, rng, pos_hidden=c.pos_hidden)
    lrt = LrtStackParams.create(store, "lrt", c.d_s, c.d_b, c.d_k, c.d_v, c.m_blocks, rng)
    agg_lin = nc.Linear.create(store, "agg.lin", c.m_blocks * c.d_b, c.d_g, rng)
    agg_bn = nc.BatchNorm.create(store, "agg.bn", c.d_g)
    return ModelParams(c, store, embed, srt, lrt, agg_lin, agg_bn)


def aggregate(f_l, params: ModelParams) -> nc.Tensor:
    """max-pool(ReLU(BN(lin(F_L)))) over cells: (B, N, D_L) -> (B, D_G)."""
    if f_l.shape[-2] == 0:
        raise ValueError("aggregate needs at least one cell")
    g = nc.max_pool_rows(nc.relu(params.agg_bn(params.agg_lin(f_l))))
    if params.config.l2_normalize:
        norm = nc.sqrt(nc.add(nc.sum(nc.mul(g, g), axis=-1, keepdims=True), 1e-12))
        g = nc.mul(g, nc.reciprocal(norm))
    return g


def check_cloud(cloud, config: HiTPRConfig):
    p = len(cloud.points if isinstance(cloud, PointCloud) else cloud)
    need = max(config.tau, config.k)
    if p < need:
        raise ValueError(
            f"cloud has {p} points but needs >= max(tau={config.tau}, k={config.k}) = {need}"
        )


def cells_for(cloud, config: HiTPRConfig) -> CellSet:
    check_cloud(cloud, config)
    return build_cells(cloud, config.tau, config.k)


def forward_batch(cells: list, clouds: list, params: ModelParams) -> nc.Tensor:
    """Descriptors (B, D_G) for a batch of pre-built cells; BN pools over the batch."""
    f_s = srt_forward(cells, clouds, params.embed_mlp, params.srt)
    f_l = lrt_stack(f_s, params.lrt)
    return aggregate(f_l, params)


def extract_descriptor(cloud, params: ModelParams, mode="eval") -> GlobalDescriptor:
    if not isinstance(cloud, PointCloud):
        cloud = normalize_cloud(cloud)
    cells = cells_for(cloud, params.config)
    prev = [bn.mode for bn in params.batch_norms]
    params.set_mode(mode)
    try:
        with nc.no_grad():
            g = forward_batch([cells], [cloud], params)
    finally:
        for bn, m in zip(params.batch_norms, prev):
            bn.mode = m
    return GlobalDescriptor(g.data[0].copy(), cloud.id)


def param_count(params) -> int:
    """Learned scalars only (BN gamma/beta included, running stats excluded)."""
    store = params.store if isinstance(params, ModelParams) else params
    return store.count()


def param_breakdown(params: ModelParams) -> dict[str, int]:
    out: dict[str, int] = {}
    for path, p in params.store.params.items():
        top = path.split(".")[0]
        out[top] = out.get(top, 0) + p.data.size
    return out


# descriptor files: <name>.bin (float32 LE rows) + <name>.csv manifest (cloud_id,offset)


def write_descriptors(out_dir, ids, matrix, name="descriptors"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mat = np.ascontiguousarray(np.asarray(matrix).reshape(len(ids), -1), dtype="<f4")
    (out_dir / f"{name}.bin").write_bytes(mat.tobytes())
    row_bytes = mat.shape[1] * 4
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cloud_id", "offset"])
        for i, cid in enumerate(ids):
            w.writerow([cid, i * row_bytes])
    return out_dir / f"{name}.bin", out_dir / f"{name}.csv"


def read_descriptors(bin_path, manifest_path, width: int):
    with open(manifest_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    raw = Path(bin_path).read_bytes()
    ids, vecs = [], []
    for r in rows:
        off = int(r["offset"])
        vecs.append(np.frombuffer(raw, dtype="<f4", count=width, offset=off))
        ids.append(r["cloud_id"])
    return ids, np.array(vecs, dtype=np.float32).reshape(len(ids), width)
