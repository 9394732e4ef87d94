"""Short-range transformer: subtraction (vector) attention inside each point cell."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .pointcells import CellEmbedding, CellSet, embed_cells


@dataclass
class SrtParams:
    wq: nc.Linear
    wk: nc.Linear
    wv: nc.Linear
    gamma_mlp: nc.MLP
    attn_mlp: nc.Linear
    ln: nc.LayerNorm
    proj: nc.Linear

    @classmethod
    def create(cls, store, path, d_i, d_a, d_s, rng, pos_hidden=64):
        return cls(
            wq=nc.Linear.create(store, f"{path}.wq", d_i, d_a, rng),
            wk=nc.Linear.create(store, f"{path}.wk", d_i, d_a, rng),
            wv=nc.Linear.create(store, f"{path}.wv", d_i, d_a, rng),
            gamma_mlp=nc.MLP.create(store, f"{path}.gamma", [3, pos_hidden, d_a], rng),
            attn_mlp=nc.Linear.create(store, f"{path}.attn", d_a, d_a, rng),
            ln=nc.LayerNorm.create(store, f"{path}.ln", d_a),
            proj=nc.Linear.create(store, f"{path}.proj", d_a, d_s, rng),
        )


def srt_project(emb: CellEmbedding, params: SrtParams):
    """Queries from centers; keys and values from neighbors."""
    return params.wq(emb.center_emb), params.wk(emb.neighbor_emb), params.wv(emb.neighbor_emb)


def positional_encoding(cells, gamma_mlp: nc.MLP) -> nc.Tensor:
    """delta = gamma(P_n - P_nk) for every cell slot, shape (B, N, K, D_A)."""
    if isinstance(cells, CellSet):
        cells = [cells]
    rel = np.stack([c.rel_offsets for c in cells])
    return nc.mlp(rel, gamma_mlp)


def srt_attention(q_s, k_s, v_s, delta, params: SrtParams, return_weights=False):
    """Vector attention over the neighbor axis, one softmax per channel.

    q_s: (B, N, D_A); k_s, v_s, delta: (B, N, K, D_A).  Returns (B, N, D_S).
    """
    if k_s.shape[-2] == 0:
        raise ValueError("cells need at least one neighbor")
    if not (q_s.shape[:-1] == k_s.shape[:-2] and k_s.shape == v_s.shape == delta.shape
            and q_s.shape[-1] == k_s.shape[-1]):
        raise nc.DimensionError(
            f"srt_attention: q {q_s.shape}, k {k_s.shape}, v {v_s.shape}, delta {delta.shape}"
        )
    b, n, d = q_s.shape
    q = nc.reshape(q_s, (b, n, 1, d))
    logits = params.ln(params.attn_mlp(nc.add(nc.sub(q, k_s), delta)))
    weights = nc.softmax(logits, axis=-2)
    s = nc.sum(nc.mul(weights, nc.add(v_s, delta)), axis=-2)
    out = params.proj(s)
    return (out, weights) if return_weights else out


def srt_forward(cells, clouds, embed_mlp, params: SrtParams) -> nc.Tensor:
    emb = embed_cells(cells, clouds, embed_mlp)
    q_s, k_s, v_s = srt_project(emb, params)
    delta = positional_encoding(cells, params.gamma_mlp)
    return srt_attention(q_s, k_s, v_s, delta, params)
