"""Long-range transformer: stacked dot-product attention across all cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass
class LrtBlockParams:
    wq: nc.Linear
    wk: nc.Linear
    wv: nc.Linear
    lin: nc.Linear
    bn: nc.BatchNorm

    @classmethod
    def create(cls, store, path, d_b, d_k, d_v, rng):
        return cls(
            wq=nc.Linear.create(store, f"{path}.wq", d_b, d_k, rng),
            wk=nc.Linear.create(store, f"{path}.wk", d_b, d_k, rng),
            wv=nc.Linear.create(store, f"{path}.wv", d_b, d_v, rng),
            lin=nc.Linear.create(store, f"{path}.lin", d_v, d_b, rng),
            bn=nc.BatchNorm.create(store, f"{path}.bn", d_b),
        )


@dataclass
class LrtStackParams:
    input_mlp: nc.MLP
    blocks: list

    @classmethod
    def create(cls, store, path, d_s, d_b, d_k, d_v, m_blocks, rng):
        if m_blocks < 1:
            raise nc.ConfigError("need at least one LRT block")
        return cls(
            input_mlp=nc.MLP.create(store, f"{path}.input", [d_s, d_b], rng, final_act=True),
            blocks=[LrtBlockParams.create(store, f"{path}.block{i}", d_b, d_k, d_v, rng)
                    for i in range(m_blocks)],
        )


def lrt_project(f_prev, block: LrtBlockParams):
    return block.wq(f_prev), block.wk(f_prev), block.wv(f_prev)


def lrt_attention(q_l, k_l, v_l, return_weights=False):
    """softmax(Q K^T / sqrt(D_k)) V, row-wise over the cells of each cloud."""
    if q_l.shape[-2] == 0:
        raise ValueError("attention over zero cells")
    if q_l.shape[-1] != k_l.shape[-1]:
        raise nc.DimensionError(f"query width {q_l.shape} != key width {k_l.shape}")
    d_k = q_l.shape[-1]
    scores = nc.scale(nc.matmul(q_l, nc.swap_last(k_l)), 1.0 / np.sqrt(d_k))
    weights = nc.softmax(scores, axis=-1)
    out = nc.matmul(weights, v_l)
    return (out, weights) if return_weights else out


def lrt_block(f_prev, block: LrtBlockParams) -> nc.Tensor:
    attn = lrt_attention(*lrt_project(f_prev, block))
    return nc.add(nc.relu(block.bn(block.lin(attn))), f_prev)


def lrt_stack(f_s, params: LrtStackParams, return_blocks=False):
    """Concatenate the outputs of every block (not the block-0 input) along channels."""
    f = params.input_mlp(f_s)
    outs = []
    for block in params.blocks:
        f = lrt_block(f, block)
        outs.append(f)
    f_l = nc.concat(outs, axis=-1)
    return (f_l, outs) if return_blocks else f_l
