import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hitpr import numcore as nc
from hitpr import oracles
from hitpr.descriptor import HiTPRConfig, init_model
from hitpr.lrt import LrtStackParams, lrt_attention, lrt_block, lrt_project, lrt_stack


def _stack(rng, d_s=5, d_b=6, d_k=3, d_v=4, m=2):
    store = nc.ParamStore()
    return store, LrtStackParams.create(store, "lrt", d_s, d_b, d_k, d_v, m, rng)


def test_zero_blocks_is_config_error(rng):
    with pytest.raises(nc.ConfigError):
        _stack(rng, m=0)


def test_project_zero_weights(rng):
    _, s = _stack(rng)
    blk = s.blocks[0]
    for lin in (blk.wq, blk.wk, blk.wv):
        lin.w.data[...] = 0
    q, k, v = lrt_project(nc.Tensor(rng.normal(size=(1, 4, 6))), blk)
    np.testing.assert_array_equal(q.data, np.broadcast_to(blk.wq.b.data, q.shape))
    np.testing.assert_array_equal(v.data, np.broadcast_to(blk.wv.b.data, v.shape))


def test_full_widths():
    lrt = init_model(HiTPRConfig(), seed=0).lrt
    assert len(lrt.blocks) == 4
    assert lrt.blocks[0].wq.w.shape == (256, 64)
    assert lrt.blocks[0].wv.w.shape == (256, 256)
    f = lrt_stack(nc.Tensor(np.zeros((1, 2, 64))), lrt)
    assert f.shape == (1, 2, 1024)


def test_single_cell_attention_is_value(rng):
    v = rng.normal(size=(1, 5))
    out = lrt_attention(nc.Tensor(rng.normal(size=(1, 3))), nc.Tensor(rng.normal(size=(1, 3))),
                        nc.Tensor(v))
    np.testing.assert_array_equal(out.data, v)


def test_zero_queries_average_values(rng):
    v = rng.normal(size=(4, 3))
    out = lrt_attention(nc.Tensor(np.zeros((4, 2))), nc.Tensor(rng.normal(size=(4, 2))),
                        nc.Tensor(v))
    np.testing.assert_allclose(out.data, np.broadcast_to(v.mean(axis=0), (4, 3)), rtol=1e-14)


def test_zero_cells_rejected():
    with pytest.raises(ValueError):
        lrt_attention(*(nc.Tensor(np.zeros((0, 2))) for _ in range(3)))


def test_width_mismatch_rejected(rng):
    with pytest.raises(nc.DimensionError):
        lrt_attention(nc.Tensor(np.ones((3, 2))), nc.Tensor(np.ones((3, 4))),
                      nc.Tensor(np.ones((3, 2))))


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
    out = lrt_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v))
    np.testing.assert_allclose(out.data, oracles.lrt_attention_loops(q, k, v), rtol=0, atol=1e-10)


@given(st.integers(0, 2**31), st.integers(1, 9))
def test_rows_sum_to_one_and_stay_in_envelope(seed, n):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(2, n, 3)) * 3
    v = rng.normal(size=(n, 4))
    out, w = lrt_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v), return_weights=True)
    assert np.abs(w.data.sum(axis=-1) - 1.0).max() <= 1e-12
    tol = 1e-12 * max(1.0, np.abs(v).max())
    assert np.all(out.data >= v.min(axis=0) - tol)
    assert np.all(out.data <= v.max(axis=0) + tol)


def test_block_pure_residual(rng):
    _, s = _stack(rng)
    blk = s.blocks[0]
    blk.lin.w.data[...] = 0
    blk.lin.b.data[...] = 0
    blk.bn.beta.data[...] = 0
    blk.bn.mode = "eval"
    f = nc.Tensor(rng.normal(size=(1, 5, 6)))
    np.testing.assert_array_equal(lrt_block(f, blk).data, f.data)


def test_block_keeps_width(rng):
    _, s = _stack(rng)
    assert lrt_block(nc.Tensor(rng.normal(size=(2, 5, 6))), s.blocks[1]).shape == (2, 5, 6)


def test_single_block_stack_is_first_block(rng):
    _, s = _stack(rng, m=1)
    f_s = nc.Tensor(rng.normal(size=(1, 4, 5)))
    f0 = s.input_mlp(f_s)
    np.testing.assert_array_equal(lrt_stack(f_s, s).data, lrt_block(f0, s.blocks[0]).data)


def test_two_block_decomposition(rng):
    _, s = _stack(rng, m=2)
    for b in s.blocks:
        b.bn.mode = "eval"
    f_s = nc.Tensor(rng.normal(size=(1, 4, 5)))
    f1 = lrt_block(s.input_mlp(f_s), s.blocks[0])
    f2 = lrt_block(f1, s.blocks[1])
    out = lrt_stack(f_s, s).data
    np.testing.assert_array_equal(out[..., :6], f1.data)
    np.testing.assert_array_equal(out[..., 6:], f2.data)


@pytest.mark.parametrize("mode", ["eval", "train"])
def test_stack_is_equivariant_over_cells(mode, rng):
    _, s = _stack(rng)
    for b in s.blocks:
        b.bn.mode = mode
        b.bn.track_stats = False
    f_s = rng.normal(size=(2, 7, 5))
    perm = rng.permutation(7)
    a = lrt_stack(nc.Tensor(f_s), s).data
    b = lrt_stack(nc.Tensor(f_s[:, perm]), s).data
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["eval", "train"])
def test_stack_gradients(mode, rng):
    store, s = _stack(rng)
    for b in s.blocks:
        b.bn.mode = mode
        b.bn.track_stats = False
        b.bn.running_var[...] = rng.uniform(0.5, 2.0, size=6)
    f_s = rng.normal(size=(2, 5, 5))
    weight = rng.normal(size=(2, 5, 12))
    res = nc.check_param_grads(lambda: nc.sum(nc.mul(lrt_stack(nc.Tensor(f_s), s), weight)),
                               store.params)
    assert res.smooth
    assert res.max_error < 1e-4, res.errors


def test_stack_input_gradient(rng):
    _, s = _stack(rng)
    for b in s.blocks:
        b.bn.track_stats = False
    f_s = nc.Tensor(rng.normal(size=(1, 5, 5)), requires_grad=True)
    weight = rng.normal(size=(1, 5, 12))
    nc.sum(nc.mul(lrt_stack(f_s, s), weight)).backward()
    num = nc.numeric_grad(lambda: float((lrt_stack(nc.Tensor(f_s.data), s).data * weight).sum()),
                          f_s.data)
    assert nc.rel_error(f_s.grad, num) < 1e-4
