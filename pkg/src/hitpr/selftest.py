"""Quick self-verification groups behind ``hitpr selftest``."""

from __future__ import annotations

import time

import numpy as np

from . import numcore as nc
from . import oracles
from .descriptor import (HiTPRConfig, cells_for, extract_descriptor, forward_batch, init_model,
                         param_count, tiny_config)
from .lrt import lrt_attention
from .metric import lazy_quadruplet_loss, tuple_loss
from .pointcells import fps, knn, normalize_cloud

GRAD_TOL = 1e-4
PARAM_BAND = (2.0e6, 3.5e6)


def e2e_gradcheck(seed, config: HiTPRConfig | None = None, n_points=32, h=1e-5) -> nc.GradCheck:
    """Finite differences of the quadruplet loss on one random tuple of tiny clouds."""
    c = config or tiny_config()
    rng = np.random.default_rng(seed)
    params = init_model(c, seed=seed).set_mode("train")
    params.set_track_stats(False)
    clouds = [normalize_cloud(rng.normal(size=(n_points, 3))) for _ in range(c.n_pos + c.n_neg + 2)]
    cells = [cells_for(cl, c) for cl in clouds]

    def loss():
        desc = forward_batch(cells, clouds, params)
        return tuple_loss(desc, c.n_pos, c.n_neg, c.alpha, c.beta).total

    return nc.check_param_grads(loss, params.store.params, h)


def smooth_gradchecks(n_required=5, first_seed=0, max_seeds=50, **kw):
    """Run e2e_gradcheck on consecutive seeds, keeping those that cross no kink."""
    kept, skipped = [], []
    seed = first_seed
    while len(kept) < n_required and seed < first_seed + max_seeds:
        res = e2e_gradcheck(seed, **kw)
        (kept if res.smooth else skipped).append((seed, res))
        seed += 1
    return kept, skipped


def group_gradients(seed=0):
    kept, skipped = smooth_gradchecks(n_required=2, first_seed=seed)
    worst = max(r.max_error for _, r in kept)
    return worst < GRAD_TOL and len(kept) == 2, (
        f"max rel err {worst:.2e} over seeds {[s for s, _ in kept]}"
        f" (skipped at kinks: {[s for s, _ in skipped]})")


def group_sampling(seed=0, n_clouds=20):
    rng = np.random.default_rng(seed)
    for _ in range(n_clouds):
        p = int(rng.integers(4, 48))
        pts = rng.integers(-3, 4, size=(p, 3)).astype(float) if rng.uniform() < 0.5 \
            else rng.normal(size=(p, 3))
        n = int(rng.integers(1, p + 1))
        k = int(rng.integers(1, p + 1))
        sel = fps(pts, n)
        if sel.tolist() != oracles.fps_bruteforce(pts, n):
            return False, "fps differs from exhaustive search"
        if knn(pts, sel, k).tolist() != oracles.knn_bruteforce(pts, sel, k):
            return False, "knn differs from exhaustive sort"
    return True, f"{n_clouds} clouds match brute force"


def group_attention(seed=0):
    rng = np.random.default_rng(seed)
    c = tiny_config()
    params = init_model(c, seed=seed)
    s = params.srt
    q, k, v, d = (rng.normal(size=sh) for sh in [(3, 8), (3, 4, 8), (3, 4, 8), (3, 4, 8)])
    from .srt import srt_attention
    got = srt_attention(nc.Tensor(q[None]), nc.Tensor(k[None]), nc.Tensor(v[None]),
                        nc.Tensor(d[None]), s).data[0]
    want, _ = oracles.srt_attention_loops(q, k, v, d, s.attn_mlp.w.data, s.attn_mlp.b.data,
                                          s.ln.gamma.data, s.ln.beta.data, s.proj.w.data,
                                          s.proj.b.data)
    e1 = np.abs(got - want).max()
    ql, kl, vl = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    e2 = np.abs(lrt_attention(nc.Tensor(ql), nc.Tensor(kl), nc.Tensor(vl)).data
                - oracles.lrt_attention_loops(ql, kl, vl)).max()
    return max(e1, e2) < 1e-10, f"srt err {e1:.1e}, lrt err {e2:.1e}"


def group_loss(seed=0, n=20):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a, o = rng.integers(-16, 16, size=(2, 6)) / 8
        pos, neg = rng.integers(-16, 16, size=(2, 6)) / 8, rng.integers(-16, 16, size=(8, 6)) / 8
        got = lazy_quadruplet_loss(a, pos, neg, o, 0.5, 0.2).floats()
        if got != oracles.quadruplet_loss_arith(a, pos, neg, o, 0.5, 0.2):
            return False, "loss differs from arithmetic oracle"
    return True, f"{n} tuples match exactly"


def group_invariance(seed=0):
    rng = np.random.default_rng(seed)
    c = tiny_config(k=8)
    params = init_model(c, seed=seed).set_mode("eval")
    worst = 0.0
    for _ in range(2):
        cloud = normalize_cloud(rng.normal(size=(64, 3)))
        base = extract_descriptor(cloud, params).vec
        for _ in range(3):
            perm = normalize_cloud(cloud.points[rng.permutation(64)])
            other = extract_descriptor(perm, params).vec
            worst = max(worst, np.abs(other - base).max() / max(np.abs(base).max(), 1e-12))
    return worst < 1e-6, f"max relative change {worst:.1e} under point permutations"


def group_param_count(seed=0):
    total = param_count(init_model(HiTPRConfig(), seed=seed))
    lo, hi = PARAM_BAND
    return lo <= total <= hi, f"full config has {total:,} parameters (reference 2.72M)"


GROUPS = [
    ("gradients", group_gradients),
    ("fps/knn oracles", group_sampling),
    ("attention oracles", group_attention),
    ("loss oracle", group_loss),
    ("permutation invariance", group_invariance),
    ("param count", group_param_count),
]


def run_selftest(seed=0, groups=None, out=print) -> bool:
    ok_all = True
    for name, fn in groups or GROUPS:
        t = time.perf_counter()
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing group is a failing group
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t:.1f}s)")
    return ok_all
