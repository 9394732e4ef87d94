"""Dense float64 tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back to them.  Parameters are
leaf tensors with a stable ``path`` and Adam moment slots.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float64
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Skip graph recording (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def activation_pattern():
    """Hash every ReLU mask and max argmax evaluated inside the block.

    Two evaluations with equal digests took the same branch at every
    non-differentiable op, so a finite difference between them is valid.
    """
    prev = getattr(_state, "pattern", None)
    h = hashlib.blake2b(digest_size=16)
    _state.pattern = h
    try:
        yield h
    finally:
        _state.pattern = prev


def _note_branch(arr):
    h = getattr(_state, "pattern", None)
    if h is not None:
        h.update(np.ascontiguousarray(arr).tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Param):
                    node.grad = None

    # operator sugar for the few ops that need it
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Param(Tensor):
    """Leaf tensor with a unique path and Adam moments."""

    __slots__ = ("path", "adam_m", "adam_v")

    def __init__(self, value, path: str):
        super().__init__(value, requires_grad=True)
        self.path = path
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.path!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, (x,), lambda g: x._accum(g * c))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(np.packbits(mask))
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: x._accum(g * mask))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: x._accum(g * 0.5 / out))


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data
    return _result(out, (x,), lambda g: x._accum(-g * out * out))


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(src)))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: x._accum(np.swapaxes(g, -1, -2)))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, cuts, axis=axis)):
            if x.requires_grad:
                x._accum(part)

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def take_rows(x, idx) -> Tensor:
    """Gather rows of ``x`` (B, P, D) by integer ``idx`` (B, ...) -> (B, ..., D)."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.data.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"take_rows: x {x.shape} vs idx {idx.shape}")
    b = np.arange(idx.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    out = x.data[b, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(b, idx.shape), idx), g)
        x._accum(gx)

    return _result(out, (x,), backward)


def index_rows(x, idx) -> Tensor:
    """Select along axis 0 (int, slice or integer array)."""
    x = as_tensor(x)
    if not isinstance(idx, slice):
        idx = np.asarray(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accum(gx)

    return _result(x.data[idx], (x,), backward)


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward)


def max_along(x, axis) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal entry."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("max over an empty axis")
    arg = np.argmax(x.data, axis=axis)
    _note_branch(arg)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        x._accum(gx)

    return _result(out, (x,), backward)


def max_pool_rows(x) -> Tensor:
    """Column-wise max over the row axis: (N, D) -> (1, D), (B, N, D) -> (B, D)."""
    x = as_tensor(x)
    if x.data.ndim < 2 or x.shape[-2] == 0:
        raise ValueError(f"max_pool_rows needs at least one row, got shape {x.shape}")
    out = max_along(x, axis=-2)
    return reshape(out, (1, -1)) if x.data.ndim == 2 else out


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    x = as_tensor(x)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not conform"
        )
    din, dout = w.shape
    x2 = x.data.reshape(-1, din)
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (dout,))

    def backward(g):
        g2 = g.reshape(-1, dout)
        if w.requires_grad:
            w._accum(x2.T @ g2)
        if b.requires_grad:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))

    return _result(out, (x, w, b), backward)


# ---------------------------------------------------------------- normalization


def layer_norm(x, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accum(g.sum(axis=lead))
        if x.requires_grad:
            gh = g * gamma.data
            x._accum(inv / d * (d * gh - gh.sum(-1, keepdims=True)
                                - xhat * (gh * xhat).sum(-1, keepdims=True)))

    return _result(out, (x, gamma, beta), backward)


def batch_norm(x, bn: "BatchNorm") -> Tensor:
    """Normalize every channel over all leading axes (cells, clouds)."""
    x = as_tensor(x)
    d = x.shape[-1]
    x2 = x.data.reshape(-1, d)
    n = x2.shape[0]
    if n == 0:
        raise ValueError("batch_norm on an empty batch")
    if bn.mode == "eval":
        inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (x2 - bn.running_mean) * inv
    else:
        mu = x2.mean(axis=0)
        xc = x2 - mu
        var = (xc * xc).mean(axis=0)
        inv = 1.0 / np.sqrt(var + bn.eps)
        xhat = xc * inv
        if bn.track_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            bn.running_mean[:] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
            bn.running_var[:] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
    gamma, beta = bn.gamma, bn.beta
    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    train = bn.mode != "eval"

    def backward(g):
        g2 = g.reshape(-1, d)
        if gamma.requires_grad:
            gamma._accum((g2 * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g2.sum(axis=0))
        if x.requires_grad:
            gh = g2 * gamma.data
            if train:
                gx = inv / n * (n * gh - gh.sum(0) - xhat * (gh * xhat).sum(0))
            else:
                gx = gh * inv
            x._accum(gx.reshape(x.shape))

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- parameter containers


class ParamStore:
    """Flat registry of parameters and non-learned buffers, keyed by path."""

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.step = 0

    def param(self, path, value) -> Param:
        if path in self.params or path in self.buffers:
            raise ConfigError(f"duplicate parameter path {path!r}")
        p = Param(value, path)
        self.params[path] = p
        return p

    def buffer(self, path, value) -> np.ndarray:
        if path in self.params or path in self.buffers:
            raise ConfigError(f"duplicate buffer path {path!r}")
        arr = np.array(value, dtype=DTYPE)
        self.buffers[path] = arr
        return arr

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def count(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()], dtype=np.int64))

    def entries(self):
        """(path, array) for every parameter, then every buffer, in creation order."""
        yield from ((k, p.data) for k, p in self.params.items())
        yield from self.buffers.items()


def _uniform(rng, fan_in, shape):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class Linear:
    w: Param
    b: Param

    @classmethod
    def create(cls, store, path, din, dout, rng):
        return cls(store.param(f"{path}.w", _uniform(rng, din, (din, dout))),
                   store.param(f"{path}.b", _uniform(rng, din, (dout,))))

    def __call__(self, x):
        return linear(x, self.w, self.b)


@dataclass
class MLP:
    """Linear layers with ReLU between them; ``final_act`` adds one after the last."""

    layers: list
    final_act: bool = False

    @classmethod
    def create(cls, store, path, widths, rng, final_act=False):
        if len(widths) < 2:
            raise ConfigError(f"MLP needs at least an input and output width, got {widths}")
        layers = [Linear.create(store, f"{path}.{i}", a, b, rng)
                  for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        return cls(layers, final_act)

    def __call__(self, x):
        return mlp(x, self)


def mlp(x, net: MLP) -> Tensor:
    if not net.layers:
        raise ConfigError("empty MLP spec")
    if as_tensor(x).shape[-1] != net.layers[0].w.shape[0]:
        raise DimensionError(
            f"mlp: input width {as_tensor(x).shape[-1]} != first layer {net.layers[0].w.shape[0]}"
        )
    for i, layer in enumerate(net.layers):
        x = layer(x)
        if i < len(net.layers) - 1 or net.final_act:
            x = relu(x)
    return x


@dataclass
class LayerNorm:
    gamma: Param
    beta: Param
    eps: float = 1e-5

    @classmethod
    def create(cls, store, path, d, eps=1e-5):
        return cls(store.param(f"{path}.gamma", np.ones(d)),
                   store.param(f"{path}.beta", np.zeros(d)), eps)

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class BatchNorm:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"
    track_stats: bool = field(default=True)

    @classmethod
    def create(cls, store, path, d, momentum=0.1, eps=1e-5):
        return cls(store.param(f"{path}.gamma", np.ones(d)),
                   store.param(f"{path}.beta", np.zeros(d)),
                   store.buffer(f"{path}.running_mean", np.zeros(d)),
                   store.buffer(f"{path}.running_var", np.ones(d)),
                   momentum, eps)

    def __call__(self, x):
        return batch_norm(x, self)


# ---------------------------------------------------------------- optimizer


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every parameter, then zero grads."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in store.params.values():
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        p.data -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
        g[...] = 0.0


# ---------------------------------------------------------------- checkpoints
#
# layout: version byte | u32 LE manifest length | UTF-8 JSON manifest
#         [{"path": str, "shape": [int, ...]}, ...] | float64 LE payload


def save_checkpoint(store: ParamStore, path):
    entries = list(store.entries())
    manifest = json.dumps([{"path": k, "shape": list(a.shape)} for k, a in entries]).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in entries)
    Path(path).write_bytes(bytes([CHECKPOINT_VERSION]) + struct.pack("<I", len(manifest))
                           + manifest + payload)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[0] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: bad header or unsupported version")
    (mlen,) = struct.unpack("<I", raw[1:5])
    try:
        manifest = json.loads(raw[5:5 + mlen].decode())
        shapes = [(e["path"], tuple(int(s) for s in e["shape"])) for e in manifest]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({exc})") from None
    body = raw[5 + mlen:]
    need = 8 * int(np.sum([np.prod(s, dtype=np.int64) for _, s in shapes], dtype=np.int64))
    if len(body) != need:
        raise CheckpointFormatError(f"{path}: payload has {len(body)} bytes, manifest needs {need}")
    flat = np.frombuffer(body, dtype="<f8")
    out, off = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = flat[off:off + n].reshape(shape).astype(DTYPE)
        off += n
    return out


def load_checkpoint(store: ParamStore, path):
    """Copy checkpoint arrays into ``store`` in place; shapes and paths must match."""
    arrays = read_checkpoint(path)
    want = dict((k, a.shape) for k, a in store.entries())
    missing = sorted(set(want) - set(arrays))
    extra = sorted(set(arrays) - set(want))
    if missing or extra:
        raise DimensionError(f"checkpoint paths differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, a in arrays.items():
        if a.shape != want[k]:
            raise DimensionError(f"{k}: checkpoint shape {a.shape} != model shape {want[k]}")
    for k, a in arrays.items():
        if k in store.params:
            store.params[k].data[...] = a
        else:
            store.buffers[k][...] = a


# ---------------------------------------------------------------- gradient checking


def numeric_grad(f, arr: np.ndarray, h=1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-12) -> float:
    """Norm-wise relative error; ``floor`` keeps all-zero gradients comparable."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    den = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / den)


@dataclass
class GradCheck:
    errors: dict
    kink_crossings: int  # finite differences whose +-h evaluations changed branch

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def smooth(self):
        return self.kink_crossings == 0


def check_param_grads(loss_fn, params: dict, h=1e-5, floor_frac=1e-3) -> GradCheck:
    """Backprop vs central finite differences for each named parameter tensor.

    ``loss_fn`` builds a fresh graph and returns a scalar Tensor.  Some tensors
    have an exactly-zero gradient (biases cancelled by batch norm, shifts the
    softmax ignores); there the finite differences are pure round-off, so the
    denominator is floored at ``floor_frac`` times the global gradient norm.
    """
    for p in params.values():
        p.grad[...] = 0.0
    with activation_pattern() as pat:
        loss_fn().backward()
    base = pat.digest()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.grad[...] = 0.0
    total = np.sqrt(np.sum([np.sum(g * g) for g in analytic.values()]))
    floor = max(1e-12, floor_frac * total)
    crossings = 0

    def f():
        nonlocal crossings
        with no_grad(), activation_pattern() as pat:
            val = float(loss_fn().data)
        crossings += pat.digest() != base
        return val

    errors = {k: rel_error(analytic[k], numeric_grad(f, p.data, h), floor)
              for k, p in params.items()}
    return GradCheck(errors, crossings)
