"""Dense float64 tensors with reverse-mode differentiation, plus Adam.

Only the handful of operations the completion network needs are provided.
Every op checks its forward result for NaN/Inf and raises instead of
propagating non-finite values.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numba
import numpy as np


_trace: Optional[list] = None


@contextmanager
def branch_trace():
    """Collect the discrete choices (ReLU masks, argmax/argmin, neighbour lists) made inside.

    Two evaluations with equal traces lie on the same smooth piece of the
    loss, which is what a finite-difference stencil needs.
    """
    global _trace
    prev, _trace = _trace, []
    try:
        yield _trace
    finally:
        _trace = prev


def note_branch(x) -> None:
    if _trace is not None:
        _trace.append(np.array(x, copy=True))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward on a non-scalar needs an explicit gradient")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad or pg is None:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, tuple(parents) if req else (), backward if req else None, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    flat = b.data.ndim == 2
    if flat:
        # one 2-D GEMM over all leading axes
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ((a, ga), (b, gb))
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bw, "matmul")


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)
    note_branch(t.data > 0)

    def bw(g):
        return ((t, g * (t.data > 0)),)

    return _make(out, (t,), bw, "relu")


def max_over_points(t: Tensor, axis: int = -2) -> Tensor:
    """Max over the point axis; the gradient goes to the first argmax."""
    axis = axis % t.data.ndim
    idx = np.expand_dims(np.argmax(t.data, axis=axis), axis)
    note_branch(idx)
    out = np.take_along_axis(t.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(t.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return ((t, full),)

    return _make(out, (t,), bw, "max_over_points")


def concat(a, b, axis: int = -1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"concat: shape mismatch {a.shape} vs {b.shape}")
    axis = axis % a.data.ndim
    for ax in range(a.data.ndim):
        if ax != axis and a.shape[ax] != b.shape[ax]:
            raise ValueError(f"concat: shape mismatch {a.shape} vs {b.shape}")
    split = a.shape[axis]

    def bw(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ((a, ga), (b, gb))

    return _make(np.concatenate([a.data, b.data], axis=axis), (a, b), bw, "concat")


def dropout(t: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0:
        return t
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(t.shape, dtype=np.float32) >= p) / (1.0 - p)

    def bw(g):
        return ((t, g * keep),)

    return _make(t.data * keep, (t,), bw, "dropout")


def reshape(t: Tensor, shape) -> Tensor:
    def bw(g):
        return ((t, g.reshape(t.shape)),)

    return _make(t.data.reshape(shape), (t,), bw, "reshape")


def expand_dims(t: Tensor, axis: int) -> Tensor:
    return reshape(t, np.expand_dims(t.data, axis).shape)


def take_points(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis -2 per batch: (B, N, C) with (B, K) -> (B, K, C)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take_along_axis(t.data, idx[..., None], axis=-2)

    def bw(g):
        full = np.zeros_like(t.data)
        bidx = np.broadcast_to(np.arange(t.shape[0])[:, None], idx.shape)
        np.add.at(full, (bidx, idx), g)
        return ((t, full),)

    return _make(out, (t,), bw, "take_points")


def norm(t: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    n = np.sqrt(np.sum(t.data * t.data, axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return ((t, t.data * np.expand_dims(scale, axis)),)

    return _make(n, (t,), bw, "norm")


def sum_(t: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return ((t, np.broadcast_to(g, t.shape).copy()),)
        return ((t, np.broadcast_to(np.expand_dims(g, axis), t.shape).copy()),)

    return _make(np.sum(t.data, axis=axis), (t,), bw, "sum")


def mean(t: Tensor, axis=None) -> Tensor:
    count = t.data.size if axis is None else t.shape[axis]
    return mul(sum_(t, axis), 1.0 / count)


def linear_max(x, w: Tensor, b: Tensor) -> Tensor:
    """max over points of (x @ w + b), i.e. ``max_over_points(matmul(x, w) + b)``.

    Fused because only one point per channel receives gradient; the backward
    pass touches B*C rows instead of the full (B, N, C) activation.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3 or w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear_max: shape mismatch {x.shape} vs {w.shape}")
    bsz, npts, k = x.shape
    c = w.shape[1]
    y = (x.data.reshape(bsz * npts, k) @ w.data).reshape(bsz, npts, c)
    out, idx = _max_argmax_points(y)
    note_branch(idx)
    out += b.data

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if w.requires_grad:
            gw = _max_weight_grad(np.ascontiguousarray(x.data), idx, g).T
        if x.requires_grad:
            gx = _max_input_grad(np.ascontiguousarray(w.data.T), idx, g, npts)
        return ((x, gx), (w, gw), (b, _unbroadcast(g, b.shape)))

    return _make(out, (x, w, b), bw, "linear_max")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    """Adam moments and hyper-parameters.

    ``weight_decay`` is a multiplicative learning-rate factor applied by
    :meth:`end_epoch`, not an L2 penalty.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.92
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def end_epoch(self):
        self.learning_rate *= self.weight_decay


def adam_step(params: dict, state: AdamState) -> None:
    """One bias-corrected Adam update over ``params`` (name -> Tensor); zeroes grads."""
    if not any(p.grad is not None for p in params.values()):
        raise RuntimeError("no gradients")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.learning_rate
    for name in sorted(params):
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if p.grad is not None:
            if not (p.data.flags.c_contiguous and p.data.flags.writeable):
                p.data = p.data.copy()
            _adam_kernel(p.data.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1),
                         m.reshape(-1), state.v[name].reshape(-1),
                         lr, b1, b2, c1, c2, state.epsilon)
        else:
            m *= b1
            state.v[name] *= b2
            p.data = p.data - lr * (m / c1) / (np.sqrt(state.v[name] / c2) + state.epsilon)
        p.grad = None


@numba.njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, c1, c2, eps):
    # lr * (m/c1) / (sqrt(v/c2) + eps), rearranged to one sqrt and one divide
    step = lr * np.sqrt(c2) / c1
    eps_hat = eps * np.sqrt(c2)
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps_hat)


@numba.njit(cache=True)
def _max_weight_grad(x, idx, g):
    # (C, K): sum over b of g[b, c] * x[b, idx[b, c], :]
    bsz, _, k = x.shape
    c = idx.shape[1]
    out = np.zeros((c, k))
    for b in range(bsz):
        for j in range(c):
            gj = g[b, j]
            row = x[b, idx[b, j]]
            for q in range(k):
                out[j, q] += gj * row[q]
    return out


@numba.njit(cache=True)
def _max_input_grad(wt, idx, g, npts):
    # (B, N, K): g[b, c] * w[:, c] scattered onto the winning point
    c, k = wt.shape
    bsz = idx.shape[0]
    out = np.zeros((bsz, npts, k))
    for b in range(bsz):
        for j in range(c):
            gj = g[b, j]
            n = idx[b, j]
            for q in range(k):
                out[b, n, q] += gj * wt[j, q]
    return out


@numba.njit(cache=True)
def pairwise_distances(a, b):
    """(B, N, 3) x (B, K, 3) -> (B, N, K) Euclidean distances."""
    bsz, n, _ = a.shape
    k = b.shape[1]
    out = np.empty((bsz, n, k))
    for s in range(bsz):
        for i in range(n):
            for j in range(k):
                dx = a[s, i, 0] - b[s, j, 0]
                dy = a[s, i, 1] - b[s, j, 1]
                dz = a[s, i, 2] - b[s, j, 2]
                out[s, i, j] = np.sqrt(dx * dx + dy * dy + dz * dz)
    return out


@numba.njit(cache=True)
def _max_argmax_points(y):
    # max over axis 1 of (B, N, C), first index wins ties
    bsz, npts, c = y.shape
    out = np.empty((bsz, c))
    idx = np.zeros((bsz, c), dtype=np.int64)
    for b in range(bsz):
        for j in range(c):
            out[b, j] = y[b, 0, j]
        for n in range(1, npts):
            for j in range(c):
                if y[b, n, j] > out[b, j]:
                    out[b, j] = y[b, n, j]
                    idx[b, j] = n
    return out, idx


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints: magic, int32 header, little-endian float64 payload

CHECKPOINT_MAGIC = b"GFPCKPT1"


def save_flat(path, header: Sequence[int], arrays: Iterable[np.ndarray]) -> None:
    header = [int(h) for h in header]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(struct.pack(f"<{len(header)}i", *header))
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_flat(path) -> tuple[list[int], np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<I", blob, 8)
    header = list(struct.unpack_from(f"<{n}i", blob, 12))
    payload = blob[12 + 4 * n:]
    if len(payload) % 8:
        raise ValueError("truncated checkpoint payload")
    return header, np.frombuffer(payload, dtype="<f8").astype(np.float64)
