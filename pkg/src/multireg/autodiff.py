"""A small reverse-mode autodiff engine over numpy arrays.

Operations are recorded on the active :class:`Tape` (if any). Outside a tape
the same functions just compute values, which is what inference uses.

    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    tape.backward(loss)

Storage precision is float32 by default; ``precision(np.float64)`` switches
newly created tensors to float64 for gradient checks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DTYPE = np.float32
_TAPE: "Tape | None" = None


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar; keeps call sites in the network readable
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of the operations executed while it is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        global _TAPE
        self._prev = _TAPE
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False

    def backward(self, loss: Tensor, zero: bool = True) -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
        if zero:
            for node in self.nodes:
                node.grad = None
                for p in node.parents:
                    if p.backward_fn is None:
                        p.grad = None
        loss.grad = np.ones_like(loss.data)
        # reverse topological sweep: parents always precede children on the tape
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                g = np.asarray(g, dtype=p.data.dtype)
                if p.grad is None:
                    p.grad = g.copy()
                else:
                    p.grad += g


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    t = Tensor(out)
    if _TAPE is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = tuple(parents)
        t.backward_fn = backward
        _TAPE.nodes.append(t)
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _record(out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1 - out * out),))


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    return _record(out, (x,), lambda g: (g * _sigmoid(z),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * s,))


def smooth_l1(x: Tensor) -> Tensor:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    z = x.data
    a = np.abs(z)
    out = np.where(a < 1, 0.5 * z * z, a - 0.5)
    return _record(out, (x,), lambda g: (g * np.clip(z, -1, 1),))


# ------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    n = b.shape[1]
    if n % 8:
        # OpenBLAS rounds rows differently depending on their position when the
        # output is narrow; zero-padding the width keeps each row independent of
        # its position, which permutation equivariance relies on
        padded = np.zeros((b.shape[0], n + 8 - n % 8), dtype=b.data.dtype)
        padded[:, :n] = b.data
        out = (a.data @ padded)[:, :n]
    else:
        out = a.data @ b.data
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def einsum(subscripts: str, *operands) -> Tensor:
    """einsum without repeated indices inside one operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    out = np.einsum(subscripts, *[o.data for o in ops])

    def backward(g):
        grads = []
        for i, sub_i in enumerate(in_subs):
            if not ops[i].requires_grad:
                grads.append(None)
                continue
            others = [in_subs[j] for j in range(len(ops)) if j != i]
            avail = set(out_sub).union(*others) if others else set(out_sub)
            target = "".join(c for c in sub_i if c in avail)
            spec = ",".join([out_sub] + others) + "->" + target
            gi = np.einsum(spec, g, *[ops[j].data for j in range(len(ops)) if j != i])
            if target != sub_i:
                shape = [ops[i].shape[k] if c in avail else 1 for k, c in enumerate(sub_i)]
                order = [c for c in sub_i if c in avail]
                gi = np.transpose(gi, [target.index(c) for c in order]).reshape(shape)
                gi = np.broadcast_to(gi, ops[i].shape)
            grads.append(gi)
        return grads

    return _record(out, ops, backward)


def solve_spd_dense(a: Tensor, b: Tensor) -> Tensor:
    """x = a^{-1} b for a square system (used as an oracle path in tests)."""
    x = np.linalg.solve(a.data, b.data)

    def backward(g):
        gb = np.linalg.solve(a.data.T, g)
        ga = -gb @ x.T if x.ndim == 2 else -np.outer(gb, x)
        return ga, gb

    return _record(x, (a, b), backward)


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------- restructuring

def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: np.split(g, splits, axis=axis))


def cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice of the last axis."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _record(x.data[..., start:stop], (x,), backward)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` along axis 0."""
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), backward)


class Segments:
    """Grouping of rows into segments with order-independent reductions.

    Sums are computed by sorting each segment's values before adding, so the
    result depends only on the multiset of rows in a segment and not on the
    order in which they are stored. This gives bit-exact permutation
    equivariance for graph aggregations.
    """

    def __init__(self, seg: np.ndarray, n_segments: int):
        seg = np.asarray(seg, dtype=np.int64)
        self.seg = seg
        self.n = n_segments
        counts = np.bincount(seg, minlength=n_segments)
        self.counts = counts
        width = int(counts.max()) if len(seg) else 0
        self.width = width
        order = np.argsort(seg, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos = np.arange(len(seg)) - np.repeat(starts, counts)
        self.slot = np.full((n_segments, max(width, 1)), -1, dtype=np.int64)
        self.slot[seg[order], pos] = order
        self.mask = self.slot >= 0

    def padded(self, values: np.ndarray, fill) -> np.ndarray:
        shape = (self.n, self.slot.shape[1]) + values.shape[1:]
        out = np.full(shape, fill, dtype=values.dtype)
        out[self.mask] = values[self.slot[self.mask]]
        return out

    def sum_values(self, values: np.ndarray) -> np.ndarray:
        pad = self.padded(values, 0)
        return np.sort(pad, axis=1).sum(axis=1)

    def max_values(self, values: np.ndarray) -> np.ndarray:
        return self.padded(values, -np.inf).max(axis=1)


def segment_sum(x: Tensor, segs: Segments) -> Tensor:
    return _record(segs.sum_values(x.data), (x,), lambda g: (g[segs.seg],))


def segment_softmax(logits: Tensor, segs: Segments) -> Tensor:
    """Softmax of a 1-D logit vector within each segment."""
    shift = segs.max_values(logits.data)[segs.seg]
    e = exp(sub(logits, shift))
    z = segment_sum(e, segs)
    return div(e, gather(z, segs.seg))


def dot_sorted(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product whose value is independent of element order."""
    return float(np.sort((a * b).ravel()).sum())


# ------------------------------------------------------------------- layers

def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise standardisation followed by a per-feature affine map."""
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        d = z.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), backward)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-query scaled dot-product attention: softmax(q k^T / sqrt d) v."""
    d = q.shape[-1]
    logits = mul(matmul(q, transpose(k, (1, 0))), 1.0 / np.sqrt(d))
    shift = logits.data.max(axis=-1, keepdims=True)
    e = exp(sub(logits, shift))
    w = div(e, sum(e, axis=-1, keepdims=True))
    return matmul(w, v)
