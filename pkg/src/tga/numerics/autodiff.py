"""A small reverse-mode tape over numpy arrays.

Every primitive computes its forward value eagerly and, when a `Tape` is
active and some input requires a gradient, records a closure that maps the
output adjoint to input adjoints.  ``Tape.backward`` replays the records in
exact reverse order and accumulates parameter gradients additively into the
owning `ParameterStore`.

Each primitive also reports its multiply-add / element count to the active
`OpCounter`s, which the complexity checks rely on.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "param", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, param: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f", param={self.param!r}" if self.param else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# op counting

class OpCounter:
    """Accumulates primitive work: multiply-adds for contractions, element
    counts for everything else."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int):
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_COUNTERS: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _tick(op: str, n: int):
    for c in _COUNTERS:
        c.add(op, int(n))


# --------------------------------------------------------------------------
# tape

_TAPES: list["Tape"] = []


class Tape:
    """Records primitives executed while active (``with Tape() as tape:``)."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor, store=None) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(.) back through the recorded operations.

        Parameter gradients are added into ``store.grads`` when a store is
        given; the per-parameter gradients of this call are also returned.
        """
        if not self.records:
            raise TapeError("backward() called before any recorded forward pass")
        if self._done:
            raise TapeError("backward() already ran on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self.records}
        if id(loss) not in produced:
            raise TapeError("loss was not produced on this tape")
        self._done = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        params: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.param is not None:
                    params[id(inp)] = inp
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result: dict[str, np.ndarray] = {}
        for key, t in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if t.param in result:
                result[t.param] = result[t.param] + g
            else:
                result[t.param] = g
        if store is not None:
            for name, g in result.items():
                store.grads[name] += g
        return result


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append((out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    _tick("add", out.data.size)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    _tick("sub", out.data.size)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    _tick("mul", out.data.size)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))
    _tick("scale", out.data.size)
    return _record(out, (a,), lambda g: (g * a.data.dtype.type(c),))


_KINK_WATCHERS: list[list[np.ndarray]] = []


@contextlib.contextmanager
def watch_kinks():
    """Collect every ReLU activation pattern computed inside the block."""
    patterns: list[np.ndarray] = []
    _KINK_WATCHERS.append(patterns)
    try:
        yield patterns
    finally:
        _KINK_WATCHERS.remove(patterns)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    for w in _KINK_WATCHERS:
        w.append(mask)
    out = Tensor(a.data * mask)
    _tick("relu", out.data.size)
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)
    _tick("sigmoid", s.size)
    return _record(out, (a,), lambda g: (g * s * (1 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


# --------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    for t in tensors[1:]:
        _check(
            t.shape[:ax] + t.shape[ax + 1:] == tensors[0].shape[:ax] + tensors[0].shape[ax + 1:],
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}",
        )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    _tick("concat", out.data.size)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def take(a: Tensor, index: np.ndarray, unique: bool = False) -> Tensor:
    """Gather rows ``a[index]``; an index of -1 yields a zero row.

    ``unique`` promises that non-negative indices do not repeat, which lets
    the backward pass assign instead of scatter-add.
    """
    index = np.asarray(index, dtype=np.int64)
    pad = index < 0
    has_pad = bool(pad.any())
    safe = np.where(pad, 0, index) if has_pad else index
    data = a.data[safe]
    if has_pad:
        data[pad] = 0
    out = Tensor(data)
    _tick("take", data.size)

    def backward(g):
        ga = np.zeros_like(a.data)
        flat_idx = index.reshape(-1)
        flat_g = g.reshape((-1,) + a.shape[1:])
        if has_pad:
            keep = flat_idx >= 0
            flat_idx, flat_g = flat_idx[keep], flat_g[keep]
        if unique:
            ga[flat_idx] = flat_g
        else:
            ga = scatter_add(flat_idx, flat_g, a.shape[0])
        return (ga,)

    return _record(out, (a,), backward)


def scatter_add(index: np.ndarray, values: np.ndarray, num_rows: int) -> np.ndarray:
    """``out[index[i]] += values[i]`` via a sparse 0/1 matrix product."""
    flat = values.reshape(len(index), -1)
    sel = sparse.csr_matrix(
        (np.ones(len(index), dtype=values.dtype), (index, np.arange(len(index)))),
        shape=(num_rows, len(index)),
    )
    return np.asarray(sel @ flat).reshape((num_rows,) + values.shape[1:])


def scatter(a: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Place row ``i`` of ``a`` at output row ``index[i]``; other rows are zero.

    Indices must be unique.
    """
    index = np.asarray(index, dtype=np.int64)
    data = np.zeros((num_rows,) + a.shape[1:], dtype=a.dtype)
    data[index] = a.data
    out = Tensor(data)
    _tick("scatter", a.data.size)
    return _record(out, (a,), lambda g: (g[index],))


# --------------------------------------------------------------------------
# contractions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check(
        a.data.ndim >= 1 and b.data.ndim >= 1 and a.shape[-1] == b.shape[-2 if b.data.ndim > 1 else 0],
        f"matmul: shape mismatch {a.shape} @ {b.shape}",
    )
    out = Tensor(np.matmul(a.data, b.data))
    _tick("matmul", out.data.size * a.shape[-1])

    def backward(g):
        bd = b.data if b.data.ndim > 1 else b.data[:, None]
        gg = g if b.data.ndim > 1 else g[..., None]
        ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
        ad = a.data if a.data.ndim > 1 else a.data[None, :]
        gg2 = gg if a.data.ndim > 1 else gg[None, ...]
        gb = np.matmul(np.swapaxes(ad, -1, -2), gg2)
        ga = _unbroadcast(ga.reshape(a.shape) if a.data.ndim == 1 else ga, a.shape)
        gb = gb.reshape(b.shape) if b.data.ndim == 1 else _unbroadcast(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    _check(
        weight.data.ndim == 2 and x.shape[-1] == weight.shape[1],
        f"linear: input {x.shape} incompatible with weight {weight.shape}",
    )
    y = x.data @ weight.data.T
    if bias is not None:
        _check(bias.shape == (weight.shape[0],), f"linear: bias {bias.shape} vs weight {weight.shape}")
        y += bias.data
    out = Tensor(y)
    _tick("linear", y.size * weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, backward)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.  Every index of an operand must also appear in the
    other operand or in the output (no operand-local reductions)."""
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for mine, other in ((ia, ib), (ib, ia)):
        _check(all(ch in other or ch in out_idx for ch in mine), f"einsum: unsupported spec {spec!r}")
    data = np.einsum(spec, a.data, b.data, optimize=True)
    sizes = {}
    for idx, arr in ((ia, a.data), (ib, b.data)):
        for ch, n in zip(idx, arr.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {spec!r}: index {ch!r} has sizes {sizes[ch]} and {n}")
    out = Tensor(data)
    _tick("einsum", math.prod(sizes.values()))

    def backward(g):
        ga = np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True)
        return ga, gb

    return _record(out, (a, b), backward)


def grouped_linear(
    x: Tensor,
    weights: Sequence[Tensor],
    biases: Sequence[Tensor],
    bounds: np.ndarray,
) -> Tensor:
    """Row-blocked affine map: rows ``bounds[g]:bounds[g+1]`` of ``x`` use
    ``weights[g]`` (out, in) and ``biases[g]``.  Rows must be pre-sorted."""
    _check(len(weights) == len(biases) == len(bounds) - 1, "grouped_linear: group count mismatch")
    _check(bounds[-1] == x.shape[0], f"grouped_linear: bounds end {bounds[-1]} != rows {x.shape[0]}")
    n_out = weights[0].shape[0]
    y = np.empty((x.shape[0], n_out), dtype=x.dtype)
    active = [gi for gi in range(len(weights)) if bounds[gi + 1] > bounds[gi]]
    for gi in active:
        w = weights[gi].data
        _check(w.shape == (n_out, x.shape[1]), f"grouped_linear: weight {w.shape} vs input {x.shape}")
        lo, hi = bounds[gi], bounds[gi + 1]
        # einsum rather than BLAS: a row's result must not depend on how many
        # rows share its block, or one event could perturb unrelated nodes
        np.einsum("ek,ok->eo", x.data[lo:hi], w, out=y[lo:hi])
        y[lo:hi] += biases[gi].data
    out = Tensor(y)
    _tick("grouped_linear", y.size * x.shape[1])

    def backward(g):
        gx = np.empty_like(x.data)
        gws: list = [None] * len(weights)
        gbs: list = [None] * len(weights)
        for gi in active:
            lo, hi = bounds[gi], bounds[gi + 1]
            gx[lo:hi] = g[lo:hi] @ weights[gi].data
            gws[gi] = g[lo:hi].T @ x.data[lo:hi]
            gbs[gi] = g[lo:hi].sum(axis=0)
        return (gx, *gws, *gbs)

    return _record(out, (x, *weights, *biases), backward)


# --------------------------------------------------------------------------
# normalisation / reductions / losses

def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get weight 0, and rows
    with nothing unmasked are all zero."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1)
    out = Tensor(y.astype(x.dtype, copy=False))
    _tick("softmax", y.size)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat.astype(x.dtype, copy=False))
    _tick("layer_norm", xhat.size)

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _record(out, (x,), backward)


def total(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    _tick("sum", a.data.size)
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    _tick("mean", n)
    return _record(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed from logits in the stable form
    ``max(z,0) - z*y + log(1 + exp(-|z|))``."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    n = max(z.size, 1)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n
    out = Tensor(np.asarray(loss, dtype=z.dtype))
    _tick("bce", z.size)
    return _record(out, (logits,), lambda g: (g * (_sigmoid(z) - y) / n,))
