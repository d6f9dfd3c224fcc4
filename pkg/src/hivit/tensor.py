"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable op records its
parents and a closure mapping the upstream gradient to one gradient per
parent. ``backward`` walks the recorded DAG once in reverse topological
order and accumulates into the ``grad`` slot of every leaf that requires
grad. Intermediate gradients are not retained.

Repeated ``backward`` calls accumulate into leaf grads; call
``zero_grad`` (or set ``grad = None``) between steps.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "count_macs",
    "matmul",
    "linear",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "gather_units",
    "concat",
    "cross_entropy",
    "embedding_gather",
    "backward",
    "GELU_SQRT_2_OVER_PI",
    "GELU_CUBIC",
]

# tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

_grad_enabled = True
_mac_counter: list[int] | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def count_macs():
    """Count multiply-adds issued by matmul/linear inside the block.

    Yields a one-element list whose entry is updated in place. Used as an
    independent check on the closed-form profiler.
    """
    global _mac_counter
    prev = _mac_counter
    box = [0]
    _mac_counter = box
    try:
        yield box
    finally:
        _mac_counter = prev


def _add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype if dtype is not None else None)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / np.asarray(b, dtype=a.dtype if isinstance(a, Tensor) else None))
    a = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), fn, "div")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation with constants GELU_SQRT_2_OVER_PI and GELU_CUBIC."""
    xd = x.data
    c = np.asarray(GELU_SQRT_2_OVER_PI, dtype=xd.dtype)
    k = np.asarray(GELU_CUBIC, dtype=xd.dtype)
    inner = c * (xd + k * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = c * (1.0 + 3.0 * k * xd * xd)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (x,), fn, "gelu")


# -- shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in idx))

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), fn, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, fn, "concat")


# -- reductions -------------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- products ---------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., M, K] @ [.., K, N] -> [.., M, N]``."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc
    _add_macs(out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape).

    ``w`` has layout ``[in, out]``. The backward folds leading axes into
    one row axis so the weight gradient is a single GEMM.
    """
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out2 = x2 @ w.data
    if b is not None:
        out2 += b.data
    _add_macs(out2.size * w.shape[0])
    wd = w.data

    def fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(*lead, wd.shape[0]) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if b.requires_grad else None

    parents = (x, w) if b is None else (x, w, b)
    return _make(out2.reshape(*lead, wd.shape[1]), parents, fn, "linear")


# -- normalisation & attention pieces --------------------------------------
def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis.

    Non-finite inputs propagate as NaN in the output; ``nonfinite`` on the
    returned node's name is set so callers can detect it.
    """
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    out = _make(s, (x,), fn, "softmax")
    if not np.all(np.isfinite(s)):
        out.name = "nonfinite"
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape {gamma.shape}/{beta.shape} vs last extent {d}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def fn(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), fn, "layer_norm")


def gather_units(x: Tensor, idx) -> Tensor:
    """Select rows along axis 1: ``[B, M, ..] -> [B, M', ..]``.

    ``idx`` is either a shared index list of length M' or a per-sample
    array of shape ``[B, M']``. Indices must be in range and unique per
    row. The backward scatters gradients to the source rows and leaves
    zeros elsewhere.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexError(f"unit indices must be integers, got {idx.dtype}")
    if x.ndim < 2:
        raise IndexError("gather_units needs at least [B, M] input")
    B, M = x.shape[:2]
    rows = idx.reshape(1, -1) if idx.ndim == 1 else idx
    if idx.ndim not in (1, 2) or (idx.ndim == 2 and rows.shape[0] != B):
        raise IndexError(f"index shape {idx.shape} incompatible with input {x.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= M):
        raise IndexError(f"unit index out of range [0, {M})")
    srt = np.sort(rows, axis=1)
    if rows.shape[1] > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
        raise IndexError("duplicate unit index")

    tail = x.shape[2:]
    if idx.ndim == 1:
        out = x.data[:, idx]

        def fn(g):
            full = np.zeros(x.shape, dtype=x.dtype)
            full[:, idx] = g
            return (full,)
    else:
        bidx = np.arange(B)[:, None]
        out = x.data[bidx, idx]

        def fn(g):
            full = np.zeros(x.shape, dtype=x.dtype)
            full[bidx, idx] = g
            return (full,)

    assert out.shape[2:] == tail
    return _make(out, (x,), fn, "gather_units")


def embedding_gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for a 2-D table; backward via bincount."""
    idx = np.asarray(idx)
    n, d = table.shape
    flat = idx.reshape(-1)

    def fn(g):
        g2 = g.reshape(-1, d)
        out = np.empty((n, d), dtype=table.dtype)
        for j in range(d):
            out[:, j] = np.bincount(flat, weights=g2[:, j], minlength=n)
        return (out,)

    return _make(table.data[idx], (table,), fn, "embedding_gather")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[N, C]`` logits against int labels."""
    labels = np.asarray(labels)
    z = logits.data
    n = z.shape[0]
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), fn, "cross_entropy")


# -- reverse traversal ------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from scalar ``root``."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
