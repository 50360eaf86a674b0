"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are plain numpy; a :class:`Tensor` only carries a gradient closure
when it was produced inside an active :class:`Tape` from at least one input
that requires grad. Outside a tape every op is a thin numpy call, which is
the inference path.

Matrix products report ``2*p*q*r`` FLOPs to any active :class:`FlopCounter`,
bucketed by ``kind`` (``"dense"`` for weight products, ``"attention"`` for
activation-activation products).
"""
from __future__ import annotations

import math
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.generic):
            data = np.asarray(data)
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# --------------------------------------------------------------------------- tape

_TAPES: list["Tape"] = []
_COUNTERS: list["FlopCounter"] = []


class Tape:
    """Records differentiable nodes in creation (= topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()

    def leaves(self) -> list[Tensor]:
        """Leaf tensors requiring grad that feed any recorded node."""
        seen, out = set(), []
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and p.backward_fn is None and id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


class FlopCounter:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def __enter__(self):
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _COUNTERS.remove(self)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, kind: str) -> int:
        return self.counts.get(kind, 0)


def _count(kind: str, flops: int) -> None:
    for c in _COUNTERS:
        c.counts[kind] += flops


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _TAPES and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _TAPES[-1].nodes.append(out)
        return out
    return Tensor(data)


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and return them keyed by leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.backward_fn is None:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


# --------------------------------------------------------------------------- ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; scalars are treated as constants."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = b
        return _node(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _node(ad * bd, (a, b), bw)


def matmul_flops(a_shape: tuple, b_shape: tuple) -> int:
    """``2*p*q*r`` times the broadcast batch size."""
    p, q = a_shape[-2], a_shape[-1]
    r = b_shape[-1]
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2])
    return 2 * int(np.prod(batch, dtype=np.int64)) * p * q * r


def matmul(a: Tensor, b: Tensor, kind: str = "dense") -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if _COUNTERS:
        _count(kind, matmul_flops(a.shape, b.shape))
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    # a shared 2-D weight is one GEMM over all leading rows
    folded = ad.ndim > 2 and bd.ndim == 2

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if folded:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(sa)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            if folded:
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    out = (ad.reshape(-1, sa[-1]) @ bd).reshape(sa[:-1] + (sb[-1],)) if folded else ad @ bd
    return _node(out, (a, b), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, key) -> Tensor:
    """Basic slicing (and integer-array row selection) with a scatter backward."""
    shape, dtype = a.shape, a.dtype
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int)) or k is Ellipsis or k is None for k in parts)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _node(a.data[key], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(a.data.sum(dtype=a.dtype).reshape(()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.data.size)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` computed with max subtraction."""
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    sx = x.shape

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.reshape(sx)
        return gx, gg, gb

    return _node(xhat * gd + bias.data, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(y.astype(x.dtype, copy=False), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _node(table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: int = -100) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored positions."""
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} logit rows vs {t.shape[0]} targets")
    keep = t != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: every position is ignored, mean undefined")
    if np.any((t[keep] < 0) | (t[keep] >= V)):
        raise ContractError("cross_entropy: target id outside [0, V)")
    logp = log_softmax_np(flat)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count
    shape = logits.shape

    def bw(g):
        p = np.exp(logp)
        p[~keep] = 0.0
        p[rows, t[rows]] -= 1.0
        return ((p * (g / count)).astype(flat.dtype, copy=False).reshape(shape),)

    return _node(np.asarray(loss, dtype=flat.dtype).reshape(()), (logits,), bw)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def no_grad_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in arrays.items()}


def grad_params(arrays: dict[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Wrap arrays as tensors; ``names`` (default: all) become trainable leaves."""
    train = set(arrays) if names is None else set(names)
    return {k: Tensor(v, requires_grad=k in train, name=k) for k, v in arrays.items()}
