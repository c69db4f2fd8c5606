"""Minimal reverse-mode differentiation over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in order;
``Tape.backward`` replays them in reverse and accumulates gradients into the
trainable :class:`Param` leaves. Outside a tape every op is a plain forward
computation, which is what inference uses.

All ops accept leading batch dimensions; vectors live on the last axis.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
GELU_C = math.sqrt(2.0 / math.pi)  # tanh-approximation constants
GELU_K = 0.044715
COS_EPS = 1e-8
LN_EPS = 1e-5

_local = threading.local()


class Tensor:
    """A node in the computation graph: an array plus how it was made."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents: tuple = (), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Trainable leaf with its own gradient slot."""

    __slots__ = ("grad", "trainable", "name")

    def __init__(self, value, name: str = "", trainable: bool = True, dtype=DTYPE):
        super().__init__(np.array(value, dtype=dtype), requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag


def constant(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DTYPE))


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops run inside the block are recorded::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, visit: Callable[[Tensor], None] | None = None) -> None:
        """Accumulate d(loss)/d(param) into every trainable param reached.

        The tape itself is left intact, so calling this twice without
        resetting grads doubles them.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Param] = {}
        if isinstance(loss, Param):
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if isinstance(parent, Param):
                    leaves[key] = parent
        for key, param in leaves.items():
            if param.trainable and key in grads:
                param.grad += grads[key].astype(param.grad.dtype, copy=False)


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _result(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, tuple(parents), backward_fn, requires_grad=True)
    tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(GELU_C)
    k = xd.dtype.type(GELU_K)
    inner = c * (xd + k * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def back(g):
        dinner = c * (1 + 3 * k * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _result(out, (x,), back)


# reductions and reshaping ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _result(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [constant(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, xs, back)


def index(x: Tensor, idx) -> Tensor:
    """``x[idx]`` for any numpy index; repeated indices accumulate."""
    out = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(np.array(out), (x,), back)


def fill_rows(base: Tensor, rows: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[rows] = values`` (rows must be unique)."""
    rows = np.asarray(rows, dtype=np.intp)
    out = base.data.copy()
    out[rows] = values.data

    def back(g):
        gb = g.copy()
        gb[rows] = 0
        return gb, g[rows]

    return _result(out, (base, values), back)


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(out, (a, b), back)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x = constant(x)
    if x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise ValueError(
            f"linear shape mismatch: x {x.shape}, W {W.shape}, b {None if b is None else b.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data

    def back(g):
        gx = g @ W.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gW = x.data.reshape(-1, x.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return _result(out, parents, back)


# normalisation and probabilities --------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row (x - mean) / sqrt(var + eps) * gamma + beta, biased variance."""
    d = x.shape[-1]
    if d < 2 or gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _result(out, (x, gamma, beta), back)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    e = np.exp(zd - zd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (z,), back)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    shifted = zd - zd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (z,), back)


def cosine_sim(a: Tensor, b: Tensor, eps: float = COS_EPS) -> Tensor:
    """Cosine similarity over the last axis; two zero vectors give 0."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=-1)
    norm_a = np.sqrt((ad * ad).sum(axis=-1))
    norm_b = np.sqrt((bd * bd).sum(axis=-1))
    na = np.maximum(norm_a, eps)
    nb = np.maximum(norm_b, eps)
    out = dot / (na * nb)

    def back(g):
        g = g[..., None]
        dot_, na_, nb_ = dot[..., None], na[..., None], nb[..., None]
        # the norm only moves with the vector above the eps floor
        ua = np.where(norm_a[..., None] > eps, ad / na_, 0)
        ub = np.where(norm_b[..., None] > eps, bd / nb_, 0)
        ga = g * (bd / (na_ * nb_) - dot_ / (na_ * na_ * nb_) * ua)
        gb = g * (ad / (na_ * nb_) - dot_ / (na_ * nb_ * nb_) * ub)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out.astype(ad.dtype, copy=False), (a, b), back)


# composite blocks -------------------------------------------------------------

def mlp_block(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, W1, b1)), W2, b2)


def self_attention(tokens: Tensor, Wq, bq, Wk, bk, Wv, bv, Wo, bo, heads: int = 1) -> Tensor:
    """Scaled dot-product self-attention over the token axis (-2)."""
    *lead, n, d = tokens.shape
    if d % heads:
        raise ValueError(f"embed dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        # (..., n, d) -> (..., heads, n, dh)
        return swapaxes(reshape(t, (*lead, n, heads, dh)), -2, -3)

    q = split(linear(tokens, Wq, bq))
    k = split(linear(tokens, Wk, bk))
    v = split(linear(tokens, Wv, bv))
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    mixed = swapaxes(matmul(attn, v), -2, -3)
    return linear(reshape(mixed, (*lead, n, d)), Wo, bo)


# gradient checking --------------------------------------------------------------

# central-difference stencils: offsets (in steps of eps) and weights
STENCILS = {
    2: ((1, -1), (0.5, -0.5)),
    4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
}


def grad_check(f: Callable[[], Tensor], params: Iterable[Param], eps: float = 1e-3,
               dtype=np.float64, max_per_param: int | None = None,
               rng: np.random.Generator | None = None, order: int = 4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads the current values of ``params``.
    The check runs in ``dtype`` (float64 by default) and restores the
    original values afterwards. ``order`` picks the 2nd- or 4th-order
    central stencil; the 4th-order one keeps truncation error far below the
    tolerance on entries whose gradient is tiny next to the curvature.
    ``max_per_param`` samples that many entries of each param instead of
    checking all of them.
    """
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}, got {order}")
    offsets, weights = STENCILS[order]
    params = list(params)
    saved = [(p.data, p.grad) for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        for p in params:
            if not p.trainable:
                continue
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            entries = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                entries = np.sort(rng.choice(flat.size, max_per_param, replace=False))
            for i in entries:
                orig = flat[i]
                numeric = 0.0
                for k, w in zip(offsets, weights):
                    flat[i] = orig + k * eps
                    numeric += w * float(f().data)
                flat[i] = orig
                numeric /= eps
                a = float(analytic[i])
                err = abs(a - numeric) / max(1e-6, abs(a) + abs(numeric))
                worst = max(worst, err)
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data, p.grad = data, grad
    return worst
