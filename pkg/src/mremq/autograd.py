"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the toy encoder needs are provided. Every op returns a new
:class:`Tensor`; when any input requires a gradient the result remembers its
parents and a closure that maps the upstream gradient to parent gradients.
The graph is consumed (and released) by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

_state = threading.local()

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while finite checking was enabled."""


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation / target computation)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


_check_finite = False


def set_check_finite(flag: bool) -> None:
    """Toggle the per-op finiteness assertion (off by default for speed)."""
    global _check_finite
    _check_finite = bool(flag)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    ``data`` keeps its float dtype if one is given; anything else becomes
    float32. ``op`` tags how the node was produced (``"leaf"`` for inputs and
    parameters).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

    # Operator sugar for the handful of ops used inline.
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, sa), unbroadcast(g * ad, sb)

    return make_node(ad * bd, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), "scale", lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the erf form of the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_node(xd * cdf, (x,), "gelu", bw)


# ------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather ``table[idx]``; ``idx`` is an integer array of any shape."""
    idx = np.asarray(idx)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"token id out of range [0, {n_rows})")

    def bw(g):
        flat = g.reshape(-1, g.shape[-1])
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), flat)
        return (out,)

    return make_node(table.data[idx], (table,), "embedding", bw)


# ------------------------------------------------------------------ algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``. ``a`` may carry leading batch dims; ``b`` is 2-D or matches them."""
    if a.shape[-1] != (b.shape[-2] if b.ndim >= 2 else b.shape[0]) or b.ndim < 2:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2:

        def bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    else:

        def bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_node(ad @ bd, (a, b), "matmul", bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (x,), "softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis with population variance, then ``gamma * . + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        gx = g * gd
        gxm = gx.mean(axis=-1, keepdims=True)
        gxx = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = rstd * (gx - gxm - xhat * gxx)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(xhat * gd + beta.data, (x, gamma, beta), "layer_norm", bw)


# --------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape, dt = x.shape, x.dtype
    return make_node(np.asarray(x.data.sum(), dtype=dt), (x,), "sum",
                     lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return make_node(x.data.mean(axis=axis), (x,), "mean", bw)


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements; ``b`` may be a Tensor or an array."""
    bt = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != bt.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {bt.shape}")
    diff = a.data - bt.data
    n = diff.size
    val = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def bw(g):
        ga = g * (2.0 / n) * diff
        return ga, -ga

    return make_node(val, (a, bt), "mse", bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits[batch, classes]`` against integer labels."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    labels = np.asarray(labels)
    n = labels.shape[0]
    val = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return make_node(val, (logits,), "cross_entropy", bw)


# ----------------------------------------------------------------- backward


def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Returns a map from every reachable leaf that requires a gradient to its
    gradient; the same array is stored on ``leaf.grad`` (overwriting). The
    recorded graph is released as it is consumed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        node._parents = ()
        node._backward = None
    return leaves
