"""Reverse-mode automatic differentiation over numpy arrays.

Everything in this package differentiates through this module. A ``Tensor``
wraps a float64 ``numpy.ndarray``; operations build an implicit tape (each
result keeps references to its parent tensors plus a vector-Jacobian-product
closure), and :func:`backward` replays that tape once in reverse topological
order. The companion :func:`finite_difference_grad` is the independent oracle
the test suite and the ``grad-check`` command compare every backward pass
against — it never goes through the tape.

Conventions:

* float64 everywhere by default (the gradient tolerances need it); pass
  ``dtype=np.float32`` to :func:`tensor` for the fast path.
* Gradient accumulation is additive: ``backward`` adds into ``.grad``; callers
  zero leaves between steps (:func:`zero_grad`).
* A tensor participates in the tape only if ``requires_grad`` is set on it or
  on something upstream, and only while grads are globally enabled
  (:func:`no_grad`), so frozen/inference forwards cost no graph bookkeeping.
* Single-threaded per graph. Distinct graphs may live on distinct threads.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "mul_scalar",
    "add_scalar",
    "matmul",
    "transpose",
    "reshape",
    "exp",
    "log",
    "relu",
    "leaky_relu",
    "elu",
    "gelu",
    "sigmoid",
    "tanh",
    "softplus",
    "smooth_l1",
    "softmax",
    "logsumexp",
    "l2_normalize",
    "layernorm",
    "batchnorm",
    "cosine_similarity",
    "sum_",
    "mean",
    "concat",
    "stack",
    "gather",
    "slice_",
    "detach",
    "clamp_max",
    "clamp_min",
    "backward",
    "zero_grad",
    "finite_difference_grad",
    "gradient_check",
    "GELU_C0",
    "GELU_C1",
]

# tanh-approximation constants for GELU (fixed so results are identical
# across builds; see gelu()).
GELU_C0 = 0.7978845608
GELU_C1 = 0.044715

_EPS_NORM = 1e-12  # minimum admissible Euclidean norm for normalization ops

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure-numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node of the computation graph.

    The graph itself is implicit: it is the set of tensors reachable from a
    loss through ``_parents`` links, in construction order (inputs always
    precede their consumers, so construction order is a topological order).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})\n{self.data!r}"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Create a result tensor, recording the tape edge when grads are live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul expects tensors of rank >= 2, got {a.ndim} and {b.ndim}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    a = _wrap(a)
    neg_part = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    mask = a.data > 0
    out = np.where(mask, a.data, neg_part)

    def vjp(g):
        return (g * np.where(mask, 1.0, neg_part + alpha),)

    return _make(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(c0·(x + c1·x³)))."""
    a = _wrap(a)
    x = a.data
    inner = GELU_C0 * (x + GELU_C1 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dx,)

    return _make(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    # stable: never exponentiates a positive argument
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + eˣ), computed without overflow."""
    a = _wrap(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * sig,))


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise smooth-L1: 0.5·x² for |x| < 1, |x| − 0.5 otherwise."""
    a = _wrap(a)
    x = a.data
    absx = np.abs(x)
    quad = absx < 1.0
    out = np.where(quad, 0.5 * x * x, absx - 0.5)

    def vjp(g):
        return (g * np.where(quad, x, np.sign(x)),)

    return _make(out, (a,), vjp)


def clamp_max(a: Tensor, cap: float) -> Tensor:
    """min(a, cap) with subgradient 0 where clamped."""
    a = _wrap(a)
    mask = a.data < cap
    out = np.where(mask, a.data, cap)
    return _make(out, (a,), lambda g: (g * mask,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) with subgradient 0 where clamped."""
    a = _wrap(a)
    mask = a.data > floor
    out = np.where(mask, a.data, floor)
    return _make(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# softmax / normalization family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Numerically stable softmax along ``axis`` at the given temperature."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    a = _wrap(a)
    z = a.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _make(out, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    soft = e / s

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis=axis)
        return (gk * soft,)

    return _make(out, (a,), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale rows (along ``axis``) to unit Euclidean norm.

    Rejects inputs whose norm falls below 1e-12 — a zero vector has no
    direction, and silently returning garbage would poison the cosine ops.
    """
    a = _wrap(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if np.any(n < _EPS_NORM):
        raise ValueError("l2_normalize: input norm below 1e-12")
    out = a.data / n

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - out * dot) / n,)

    return _make(out, (a,), vjp)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable affine."""
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    x = a.data
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = _unbroadcast(g * xhat, gamma.data.shape)
        gb = _unbroadcast(g, beta.data.shape)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - np.mean(gx_hat, axis=-1, keepdims=True)
            - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _make(out, (a, gamma, beta), vjp)


def batchnorm(
    a: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalization over axis 0 of an (N, C) input.

    Training mode normalizes by batch statistics and updates the running
    buffers in place (``running ← (1 − momentum)·running + momentum·batch``,
    unbiased variance in the buffer). Inference mode normalizes by the running
    statistics only and never mutates them. The denominator uses a variance
    floor of 1e-24 instead of an additive epsilon, so unit running statistics
    normalize exactly to the identity.
    """
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    x = a.data
    if x.ndim != 2:
        raise ValueError(f"batchnorm expects an (N, C) input, got shape {x.shape}")
    n = x.shape[0]
    if training:
        mu = np.mean(x, axis=0)
        xc = x - mu
        var = np.mean(xc * xc, axis=0)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
        xc = x - mu
    inv = 1.0 / np.sqrt(np.maximum(var, 1e-24))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = _unbroadcast(g * xhat, gamma.data.shape)
        gb = _unbroadcast(g, beta.data.shape)
        gx_hat = g * gamma.data
        if training:
            gx = inv * (
                gx_hat
                - np.mean(gx_hat, axis=0)
                - xhat * np.mean(gx_hat * xhat, axis=0)
            )
        else:
            gx = gx_hat * inv
        return gx, gg, gb

    return _make(out, (a, gamma, beta), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of two vectors (or row-wise for matching 2-D shapes)."""
    a, b = _wrap(a), _wrap(b)
    an = l2_normalize(a, axis=-1)
    bn = l2_normalize(b, axis=-1)
    return sum_(mul(an, bn), axis=-1)


# ---------------------------------------------------------------------------
# reductions and indexing
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis=axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis=axis)
        return (np.broadcast_to(gk / count, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(ts))
        )

    return _make(out, tuple(ts), vjp)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), vjp)


def gather(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Select rows/entries along ``axis``; the gradient scatter-adds back."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < -a.data.shape[axis] or idx.max() >= a.data.shape[axis]):
        raise IndexError(
            f"gather index out of range for axis {axis} of extent {a.data.shape[axis]}"
        )
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(ga, idx, g)
        else:
            ga_m = np.moveaxis(ga, axis, 0)
            np.add.at(ga_m, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, (a,), vjp)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter."""
    a = _wrap(a)
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _make(out, (a,), vjp)


def detach(a: Tensor) -> Tensor:
    """Cut the tape: same values, no gradient path."""
    a = _wrap(a)
    return Tensor(a.data, requires_grad=False)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate ∂loss/∂leaf into ``.grad`` of every requires_grad leaf.

    The loss must be a scalar. Each tape node's VJP runs exactly once (reverse
    topological order); afterwards the tape edges of the visited subgraph are
    released so intermediate buffers can be collected.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor with no gradient path")

    # iterative depth-first topological sort over parent links
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        else:
            # leaf: additive accumulation across backward calls
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad = node.grad + g
        node._parents = ()
        node._vjp = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# the finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`` per coordinate. This function is the
    acceptance oracle for every backward rule in the package: it evaluates
    ``f`` as a black box and never touches the tape.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"finite_difference_grad: non-finite f at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(
    build: Callable[[Tensor], Tensor],
    x0: np.ndarray,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> float:
    """Relative error between backward and the finite-difference oracle.

    ``build`` maps a leaf tensor to a scalar loss tensor. ``coords`` limits
    the finite-difference sweep to a flat-index subset (useful for the
    per-parameter audits over large tensors); the backward side is always the
    full gradient. The metric is the max-norm error relative to the gradient
    vector's scale, ‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, 1e-6): near-zero coordinates
    of a correct gradient sit at the oracle's own noise floor, so measuring
    them against themselves would reject every implementation.
    """
    x0 = np.array(x0, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    loss = build(leaf)
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    def f(arr: np.ndarray) -> float:
        with no_grad():
            return float(build(Tensor(arr)).data)

    if coords is None:
        numeric = finite_difference_grad(f, x0, h=h)
        a, b = analytic.reshape(-1), numeric.reshape(-1)
    else:
        coords = np.asarray(coords, dtype=np.intp)
        flat = x0.reshape(-1)
        num = np.zeros(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x0)
            flat[i] = orig - h
            fm = f(x0)
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * h)
        a, b = analytic.reshape(-1)[coords], num
    if a.size == 0:
        return 0.0
    # scale comes from the full analytic vector: a sampled subset may land
    # entirely on small coordinates and misstate the gradient's magnitude
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(b))), 1e-6)
    return float(np.max(np.abs(a - b))) / scale
