"""Dense tensors with tape-based reverse-mode autodiff, Adam, gradient checks.

Array storage and the elementwise kernels are numpy; the graph, the
backward rules and the optimizer live here. Every op records its parents and
a closure that maps the output gradient to parent gradients. ``backward``
walks the graph in reverse topological order and accumulates into leaf
``Parameter.grad`` buffers; clearing those is left to the caller.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, NumericError

_DTYPES = {"float64": np.float64, "float32": np.float32}
_precision = "float32"


def set_precision(name: str) -> None:
    """Select the global float width: ``"float64"`` (tests) or ``"float32"``."""
    global _precision
    if name not in _DTYPES:
        raise ArgumentError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str):
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, _parents: tuple = (), _backward: Callable | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = None

    # -- inspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # -- graph ------------------------------------------------------------
    def _topo(self) -> list:
        order, seen = [], set()
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor; leaf gradients accumulate."""
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite value at backward() root")
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ArgumentError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named, trainable leaf. ``grad`` has the value's shape once populated."""

    __slots__ = ()

    def __init__(self, name: str, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or get_dtype(), copy=True))
        self.name = name

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x, like: Tensor) -> np.ndarray:
    return np.asarray(x, dtype=like.data.dtype)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return Tensor(a.data + c, (a,), lambda g: (_unbroadcast(g, a.shape),), dtype=a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        dtype=a.dtype,
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,), dtype=a.dtype)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = _const(b, a)
        return Tensor(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), dtype=a.dtype)
    ad, bd = a.data, b.data
    return Tensor(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        dtype=a.dtype,
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes; leading axes follow numpy rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ArgumentError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ArgumentError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor(ad @ bd, (a, b), back, dtype=a.dtype)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,), dtype=a.dtype)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), dtype=a.dtype)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), dtype=a.dtype)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back,
                  dtype=tensors[0].dtype)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor(a.data[index], (a,), back, dtype=a.dtype)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, dtype=a.dtype)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` is any integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ArgumentError(f"embedding id out of range [0, {table.shape[0]})")
    return getitem(table, ids)


# ---------------------------------------------------------------------------
# Fused ops with analytic backward
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor(y, (x,), back, dtype=x.dtype)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ArgumentError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor(xhat * gd + bias.data, (x, gain, bias), back, dtype=x.dtype)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ArgumentError("cannot L2-normalize a zero vector")
    y = x.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor(y, (x,), back, dtype=x.dtype)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` means evaluation mode (identity)."""
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activations in {what}")
    return t


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Iterable[Parameter]) -> AdamState:
    """One bias-corrected Adam update in place. Gradients are left untouched."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ArgumentError(f"parameter {p.name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
    return state


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of |analytic - central difference| / max(1, |analytic|).

    ``f`` is re-evaluated from scratch for each perturbation, so it must be
    deterministic (no dropout). When ``n_samples`` is given, that many
    coordinates are drawn without replacement across all parameters.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ArgumentError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ArgumentError(f"gradient check needs float64 parameters; {p.name!r} is {p.data.dtype}")

    def value() -> float:
        out = f()
        if out.data.size != 1:
            raise ArgumentError(f"gradient check needs a scalar loss, got shape {out.shape}")
        v = float(out.data.reshape(()))
        if not math.isfinite(v):
            raise NumericError("non-finite loss in gradient check")
        return v

    zero_grads(params)
    loss = f()
    value_check = loss.data.reshape(-1)
    if value_check.size != 1:
        raise ArgumentError(f"gradient check needs a scalar loss, got shape {loss.shape}")
    if not math.isfinite(float(value_check[0])):
        raise NumericError("non-finite loss in gradient check")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    coords = [(k, j) for k, p in enumerate(params) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for k, j in coords:
        flat = params[k].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = value()
        flat[j] = orig - eps
        down = value()
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        a = float(analytic[k].reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
