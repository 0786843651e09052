"""Small reverse-mode automatic differentiation engine on top of numpy.

Every primitive builds an output ``Tensor`` that remembers its parents and a
closure mapping the output adjoint to parent adjoints.  ``backward`` orders
the recorded graph topologically (the tape), replays the adjoints in reverse
and accumulates into the ``grad`` field of every leaf that requires it.  The
graph is discarded afterwards; there are no higher-order derivatives.

Computation runs in float32 by default.  ``precision(np.float64)`` switches
the dtype of tensors created inside the block, which the finite-difference
oracle uses.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, EvaluationError, ShapeError

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "EvaluationError",
    "tensor",
    "no_grad",
    "precision",
    "custom_op",
    "matmul",
    "layer_norm",
    "softmax_rows",
    "log_softmax_rows",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "concat",
    "gather_rows",
    "broadcast_to",
    "flip_adjoint",
    "backward",
    "gradient_errors",
    "check_gradient",
]


_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def precision(dtype):
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; outputs are constants."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise EvaluationError(f"non-finite values in tensor {self.name or ''} {self.shape}")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other)))

    def __rsub__(self, other):
        return _add(_lift(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return _mul(self, _reciprocal(other))

    def __rtruediv__(self, other):
        return _mul(_lift(other), _reciprocal(self))

    def __pow__(self, exponent: float):
        return _pow(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in _axes(axis)])
        return _sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return _transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))

    @property
    def T(self):
        return self.transpose()


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axes(axis) -> tuple[int, ...]:
    return tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)


def custom_op(out: np.ndarray, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Wrap ``out`` as the result of a differentiable op.

    ``adjoint(g)`` receives the output adjoint and returns one gradient (or
    ``None``) per parent, shaped like that parent.
    """
    result = Tensor(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = adjoint
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise primitives -------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return custom_op(out, (a,), lambda g: (-g * out * out,))


def _pow(a: Tensor, k: float) -> Tensor:
    return custom_op(a.data**k, (a,), lambda g: (g * k * a.data ** (k - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return custom_op(np.maximum(a.data, floor).astype(a.data.dtype), (a,), lambda g: (g * keep,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
    out = (d * cdf).astype(d.dtype)
    return custom_op(out, (x,), lambda g: ((g * (cdf + d * pdf)).astype(d.dtype),))


def flip_adjoint(x: Tensor) -> Tensor:
    """Identity forward, negated adjoint.  Used to inject faults in tests."""
    return custom_op(x.data.copy(), (x,), lambda g: (-g,))


# -- reductions and shape ops -----------------------------------------------

def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def adjoint(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in _axes(axis)))
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return custom_op(np.asarray(out, dtype=a.data.dtype), (a,), adjoint)


def _reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return custom_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _getitem(a: Tensor, index) -> Tensor:
    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), adjoint)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return custom_op(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),)
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(out, parts, adjoint)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis -2 per batch entry.

    ``x`` is ``[..., T, D]`` and ``index`` is an integer array ``[..., K]``
    with matching leading dims; the result is ``[..., K, D]``.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather index dims {list(index.shape)} do not match tensor dims {x.dims}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-2]):
        raise ContractError(f"gather index out of range for {x.shape[-2]} rows")
    idx = index[..., None]
    out = np.take_along_axis(x.data, idx, axis=-2)

    def adjoint(g):
        full = np.zeros_like(x.data)
        lead = np.indices(index.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, index), g)
        return (full,)

    return custom_op(out, (x,), adjoint)


# -- linear algebra and fused layers ----------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.dims} @ {b.dims}")
    out = a.data @ b.data

    def adjoint(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(out, (a, b), adjoint)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm width {d} does not match gain {gain.dims} / bias {bias.dims}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def adjoint(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op(out, (x, gain, bias), adjoint)


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return custom_op(out, (x,), adjoint)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def adjoint(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return custom_op(out, (x,), adjoint)


# -- reverse pass -----------------------------------------------------------

def _tape(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring it.

    Calling again without ``zero_grad`` adds to the existing gradients.  The
    graph behind ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    order = _tape(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


def gradient_errors(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray | Tensor,
    step: float = 1e-5,
    dtype=np.float64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-coordinate relative error between taped and central-difference gradients.

    Returns ``(errors, analytic, numeric)``, each shaped like ``point``.  Both
    routes run in ``dtype``; the denominator is
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with precision(dtype):
        x = Tensor(base, requires_grad=True)
        out = f(x)
        if not np.all(np.isfinite(out.data)):
            raise EvaluationError("function value is not finite at the base point")
        backward(out)
        analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)

        def value(arr):
            with no_grad():
                v = f(Tensor(arr)).data
            if not np.all(np.isfinite(v)):
                raise EvaluationError("function value is not finite during differencing")
            return float(v.reshape(-1)[0])

        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value(base)
            flat[i] = orig - step
            down = value(base)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom, analytic, numeric


def check_gradient(
    f: Callable[[Tensor], Tensor],
    point: np.ndarray | Tensor,
    step: float = 1e-5,
    dtype=np.float64,
) -> float:
    """Worst relative error of the taped gradient of scalar ``f`` against central differences."""
    errors, _, _ = gradient_errors(f, point, step, dtype)
    return float(errors.max()) if errors.size else 0.0
