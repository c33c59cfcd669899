"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a new :class:`Tensor` holding references to its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the graph in reverse topological order.  Tensors are never mutated in place,
so a graph can be differentiated as long as it is alive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import DimensionError, EvaluationError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise EvaluationError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- differentiation ----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward without seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

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


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b),
                           lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, (a, b),
                           lambda g: (_unbroadcast(g / bd, ad.shape),
                                      _unbroadcast(-g * out / bd, bd.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; ``expit`` is stable for arbitrarily large ``|x|``."""
    x = as_tensor(x)
    out = expit(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._from_op(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero where the bound is active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def stop_gradient(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.name = None
    return out


# -- reductions and shape ops -------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(x.data[index], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


# -- linear algebra -----------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes (leading axes must match exactly)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b),
                           lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply an affine map."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gamma.data

    def back(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), back)


# -- losses -------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def smooth_l1_loss(pred: Tensor, target: ArrayLike, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta/2`` outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    target = as_tensor(target)
    _check_same_shape(pred, target, "smooth_l1_loss")
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    value = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta).mean()
    dd = np.where(quad, d / beta, np.sign(d)) / d.size

    return Tensor._from_op(np.asarray(value), (pred, target), lambda g: (g * dd, -g * dd))


BCE_EPS = 1e-7


def binary_cross_entropy_loss(prob: Tensor, target: ArrayLike, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped into ``[eps, 1 - eps]``."""
    target = as_tensor(target)
    _check_same_shape(prob, target, "binary_cross_entropy_loss")
    p = clamp(prob, eps, 1.0 - eps)
    t = target.data
    pd = p.data
    value = -(t * np.log(pd) + (1.0 - t) * np.log1p(-pd)).mean()
    n = pd.size

    def back(g):
        return (g * (-(t / pd) + (1.0 - t) / (1.0 - pd)) / n, None)

    return Tensor._from_op(np.asarray(value), (p, target), back)


# -- gradient verification ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    coordinates: int
    worst: str = ""
    skipped: list[str] = field(default_factory=list)  # probes that straddle a kink
    analytic: dict = field(default_factory=dict, repr=False)
    numeric: dict = field(default_factory=dict, repr=False)


def finite_difference_check(
    f: Callable,
    x: Tensor | Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-6,
    abs_floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    nonsmooth: bool = False,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(x)`` to central differences.

    ``x`` is a single tensor or a mapping of named tensors (``f`` receives the
    same structure).  The per-coordinate error is ``|a - n| / max(|a|, |n|, abs_floor)``,
    so gradients smaller than ``abs_floor`` are compared absolutely.  With
    ``max_coords`` a random subset of coordinates per tensor is checked.

    For piecewise-smooth ``f`` (ReLU networks) pass ``nonsmooth=True``: a failing
    coordinate is probed again at ``step / 10``, and if it still fails while its
    two one-sided differences disagree by more than half their size, the probe
    straddles a kink.  Such coordinates are listed in ``skipped`` instead of
    failing; smooth coordinates with a wrong gradient are never skipped because
    their one-sided differences agree.
    """
    single = isinstance(x, Tensor)
    named: dict[str, Tensor] = {"x": x} if single else dict(x)
    leaves = {k: Tensor(v.data, requires_grad=True) for k, v in named.items()}

    def call(values: Mapping[str, Tensor]) -> Tensor:
        return f(values["x"]) if single else f(dict(values))

    out = call(leaves)
    if out.size != 1 or not np.isfinite(out.data).all():
        raise EvaluationError("finite_difference_check needs a finite scalar f(x)")
    out.backward()

    rng = rng if rng is not None else np.random.default_rng(0)
    base = float(out.data.reshape(-1)[0])
    worst_err, worst_at, count, skipped = 0.0, "", 0, []
    analytic_all, numeric_all = {}, {}
    for key, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.full(flat.size, np.nan)

        def probe_at(i: int, delta: float) -> float:
            bumped = flat.copy()
            bumped[i] += delta
            probe = dict(leaves)
            probe[key] = Tensor(bumped.reshape(leaf.shape))
            fv = call(probe).data
            if not np.isfinite(fv).all():
                raise EvaluationError(f"f is not finite near {key}[{i}]")
            return float(fv.reshape(-1)[0])

        for i in coords:
            a = float(analytic.reshape(-1)[i])
            numeric[i] = (probe_at(i, step) - probe_at(i, -step)) / (2.0 * step)
            err = abs(a - numeric[i]) / max(abs(a), abs(numeric[i]), abs_floor)
            if nonsmooth and err > tolerance:
                h = step / 10.0
                up, down = probe_at(i, h), probe_at(i, -h)
                numeric[i] = (up - down) / (2.0 * h)
                err = abs(a - numeric[i]) / max(abs(a), abs(numeric[i]), abs_floor)
                fwd, bwd = (up - base) / h, (base - down) / h
                if err > tolerance and abs(fwd - bwd) > 0.5 * max(abs(fwd), abs(bwd), abs_floor):
                    skipped.append(f"{key}[{i}]")
                    continue
            count += 1
            if err > worst_err:
                worst_err, worst_at = err, f"{key}[{i}]"
        analytic_all[key] = analytic
        numeric_all[key] = numeric.reshape(leaf.shape)
    return GradCheckReport(worst_err, worst_err <= tolerance, tolerance, count, worst_at,
                           skipped, analytic_all, numeric_all)
