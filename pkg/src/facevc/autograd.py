"""A small reverse-mode autodiff engine on top of numpy.

Every value flowing through the network is a :class:`Tensor`.  Operations
record their parents and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` walks the graph in reverse topological order.

Arrays are float32 unless the caller hands in something wider, in which case
numpy's promotion rules decide (``grad_check`` relies on this to run the
finite-difference comparison in float64).
"""

from __future__ import annotations

import contextlib
import math
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .exceptions import DimensionError, NumericError, ValidationError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, FD probes)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if data.dtype.kind != "f":
            return data.astype(DEFAULT_DTYPE)
        return data
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- backward -------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if not self.requires_grad:
            raise ValidationError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValidationError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE) if not isinstance(x, np.ndarray) else x)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor's dtype instead of forcing float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return _t(a), _t(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _t(a)
    ad = a.data
    return Tensor._make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _t(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient flows where ``a > floor``."""
    a = _t(a)
    mask = a.data > floor
    return Tensor._make(np.where(mask, a.data, np.asarray(floor, a.dtype)), (a,), lambda g: (g * mask,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    a = _t(a)
    mask = (a.data >= low) & (a.data <= high)
    out = np.clip(a.data, low, high).astype(a.dtype, copy=False)
    return Tensor._make(out, (a,), lambda g: (g * mask,))


def detach(a: Tensor) -> Tensor:
    return _t(a).detach()


def straight_through(a: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value`` exactly; pass the incoming gradient to ``a`` unchanged."""
    a = _t(a)
    if value.shape != a.shape:
        raise DimensionError(f"straight-through value {value.shape} != input {a.shape}")
    return Tensor._make(value.astype(a.dtype, copy=True), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _t(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = _t(a)
    return Tensor._make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return Tensor._make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(lo, hi)
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return Tensor._make(out, tensors, backward)


def getitem(a: Tensor, index) -> Tensor:
    a = _t(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype if g.dtype.itemsize >= dtype.itemsize else dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), backward)


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table; ``indices`` may have any shape."""
    indices = np.asarray(indices, dtype=np.int64)
    return getitem(table, indices)


# ---------------------------------------------------------------------------
# linear algebra and normalisers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(out, (a, b), backward)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what}: input contains NaN or infinite values")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _t(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _t(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True))
    return x / norm


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """``softmax(q kᵀ / sqrt(d_k)) v`` over the last two axes."""
    q, k, v = _t(q), _t(k), _t(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy against one-hot ``targets`` [N×C]."""
    logits = _t(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    ones = np.isclose(t, 1.0)
    if not (np.all(ones | (t == 0)) and np.all(ones.sum(axis=-1) == 1)):
        raise ValidationError("every target row must be one-hot")
    n = logits.shape[0]
    picked = tsum(log_softmax(logits, axis=-1) * Tensor(t.astype(logits.dtype)))
    return picked * (-1.0 / n)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=DEFAULT_DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# modules and parameters
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(DEFAULT_DTYPE)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True)


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes.

    Registration order is attribute assignment order, so iteration is stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = parameter(glorot_uniform(rng, in_features, out_features))
        self.bias = parameter(np.zeros(out_features))

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        x = _t(x)
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last dim {self.in_features}, got shape {x.shape}")
        return matmul(x, self.weight) + self.bias


class ParameterRegistry:
    """Ordered, duplicate-free name → parameter map."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._ids: set[int] = set()
        for name, param in items:
            self.register(name, param)

    @classmethod
    def from_module(cls, module: Module, prefix: str = "") -> "ParameterRegistry":
        return cls(module.named_parameters(prefix))

    def register(self, name: str, param: Tensor) -> None:
        if name in self._params:
            raise ValidationError(f"parameter name {name!r} registered twice")
        if id(param) in self._ids:
            raise ValidationError(f"parameter object for {name!r} is already registered under another name")
        if not param.requires_grad:
            raise ValidationError(f"parameter {name!r} does not require grad")
        self._params[name] = param
        self._ids.add(id(param))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def num_elements(self) -> int:
        return sum(p.size for p in self._params.values())


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class SGD:
    """SGD with classical (heavy-ball) momentum."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(p.dtype, copy=False)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self._t += 1
        c1 = 1.0 - self.b1 ** self._t
        c2 = 1.0 - self.b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params,
    eps: float = 1e-4,
    max_elements: int = 10_000,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is re-evaluated with each parameter element nudged by ``±eps``.
    Parameters are temporarily cast to ``dtype`` and restored afterwards; in
    float32 the differencing noise alone exceeds 1e-3 on small gradient
    entries, hence the float64 default.  Stop-gradient terms are invisible
    to finite differences, so check them in isolation.  When the registry holds more
    than ``max_elements`` scalars a seeded random subset is probed.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValidationError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    if isinstance(params, ParameterRegistry):
        tensors = list(params.values())
    elif isinstance(params, Module):
        tensors = params.parameters()
    else:
        tensors = list(params)
    originals = [p.data for p in tensors]
    try:
        for p in tensors:
            p.data = p.data.astype(dtype)
            p.grad = None
        loss = f()
        _require_finite_scalar(loss)
        loss.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in tensors]

        slots = [(ti, flat) for ti, p in enumerate(tensors) for flat in range(p.size)]
        if len(slots) > max_elements:
            rng = np.random.default_rng(seed)
            chosen = rng.choice(len(slots), size=max_elements, replace=False)
            slots = [slots[i] for i in np.sort(chosen)]

        worst = 0.0
        with no_grad():
            for ti, flat in slots:
                view = tensors[ti].data.reshape(-1)
                saved = view[flat]
                view[flat] = saved + eps
                f_plus = _require_finite_scalar(f())
                view[flat] = saved - eps
                f_minus = _require_finite_scalar(f())
                view[flat] = saved
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = float(analytic[ti].reshape(-1)[flat])
                denom = max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
        return worst
    finally:
        for p, data in zip(tensors, originals):
            p.data = data
            p.grad = None


def _require_finite_scalar(value: Tensor) -> float:
    scalar = float(np.asarray(value.data if isinstance(value, Tensor) else value).reshape(-1)[0])
    if not math.isfinite(scalar):
        raise NumericError("objective evaluated to a non-finite value during gradient check")
    return scalar
