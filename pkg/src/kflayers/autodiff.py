"""Small numpy array engine with a dynamic reverse-mode tape.

Every operation on a :class:`Tensor` that requires gradients records its
parents and a closure computing the vector-Jacobian product.  ``backward``
replays the recorded graph in reverse topological order.  Only what the
layers and agent heads need is implemented; this is not a general
framework.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def has_nonfinite(self) -> bool:
        return not bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x))


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create a tape node.  ``backward_fn(g)`` returns one gradient per parent."""
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register an externally computed value with a hand-written VJP."""
    return _node(value, parents, backward_fn)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(np.where(pick_a, g, 0), a.shape),
                            unbroadcast(np.where(pick_a, 0, g), b.shape)))


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return _node(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(np.where(cond, g, 0), a.shape),
                            unbroadcast(np.where(cond, 0, g), b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


# -- elementwise unary --------------------------------------------------------

def neg(a) -> Tensor:
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def expm1(a) -> Tensor:
    a = _lift(a)
    return _node(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),))


def log(a) -> Tensor:
    a = _lift(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return -np.expm1(-softplus_np(x))


def softplus_np(x: np.ndarray) -> np.ndarray:
    """``log(1 + exp(x))`` without overflow (much faster than ``np.logaddexp``)."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    a = _lift(a)
    out = softplus_np(a.data)
    # d/dx softplus(x) = sigmoid(x) = 1 - exp(-softplus(x))
    return _node(out, (a,), lambda g: (g * -np.expm1(-out),))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),))


def square(a) -> Tensor:
    a = _lift(a)
    return _node(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2 * out),))


def reciprocal(a) -> Tensor:
    a = _lift(a)
    out = 1 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def relu(a) -> Tensor:
    a = _lift(a)
    out = np.maximum(a.data, 0)
    return _node(out, (a,), lambda g: (g * (out > 0),))


_UNARY = {
    "exp": exp, "log": log, "softplus": softplus, "tanh": tanh, "square": square,
    "reciprocal": reciprocal, "neg": neg, "relu": relu, "expm1": expm1, "sqrt": sqrt,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "minimum": minimum}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions of ``a`` act as a batch when ``b`` is 2-D."""
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large gemm instead of numpy's stacked loop
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data

    def bw(g):
        if flat:
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return unbroadcast(ga, a.shape), gb

    return _node(out, (a, b), bw)


# -- reductions and shape ops -------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d array")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``max`` over ``axis`` (all axes when None)."""
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        return _node(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),))
    if op == "mean":
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        out = a.data.mean(axis=axes, keepdims=keepdims)
        return _node(out, (a,),
                     lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, a.shape).copy(),))
    if op == "max":
        if a.data.size == 0:
            raise ShapeError("max of empty array")
        # move reduced axes last and flatten them so argmax picks the first maximiser
        keep = [i for i in range(a.ndim) if i not in axes]
        perm = keep + list(axes)
        moved = np.transpose(a.data, perm)
        flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kept_shape)

        def bw(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], np.asarray(g).reshape(arg.shape)[..., None], axis=-1)
            gmoved = gflat.reshape(moved.shape)
            return (np.transpose(gmoved, np.argsort(perm)),)

        return _node(out, (a,), bw)
    raise ContractError(f"unknown reduction {op!r}")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    out = a.data[idx]
    fancy = _is_fancy(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(out, (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, ts, bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _node(out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# -- tape replay ----------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires gradients.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            epsilon: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` re-evaluates a scalar loss from the current contents of ``params``.
    The relative error of an entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(f().data)
                flat[i] = orig - epsilon
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite loss while perturbing {p.name or 'param'}[{i}]")
                num = (fp - fm) / (2 * epsilon)
                denom = max(abs(an_flat[i]), abs(num), 1e-8)
                worst = max(worst, abs(an_flat[i] - num) / denom)
    return worst
