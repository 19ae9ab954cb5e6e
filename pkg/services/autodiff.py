"""Reverse-mode differentiation over numpy arrays.

Each primitive is a ``Function`` with a forward over raw arrays and a backward
returning one adjoint per parent. Broadcasting is limited to a trailing-shape
operand (bias rows, masks over a leading head axis, scalars).
"""

from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
import threading

import numpy as np


class ShapeError(ValueError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def no_grad():
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def precision(dtype):
    """Switch newly created tensors to ``dtype`` (float64 for gradient checks)"""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, ctx=None, name: Optional[str] = None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.ctx: Optional["Function"] = ctx
        self.name = name

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"<Tensor {self.name or ''}{list(self.shape)}{flag}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __neg__(self): return Neg.apply(self)
    def __add__(self, x): return Add.apply(self, _lift(x))
    def __radd__(self, x): return Add.apply(_lift(x), self)
    def __sub__(self, x): return Add.apply(self, Neg.apply(_lift(x)))
    def __rsub__(self, x): return Add.apply(_lift(x), Neg.apply(self))
    def __mul__(self, x): return Mul.apply(self, _lift(x))
    def __rmul__(self, x): return Mul.apply(_lift(x), self)
    def __truediv__(self, x): return Mul.apply(self, Pow.apply(_lift(x), exponent=-1.0))
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))
    def __matmul__(self, x): return MatMul.apply(self, x)
    def __getitem__(self, index): return take(self, index)

    def sum(self, axis=None): return Sum.apply(self, axis=axis)
    def mean(self, axis=None): return Mean.apply(self, axis=axis)
    def reshape(self, *shape): return Reshape.apply(self, shape=shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def log(self): return Log.apply(self)
    def exp(self): return Exp.apply(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _trailing_compatible(small: Tuple[int, ...], big: Tuple[int, ...]) -> bool:
    if len(small) > len(big):
        return False
    tail = big[len(big) - len(small):]
    return all(s == b or s == 1 for s, b in zip(small, tail))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A recorded primitive application; one node of the graph"""

    def __init__(self, *parents: Tensor, **kwargs):
        self.parents = parents
        self.kwargs = kwargs

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        fn = cls(*parents, **kwargs)
        out = fn.forward(*[p.data for p in parents])
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=track, ctx=fn if track else None)

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


class Add(Function):
    def forward(self, x, y):
        if not (_trailing_compatible(y.shape, x.shape) or _trailing_compatible(x.shape, y.shape)):
            raise ShapeError(f"add: incompatible shapes {x.shape} and {y.shape}")
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, x, y):
        if not (_trailing_compatible(y.shape, x.shape) or _trailing_compatible(x.shape, y.shape)):
            raise ShapeError(f"multiply: incompatible shapes {x.shape} and {y.shape}")
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Pow(Function):
    def forward(self, x):
        self.x = x
        return np.power(x, self.kwargs["exponent"])

    def backward(self, grad):
        e = self.kwargs["exponent"]
        return (grad * e * np.power(self.x, e - 1.0),)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim == 0 or b.ndim == 0:
            raise ShapeError("matmul needs at least 1-d operands")
        if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
            raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
        if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dimensions differ {a.shape} @ {b.shape}")
        if (a.ndim > 2) != (b.ndim > 2):
            raise ShapeError(f"matmul: batched operand paired with unbatched {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        if a.ndim == 1 and b.ndim == 1:
            return grad * b, grad * a
        if a.ndim == 1:
            return b @ grad, np.outer(a, grad)
        if b.ndim == 1:
            return np.outer(grad, b), a.T @ grad
        return np.matmul(grad, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), grad)


class Transpose(Function):
    def forward(self, x):
        axes = self.kwargs["axes"]
        self.axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.kwargs["shape"])

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sum(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return np.sum(x, axis=self.kwargs["axis"])

    def backward(self, grad):
        axis = self.kwargs["axis"]
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    def forward(self, x):
        self.in_shape = x.shape
        axis = self.kwargs["axis"]
        self.count = x.size if axis is None else x.shape[axis]
        return np.mean(x, axis=axis)

    def backward(self, grad):
        axis = self.kwargs["axis"]
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


class Softmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=-1, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: gain/bias {gamma.shape} do not match features {x.shape[-1:]}")
        eps = self.kwargs["eps"]
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        n = self.xhat.shape[-1]
        g = grad * self.gamma
        dx = self.inv / n * (n * g - g.sum(axis=-1, keepdims=True) - self.xhat * (g * self.xhat).sum(axis=-1, keepdims=True))
        dgamma = _unbroadcast(grad * self.xhat, self.gamma.shape)
        dbeta = _unbroadcast(grad, self.gamma.shape)
        return dx, dgamma, dbeta


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Take(Function):
    """Gather or slice; the adjoint scatter-adds into the source shape"""

    def forward(self, x):
        self.in_shape = x.shape
        self.dtype = x.dtype
        return x[self.kwargs["index"]]

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(out, self.kwargs["index"], grad)
        return (out,)


class Concat(Function):
    def forward(self, *xs):
        axis = self.kwargs["axis"]
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)):
                raise ShapeError(f"concat: shape {x.shape} incompatible with {ref} on axis {axis}")
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.kwargs["axis"]))


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------

def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad, name=name)


def add(a, b) -> Tensor: return _lift(a) + b
def multiply(a, b) -> Tensor: return _lift(a) * b
def matmul(a: Tensor, b: Tensor) -> Tensor: return MatMul.apply(a, b)
def transpose(x: Tensor, axes=None) -> Tensor: return Transpose.apply(x, axes=axes)
def softmax(x: Tensor) -> Tensor: return Softmax.apply(x)
def log_softmax(x: Tensor) -> Tensor: return LogSoftmax.apply(x)
def gelu(x: Tensor) -> Tensor: return Gelu.apply(x)
def relu(x: Tensor) -> Tensor: return Relu.apply(x)
def log(x: Tensor) -> Tensor: return Log.apply(x)
def exp(x: Tensor) -> Tensor: return Exp.apply(x)
def power(x: Tensor, exponent: float) -> Tensor: return Pow.apply(x, exponent=float(exponent))
def mean(x: Tensor, axis=None) -> Tensor: return Mean.apply(x, axis=axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def take(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise ShapeError("take: index must be an integer array or slice, not a Tensor")
    return Take.apply(x, index=index)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {weight.shape[0]})")
    return Take.apply(weight, index=ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

class Graph:
    """Topologically ordered nodes reachable from one root"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.ctx is not None:
                for parent in node.ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad``; returns the leaf gradients of this pass"""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    graph = Graph.trace(loss)
    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}

    for node in reversed(graph.nodes):
        grad = adjoints.pop(id(node), None)
        if grad is None:
            continue
        if node.ctx is None:
            leaves[node] = grad
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, g in zip(node.ctx.parents, node.ctx.backward(grad)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = g if key not in adjoints else adjoints[key] + g
    return leaves


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    floor: float = 1e-8,
    richardson: bool = False,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max over elements of |analytic - numeric| / max(|analytic|, |numeric|, floor)

    ``richardson`` combines steps ``eps`` and ``eps / 2`` so the numeric estimate
    is accurate to O(eps**4). ``max_elements`` checks a seeded subset of each tensor.
    """
    zero_grad(params)
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def central(flat: np.ndarray, i: int, h: float) -> float:
        original = flat[i]
        flat[i] = original + h
        plus = float(f().data)
        flat[i] = original - h
        minus = float(f().data)
        flat[i] = original
        return (plus - minus) / (2.0 * h)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            indices = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            for i in indices:
                numeric = central(flat, i, eps)
                if richardson:
                    numeric = (4.0 * central(flat, i, eps / 2.0) - numeric) / 3.0
                analytic_i = float(a.reshape(-1)[i])
                err = abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric), floor)
                worst = max(worst, err)
    zero_grad(params)
    return worst
