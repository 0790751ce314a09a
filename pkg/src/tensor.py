"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a NumPy array. Every differentiable op returns a new
``Tensor`` that remembers its parents and a backward rule; ``backward``
walks the resulting graph in reverse topological order and returns the
gradients of a scalar loss with respect to the requested leaves.

``stop_gradient`` returns a forward-identical tensor with no parents, so
anything upstream of it receives exactly zero gradient.

Leaves are never mutated by ``backward`` (gradients are returned, not
stored), so a ``ParamSet`` can be shared read-only between client threads.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from src.errors import ParamError, ShapeError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    def __init__(self, data: Any, requires_grad: bool = False, *, name: str | None = None) -> None:
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._rule: BackwardRule | None = None

    # -------------------------- introspection -------------------------- #

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._rule is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype}{label})"

    # --------------------------- operators ----------------------------- #

    def __add__(self, other: Any) -> Tensor:
        return add(self, _lift(other, self))

    def __radd__(self, other: Any) -> Tensor:
        return add(_lift(other, self), self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, _lift(other, self))

    def __rsub__(self, other: Any) -> Tensor:
        return sub(_lift(other, self), self)

    def __mul__(self, other: Any) -> Tensor:
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    def __rmul__(self, other: Any) -> Tensor:
        return self.__mul__(other)

    def __truediv__(self, other: float) -> Tensor:
        if not isinstance(other, (int, float)):
            raise TypeError("Tensor division is only defined for python scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def square(self) -> Tensor:
        return square(self)

    def relu(self) -> Tensor:
        return relu(self)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._rule = rule
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes NumPy broadcasting added or stretched to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# ----------------------------- elementwise ----------------------------- #

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return _node("mul", a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    return _node("scale", a.data * np.asarray(factor, dtype=a.dtype), (a,), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    return _node("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _node("log", out, (a,), lambda g: (g / a.data,))


# ------------------------------ linear algebra ------------------------- #

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected a matrix")
    return _node("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


# -------------------------------- reductions --------------------------- #

def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", np.asarray(out), (a,), rule)


def reduce_mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    total = reduce_sum(a, axis=axis, keepdims=keepdims)
    count = a.data.size // max(total.data.size, 1)
    out = scale(total, 1.0 / count)
    out.op = "mean"
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax(a.data, axis=axis)
    return _node("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(a.data, axis=axis)
    probs = np.exp(out)
    return _node("log_softmax", out, (a,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def stop_gradient(t: Tensor) -> Tensor:
    """Forward identity whose backward contributes nothing to ``t``'s ancestors."""
    out = Tensor(t.data, requires_grad=False)
    out.op = "stop_gradient"
    return out


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "square": square,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "stop_gradient": stop_gradient,
}


def forward_op(kind: str, *inputs: Tensor, **attrs: Any) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"Unknown op kind: {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------- graph ------------------------------- #

@dataclass(frozen=True)
class Graph:
    """Operation records reachable from an output, inputs before consumers."""

    nodes: tuple[Tensor, ...]

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(tuple(order))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(
    loss: Tensor,
    wrt: Mapping[str, Tensor] | Sequence[Tensor],
) -> dict[str, np.ndarray] | list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``wrt``.

    Returns a dict keyed like ``wrt`` when it is a mapping (a ``ParamSet``),
    otherwise a list in the same order. Leaves the loss does not reach get an
    all-zero gradient of their own shape.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")

    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._rule is None:
            continue
        for parent, parent_grad in zip(node._parents, node._rule(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def grad_of(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return np.asarray(g, dtype=t.dtype).reshape(t.shape)

    if isinstance(wrt, Mapping):
        return {name: grad_of(t) for name, t in wrt.items()}
    return [grad_of(t) for t in wrt]


# -------------------------------- parameters ----------------------------- #

class ParamSet(Mapping[str, Tensor]):
    """Named, insertion-ordered, read-only collection of parameter tensors."""

    def __init__(self, values: Mapping[str, Tensor | np.ndarray], copy: bool = True) -> None:
        self._tensors: dict[str, Tensor] = {}
        for name, value in values.items():
            raw = value.data if isinstance(value, Tensor) else value
            arr = np.array(raw, copy=True) if copy else np.asarray(raw)
            if arr.dtype not in FLOAT_DTYPES:
                arr = arr.astype(np.float64)
            arr.setflags(write=False)
            self._tensors[name] = Tensor(arr, requires_grad=True, name=name)
        self._constant: ParamSet | None = None

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> ParamSet:
        return cls(arrays, copy=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.num_parameters} values)"

    @property
    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    @property
    def nbytes(self) -> int:
        return int(sum(t.data.nbytes for t in self._tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def copy(self) -> ParamSet:
        return ParamSet(self.arrays(), copy=True)

    def constant(self) -> ParamSet:
        """View whose tensors do not record graphs (inference)."""
        if self._constant is None:
            view = ParamSet(self.arrays(), copy=False)
            for t in view._tensors.values():
                t.requires_grad = False
            self._constant = view
        return self._constant

    def astype(self, dtype: np.dtype | type) -> ParamSet:
        return ParamSet({k: v.astype(dtype) for k, v in self.arrays().items()}, copy=False)

    def check_compatible(self, other: Mapping[str, Any], op: str) -> None:
        mine, theirs = set(self._tensors), set(other)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ParamError(f"{op}: key mismatch (missing={missing}, unexpected={extra})")
        for name, t in self._tensors.items():
            value = other[name]
            shape = value.shape if hasattr(value, "shape") else np.shape(value)
            if tuple(shape) != t.shape:
                raise ShapeError(op, t.shape, tuple(shape), detail=f"parameter {name!r}")

    def allclose(self, other: ParamSet, atol: float = 0.0) -> bool:
        if set(self) != set(other):
            return False
        return all(np.allclose(self[k].data, other[k].data, rtol=0.0, atol=atol) for k in self)


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """One plain gradient-descent update ``p - lr * g`` per parameter."""
    if lr < 0:
        raise ValueError(f"sgd_step: learning rate must be non-negative, got {lr}")
    params.check_compatible(grads, "sgd_step")
    updated = {
        name: (t.data - lr * np.asarray(grads[name])).astype(t.dtype, copy=False)
        for name, t in params.items()
    }
    return ParamSet(updated, copy=False)
