"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors hold a C-contiguous ``numpy.float64`` array. Operations executed while
a :class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor with ``requires_grad`` append a node to that tape. Outside any tape the
same operations run without recording, which is how evaluation avoids graph
overhead.

Broadcasting rule for binary ops: the shapes must be equal, or one operand
must broadcast (numpy rules, right-aligned) to exactly the other operand's
shape. Two-sided broadcasting such as ``(3, 1) + (1, 4)`` is rejected.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, GradientCheckError

_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order of the
    forward computation; :meth:`backward` walks them once in reverse.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape exited out of order")
        stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        """Populate ``.grad`` of every leaf tensor with ``requires_grad``.

        Gradients accumulate into existing ``.grad`` arrays, so call
        :func:`zero_grad` between independent backward passes.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: "Tensor", tape: Tape) -> None:
    tape.backward(loss)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


class Tensor:
    """A dense float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, order="C", copy=True)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

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


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def make_result(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` and record a node if any input needs a gradient under an active tape.

    Public so that fused kernels in other modules can register their own
    backward rules.
    """
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        node = Node(op, tuple(inputs), t, backward_fn)
        t._node = node
        tape.record(node)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        out = None
    if out is None or (out != a and out != b):
        raise DimensionError(f"{op}: cannot broadcast shapes {a} and {b}")
    return out


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result("div", out, (a, b), bw)


# elementwise unary ops

def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = ~(a.data > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"log of non-positive value {a.data[idx]!r} at index {idx}")
    ad = a.data
    return make_result("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``op`` is one of add, sub, mul, div, exp, log, neg, sqrt, scale.

    For ``scale`` the second argument is the constant.
    """
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "neg": neg, "sqrt": sqrt}
    if op in binary:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    if op == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


# linear algebra

def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]``; ``b`` may also be a shared 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), bw)


# reductions

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce(op: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max along ``axis`` (all axes when ``None``).

    The max gradient goes entirely to the first maximal entry along the axis.
    """
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    if op == "sum":
        out = a.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            if ax is not None and not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)

    elif op == "mean":
        n = a.data.size if ax is None else shape[ax]
        out = a.data.mean(axis=ax, keepdims=keepdims)

        def bw(g):
            if ax is not None and not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g / n, shape).copy(),)

    elif op == "max":
        if a.data.size == 0:
            raise DimensionError("max over an empty axis")
        if ax is None:
            flat = int(np.argmax(a.data))
            out = a.data.reshape(-1)[flat]
            if keepdims:
                out = np.reshape(out, (1,) * a.ndim)

            def bw(g):
                gi = np.zeros(a.data.size)
                gi[flat] = np.asarray(g).reshape(-1)[0]
                return (gi.reshape(shape),)
        else:
            idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
            out = np.take_along_axis(a.data, idx, ax)
            if not keepdims:
                out = np.squeeze(out, ax)

            def bw(g):
                if not keepdims:
                    g = np.expand_dims(g, ax)
                gi = np.zeros(shape)
                np.put_along_axis(gi, idx, g, ax)
                return (gi,)
    else:
        raise ContractError(f"unknown reduction {op!r}")
    return make_result(op, np.asarray(out, dtype=np.float64), (a,), bw)


# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    src = a.shape
    return make_result("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; ``None`` swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),))


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise DimensionError(f"take indices out of range for axis of length {a.shape[ax]}")
    shape = a.shape

    def bw(g):
        gi = np.zeros(shape)
        np.add.at(gi, (slice(None),) * ax + (idx,), g)
        return (gi,)

    return make_result("take", np.take(a.data, idx, axis=ax), (a,), bw)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    return make_result("where", out, (a, b),
                       lambda g: (_unbroadcast(np.where(m, g, 0.0), a.shape),
                                  _unbroadcast(np.where(m, 0.0, g), b.shape)))


# gradient checking

def finite_diff_check(f: Callable, x, h: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f(x)`` must return a scalar
    tensor. Every coordinate of every tensor is perturbed in place (and
    restored). Error per coordinate is ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        if not np.all(np.isfinite(loss.data)):
            raise GradientCheckError("non-finite loss at the unperturbed point")
        tape.backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            ana = analytic[ti].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                xp = flat[i]
                fp = f(x).item()
                flat[i] = orig - h
                xm = flat[i]
                fm = f(x).item()
                flat[i] = orig
                # divide by the step actually representable, not 2h
                num = (fp - fm) / (xp - xm)
                if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(ana[i])):
                    raise GradientCheckError(
                        f"non-finite value at tensor {ti} coordinate {i}")
                err = abs(ana[i] - num) / (abs(num) + 1e-12)
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(xs, saved_flags):
            t.requires_grad = flag
            t.grad = None
