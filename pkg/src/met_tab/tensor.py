"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed inside an active :class:`Graph` are appended to its tape
together with an adjoint rule; :meth:`Graph.backward` replays the tape in
reverse. Outside a graph the same operations run as plain numpy and record
nothing, which is what inference uses.

    >>> with Graph() as g:
    ...     x = Tensor([3.0], requires_grad=True)
    ...     y = sum_(square(x))
    >>> g.backward(y)[x]
    array([6.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
LAYERNORM_EPS = 1e-5

_node_ids = itertools.count()
_state = threading.local()


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class Tensor:
    """Dense float64 array that may participate in a differentiation graph."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "_from_op", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.array(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self._from_op

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar for tests and small scripts
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One primitive application on the tape."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Tape of primitive applications, in execution (topological) order.

    Use as a context manager; a fresh graph is meant to live for one
    forward/backward pass.
    """

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec: Record) -> None:
        self.records.append(rec)

    def backward(self, root: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(root)/d(.) back to every requires-grad leaf.

        Leaf gradients are stored in ``leaf.grad`` (overwritten, not
        accumulated across calls) and returned as a mapping. Leaves passed
        explicitly that did not take part in the graph get zero gradients.
        """
        if not self.records:
            raise TensorError("backward() called on an empty graph")
        if root.size != 1:
            raise ShapeError(f"backward() root must be scalar, got shape {root.shape}")
        if not root._from_op:
            raise TensorError("backward() root was not produced by this graph")

        grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.value)}
        found: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output.node_id, None)
            if g_out is None:
                continue
            g_ins = rec.adjoint(g_out)
            for inp, g_in in zip(rec.inputs, g_ins):
                if g_in is None or not inp.requires_grad:
                    continue
                if g_in.shape != inp.shape:
                    raise ShapeError(
                        f"adjoint of {rec.kind} returned shape {g_in.shape} for operand {inp.shape}"
                    )
                if not np.isfinite(g_in).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of {rec.kind}")
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = g_in if prev is None else prev + g_in
                if inp.is_leaf:
                    found[inp.node_id] = inp

        out: dict[Tensor, np.ndarray] = {}
        for nid, leaf in found.items():
            leaf.grad = grads[nid]
            out[leaf] = leaf.grad
        for leaf in leaves or ():
            if leaf.node_id not in found:
                leaf.grad = np.zeros_like(leaf.value)
                out[leaf] = leaf.grad
        return out


def _stack() -> list[Graph]:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def active_graph() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


def _emit(kind: str, inputs: tuple[Tensor, ...], value: np.ndarray, adjoint) -> Tensor:
    if not np.isfinite(value).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{kind} produced non-finite output (operands {shapes})")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.node_id = next(_node_ids)
    out.requires_grad = False
    out._from_op = False
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        g.record(Record(kind, inputs, out, adjoint))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable[..., Tensor]] = {}


def register_primitive(kind: str):
    def deco(fn):
        PRIMITIVES[kind] = fn
        return fn

    return deco


def apply_primitive(kind: str, *operands, **attrs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise TensorError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **attrs)


def custom_primitive(kind: str, inputs: Sequence[Tensor], value: np.ndarray, adjoint) -> Tensor:
    """Record an op with a caller-supplied value and adjoint rule."""
    return _emit(kind, tuple(inputs), np.asarray(value, dtype=DTYPE), adjoint)


@register_primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dimensions {a.shape} x {b.shape}") from None

    def adjoint(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", (a, b), value, adjoint)


@register_primitive("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.value + b.value, adjoint)


@register_primitive("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.value - b.value, adjoint)


@register_primitive("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def adjoint(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.value * b.value, adjoint)


@register_primitive("scale")
def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.value * c, lambda g: (g * c,))


@register_primitive("relu")
def relu(x: Tensor) -> Tensor:
    on = x.value > 0
    return _emit("relu", (x,), np.where(on, x.value, 0.0), lambda g: (g * on,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@register_primitive("gelu")
def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))

    def adjoint(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.value * x.value)
        return (g * (cdf + x.value * pdf),)

    return _emit("gelu", (x,), x.value * cdf, adjoint)


@register_primitive("softmax-rows")
def softmax(x: Tensor) -> Tensor:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax-rows", (x,), y, adjoint)


@register_primitive("log-softmax-rows")
def log_softmax(x: Tensor) -> Tensor:
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def adjoint(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit("log-softmax-rows", (x,), y, adjoint)


@register_primitive("layernorm-rows")
def layernorm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def adjoint(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=-1, keepdims=True)),)

    return _emit("layernorm-rows", (x,), xhat, adjoint)


@register_primitive("transpose")
def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    nd = x.value.ndim
    if axes is None:
        if nd < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
        axes = list(range(nd - 2)) + [nd - 1, nd - 2]
    axes = tuple(axes)
    if sorted(axes) != list(range(nd)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.value, axes), lambda g: (np.transpose(g, inv),))


@register_primitive("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _emit("reshape", (x,), value, lambda g: (g.reshape(x.shape),))


@register_primitive("concat-last-dim")
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat-last-dim", tensors, value, adjoint)


@register_primitive("slice")
def index(x: Tensor, key) -> Tensor:
    """numpy-style indexing (basic slices or integer gathers)."""
    try:
        value = np.array(x.value[key], dtype=DTYPE)
    except IndexError as err:
        raise ShapeError(f"slice: {err} (operand shape {x.shape})") from None

    def adjoint(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("slice", (x,), value, adjoint)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@register_primitive("sum")
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = np.asarray(x.value.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def adjoint(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _emit("sum", (x,), value, adjoint)


@register_primitive("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = np.asarray(x.value.mean(axis=axis, keepdims=keepdims), dtype=DTYPE)
    count = x.value.size // max(value.size, 1)

    def adjoint(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _emit("mean", (x,), value, adjoint)


@register_primitive("square")
def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.value * x.value, lambda g: (2.0 * g * x.value,))


@register_primitive("sqrt")
def sqrt(x: Tensor) -> Tensor:
    if (x.value < 0).any():
        raise NonFiniteError("sqrt of a negative entry")
    y = np.sqrt(x.value)
    return _emit("sqrt", (x,), y, lambda g: (g / (2.0 * y),))


@register_primitive("l2norm")
def l2norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    n = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))

    def adjoint(g):
        gk = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gk * x.value / safe, 0.0),)

    value = n if keepdims else (n.reshape(()) if axis is None else np.squeeze(n, axis))
    return _emit("l2norm", (x,), np.asarray(value, dtype=DTYPE), adjoint)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-5,
) -> GradCheckReport:
    """Compare graph gradients of scalar ``f`` at ``x`` to central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, atol)``; the
    floor keeps differencing round-off on near-zero gradients from
    dominating.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x, dtype=DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Graph() as g:
        out = f(xt)
    analytic = g.backward(out, leaves=[xt])[xt]

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + step
        fp = f(Tensor(probe)).item()
        pflat[i] = orig - step
        fm = f(Tensor(probe)).item()
        pflat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_difference_check: f returned a non-finite value")
        flat[i] = (fp - fm) / (2.0 * step)

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = diff / np.maximum(denom, atol)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, worst <= tol, analytic, numeric)
