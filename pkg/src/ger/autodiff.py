"""Small reverse-mode autodiff over dense numpy arrays.

Every model in this package builds its forward pass from the primitives
below.  A :class:`Tensor` remembers the primitive that produced it and a
closure computing the adjoint; :func:`backward` walks the recorded graph in
reverse topological order and accumulates gradients into tracked leaves.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording the graph (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    """A primitive received operands whose shapes it cannot combine."""


class GraphStateError(RuntimeError):
    """Backward requested on a graph that has not been run forward."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (untracked) scalar."""
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)
    return _make(out, "leaky_relu", (a,), lambda g: (np.where(mask, g, slope * g),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast batch axes of {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), backward_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, "concat", tuple(tensors), backward_fn)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(np.array(out), "slice", (a,), backward_fn)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, row assembly)."""
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"take: index out of range for axis of size {n}")
    out = np.take(a.data, idx, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim))))
        return (full,)

    return _make(out, "take", (a,), backward_fn)


# ---------------------------------------------------------------- reductions


def _expand_grad(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(
        np.asarray(out),
        "sum",
        (a,),
        lambda g: (np.array(_expand_grad(g, a.shape, axis, keepdims)),),
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)
    return _make(
        np.asarray(out),
        "mean",
        (a,),
        lambda g: (np.array(_expand_grad(g, a.shape, axis, keepdims)) / count,),
    )


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    Computed with max subtraction.  Every slice must keep at least one entry.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), backward_fn)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    probs = np.exp(x - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * probs,)

    return _make(out, "logsumexp", (a,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine shape {gamma.shape} does not match features {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def backward_fn(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(seed . root)/d(leaf) into every tracked leaf's ``grad``."""
    if not root.requires_grad:
        return
    g0 = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=root.data.dtype)
    if g0.shape != root.shape:
        raise ShapeError(f"backward: seed shape {g0.shape} does not match output {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): g0}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
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


class OpGraph:
    """A recorded differentiable computation.

    ``fn`` maps input tensors (and whatever parameters it closes over) to one
    output tensor.  ``forward`` records the operation graph, ``backward``
    pushes a seed gradient through it.
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self.output: Tensor | None = None

    def forward(self, *inputs) -> Tensor:
        self.output = self.fn(*inputs)
        return self.output

    def backward(self, seed=None) -> None:
        if self.output is None:
            raise GraphStateError("backward called before forward")
        backward(self.output, seed)

    def nodes(self) -> list[Tensor]:
        if self.output is None:
            raise GraphStateError("graph has not been run forward")
        return _topological(self.output)


def forward(graph: OpGraph, inputs: Iterable = ()) -> Tensor:
    return graph.forward(*inputs)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{'ok ' if v < self.tolerance else 'BAD'} {k}: {v:.3e}" for k, v in self.errors.items()]
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` with central differences.

    Relative error per entry is ``max(|a - n| - r, 0) / max(|a|, |n|, floor)``
    where ``r`` bounds the rounding error of the difference quotient itself
    (a few ulps of ``fn()`` divided by ``2 * step``).  The report holds the
    maximum over each parameter's entries.  ``max_entries`` samples
    a subset of large tensors.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    zero_grads(params.values())
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check: function must return a scalar, got {out.shape}")
    backward(out)
    noise = 4 * np.spacing(abs(float(out.data))) / (2 * step)
    report = GradCheckReport(tolerance=tolerance, step=step)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = max(abs(a - numeric) - noise, 0.0) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.errors[name] = worst
        report.checked[name] = len(entries)
    zero_grads(params.values())
    return report
