"""Dense reverse-mode automatic differentiation on numpy arrays.

Every backward rule is written in terms of differentiable ``Tensor`` ops, so a
gradient computed with ``create_graph=True`` is itself part of a graph and can
be differentiated again (double backprop). That is what makes explanation
losses over InputXGradient attributions trainable.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_mode = threading.local()


def set_default_dtype(dtype) -> None:
    """Floating type for new tensors. float64 by default; float32 roughly halves training time."""
    global DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """A node in a differentiable computation graph.

    Leaves are created by the user; interior nodes carry the op name, their
    parents and a vector-Jacobian product closure.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "vjp", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.name = name

    # -- metadata -----------------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __abs__(self):
        return abs_(self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

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

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def abs(self):
        return abs_(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, vjp: Callable) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = list(range(extra))
    for i, n in enumerate(shape):
        if n == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = sum_(g, tuple(axes), keepdims=True) if axes else g
    return reshape(out, shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", vjp)


def reciprocal(a: Tensor) -> Tensor:
    """1/a, with 1/0 defined as 0 so zero denominators never produce inf."""
    with np.errstate(divide="ignore"):
        data = np.where(a.data == 0.0, 0.0, 1.0 / np.where(a.data == 0.0, 1.0, a.data))

    def vjp(g):
        return (neg(mul(g, mul(out, out))),)

    out = _make(data, (a,), "reciprocal", vjp)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    def vjp(g):
        return (mul(g, mul(power(a, exponent - 1), exponent)),)

    return _make(a.data ** exponent, (a,), "pow", vjp)


def safe_sqrt(a: Tensor) -> Tensor:
    """Square root whose derivative at zero is taken as zero."""

    def vjp(g):
        return (mul(g, mul(reciprocal(out), 0.5)),)

    out = _make(np.sqrt(a.data), (a,), "sqrt", vjp)
    return out


def exp(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), "exp", vjp)
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (mul(g, reciprocal(a)),))


def tanh(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, add(1.0, neg(mul(out, out)))),)

    out = _make(np.tanh(a.data), (a,), "tanh", vjp)
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(DTYPE)
    return _make(a.data * mask, (a,), "relu", lambda g: (mul(g, mask),))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (mul(g, sign),))


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape == tuple(shape):
        return a
    return _make(np.broadcast_to(a.data, shape), (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (reshape(g, a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: (transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def vjp(g):
        return (scatter_zeros(g, index, a.shape),)

    return _make(a.data[index], (a,), "getitem", vjp)


def scatter_zeros(a: Tensor, index, shape: tuple[int, ...]) -> Tensor:
    """Place ``a`` at ``index`` inside a zero array of ``shape`` (adjoint of getitem)."""
    data = np.zeros(shape, dtype=DTYPE)
    np.add.at(data, index, a.data)
    return _make(data, (a,), "scatter", lambda g: (getitem(g, index),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight``; backward scatter-adds into the table."""
    ids = np.asarray(ids)

    def vjp(g):
        return (scatter_rows(g, ids, weight.shape),)

    return _make(weight.data[ids], (weight,), "embedding", vjp)


def scatter_rows(g: Tensor, ids: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    data = np.zeros(shape, dtype=DTYPE)
    np.add.at(data, ids.reshape(-1), g.data.reshape(-1, shape[-1]))
    return _make(data, (g,), "scatter_rows", lambda gg: (embedding(gg, ids),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(matmul(g, _swap_last(b)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(matmul(_swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), "matmul", vjp)


def _swap_last(t: Tensor) -> Tensor:
    if t.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    return t.swapaxes(-1, -2)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", vjp)


# -- composite-but-primitive ops ---------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = sum_(mul(g, out), axis, keepdims=True)
        return (mul(out, add(g, neg(inner))),)

    out = _make(data, (a,), "softmax", vjp)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))

    def vjp(g):
        probs = exp(out)
        return (add(g, neg(mul(probs, sum_(g, axis, keepdims=True)))),)

    out = _make(a.data - lse, (a,), "log_softmax", vjp)
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, -1, keepdims=True)
    centred = x - mu
    var = mean(centred * centred, -1, keepdims=True)
    inv_std = power(var + eps, -0.5)
    return centred * inv_std * gamma + beta


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ||x||; the zero vector maps to the zero vector."""
    norm = safe_sqrt(sum_(x * x, axis, keepdims=True))
    return x * reciprocal(norm)


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels)
    logp = log_softmax(logits, -1)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(len(labels)), labels] = 1.0
    per_example = neg(sum_(logp * onehot, -1))
    if reduction == "none":
        return per_example
    return mean(per_example)


# -- gradients ---------------------------------------------------------------

def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen or not root.requires_grad:
            continue
        stack = [(root, iter(root.parents))]
        seen.add(id(root))
        while stack:
            node, it = stack[-1]
            for parent in it:
                if parent.requires_grad and id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append((parent, iter(parent.parents)))
                    break
            else:
                stack.pop()
                order.append(node)
    return order


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Sequence[Tensor],
    grad_outputs: Sequence | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``outputs`` with respect to ``inputs``.

    With a single scalar output and no ``grad_outputs`` this is the plain
    gradient. Inputs that the outputs do not depend on get zero gradients.
    When ``create_graph`` is true the returned tensors are differentiable.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    outputs = list(outputs)
    if grad_outputs is None:
        for out in outputs:
            if out.size != 1:
                raise ValueError(f"gradient needs a scalar output, got shape {out.shape}")
        grad_outputs = [Tensor(np.ones_like(out.data)) for out in outputs]
    else:
        grad_outputs = [as_tensor(g) for g in grad_outputs]
    for out in outputs:
        if not out.requires_grad:
            raise RuntimeError(
                "output does not require grad; if it was built from a first-order "
                "gradient, that gradient must be computed with create_graph=True"
            )

    cotangent: dict[int, Tensor] = {}
    for out, g in zip(outputs, grad_outputs):
        if g.shape != out.shape:
            raise ValueError(f"grad_output shape {g.shape} does not match output {out.shape}")
        prev = cotangent.get(id(out))
        cotangent[id(out)] = g if prev is None else prev + g

    wanted = {id(t) for t in inputs}
    with _grad_mode(create_graph):
        for node in reversed(_toposort(outputs)):
            g = cotangent.get(id(node))
            if g is None or node.vjp is None:
                continue
            if id(node) not in wanted:
                # interior cotangents are no longer needed once propagated
                del cotangent[id(node)]
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = cotangent.get(id(parent))
                cotangent[id(parent)] = pg if prev is None else add(prev, pg)

    result = []
    for t in inputs:
        g = cotangent.get(id(t))
        g = Tensor(np.zeros_like(t.data)) if g is None else g
        if create_graph and not g.requires_grad:
            # constant in the inputs: still differentiable, with zero second derivative
            g = Tensor(g.data, requires_grad=True)
        result.append(g)
    return result


def gradient(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """First-order gradient of a scalar loss; returned tensors are detached."""
    return grad(loss, params, create_graph=False)


def second_order_gradient(fn_of_grads: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradient of a scalar built from ``create_graph=True`` first-order gradients."""
    return grad(fn_of_grads, params, create_graph=False)


# -- finite differences ------------------------------------------------------

@dataclass
class ParamCheck:
    index: int
    max_abs_error: float
    max_rel_error: float
    nonfinite: bool = False
    passed: bool = True


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a-b| / max(|a|, |b|, floor); the floor keeps near-zero entries from dominating."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    analytic: Sequence[np.ndarray] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients against central differences, element-wise.

    ``loss_fn`` rebuilds the loss from the current parameter values. When
    ``analytic`` is given it replaces the autodiff gradients (useful for
    checking that a tampered gradient is caught). ``max_entries`` subsamples
    coordinates of large parameters.
    """
    if analytic is None:
        analytic = [g.data.copy() for g in gradient(loss_fn(), params)]
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for i, (p, g) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        nonfinite = False
        for j, c in enumerate(coords):
            orig = flat[c]
            # grad mode stays on: losses over gradient attributions differentiate internally
            flat[c] = orig + h
            up = loss_fn().item()
            flat[c] = orig - h
            down = loss_fn().item()
            flat[c] = orig
            numeric[j] = (up - down) / (2 * h)
            if not (np.isfinite(up) and np.isfinite(down)):
                nonfinite = True
        ana = np.asarray(g).reshape(-1)[coords]
        finite = np.isfinite(numeric)
        rel = relative_error(ana[finite], numeric[finite], floor)
        check = ParamCheck(
            index=i,
            max_abs_error=float(np.max(np.abs(ana[finite] - numeric[finite]), initial=0.0)),
            max_rel_error=float(np.max(rel, initial=0.0)),
            nonfinite=nonfinite,
        )
        check.passed = (not nonfinite) and check.max_rel_error < tol
        report.params.append(check)
    return report
