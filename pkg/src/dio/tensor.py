"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every differentiable primitive returns a new
Tensor that remembers its parent tensors and a closure producing the parent
adjoints. ``backward`` walks the recorded tape once, in reverse topological
order, accumulating adjoints additively wherever a node fans out. Tapes are
single-use; a second backward through the same tape raises.

Everything is 64-bit: the engine is meant for small models where gradient
checks against central finite differences must hold to tight tolerances.
Tensors that participate in a tape are never mutated in place; optimizer
updates touch only leaf parameters after their tape has been consumed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "backward",
    "no_grad",
    "grad_check",
    "SGD",
    "matmul",
    "conv2d",
    "relu",
    "clamp",
    "l2_norm",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive; names the op and shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus the tape bookkeeping for reverse-mode AD.

    ``requires_grad`` marks leaves that should receive gradients; it also
    propagates through primitives so the tape only records what matters.
    ``grad`` is populated (accumulating) by :func:`backward` on leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], list[tuple["Tensor", np.ndarray]]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    # -- method aliases -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return tensor_max(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return tensor_min(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def backward(self, wrt: Sequence["Tensor"] | None = None):
        backward(self, wrt)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the pre-broadcast operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)

    def grad_fn(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("div", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return [(a, ga), (b, gb)]

    return _make(a.data / b.data, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: [(a, -g)], "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def grad_fn(g):
        return [(a, g * p * a.data ** (p - 1.0))]

    return _make(a.data**p, (a,), grad_fn, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: [(a, g * out_data)], "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: [(a, g / a.data)], "log")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: [(a, g * (1.0 - out_data * out_data))], "tanh")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: [(a, g * 0.5 / out_data)], "sqrt")


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink, via sign(0) == 0
    return _make(np.abs(a.data), (a,), lambda g: [(a, g * np.sign(a.data))], "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(a.data * mask, (a,), lambda g: [(a, g * mask)], "relu")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    # gradient flows only strictly inside the interval
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: [(a, g * mask)], "clamp")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def grad_fn(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution, NCHW inputs and OIHW kernels. No im2col."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((n, co, ho, wo))
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s]
            out += np.einsum("ncij,oc->noij", patch, w.data[:, :, ki, kj])

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for ki in range(kh):
            for kj in range(kw):
                patch = xp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s]
                gw[:, :, ki, kj] = np.einsum("noij,ncij->oc", g, patch)
                gxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += np.einsum(
                    "noij,oc->ncij", g, w.data[:, :, ki, kj]
                )
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return [(x, gx), (w, gw)]

    return _make(out, (x, w), grad_fn, "conv2d")


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: [(a, g.reshape(old))], "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: [(a, np.transpose(g, inv))], "transpose")


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


# -- reductions ---------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        gb = g
        if axis is not None and not keepdims:
            gb = np.expand_dims(gb, axis)
        return [(a, np.broadcast_to(gb, a.shape).copy())]

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def grad_fn(g):
        gb = g
        if axis is not None and not keepdims:
            gb = np.expand_dims(gb, axis)
        return [(a, np.broadcast_to(gb, a.shape) / count)]

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), grad_fn, "mean")


def _extreme(a: Tensor, axis, keepdims: bool, op: str) -> Tensor:
    reduce_fn = np.max if op == "max" else np.min
    arg_fn = np.argmax if op == "max" else np.argmin
    out_data = reduce_fn(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        # route to the first extremum (ties break to the lowest index)
        gx = np.zeros_like(a.data)
        if axis is None:
            gx.reshape(-1)[arg_fn(a.data)] = np.asarray(g).reshape(-1)[0]
        else:
            idx = np.expand_dims(arg_fn(a.data, axis=axis), axis)
            gb = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, idx, gb, axis)
        return [(a, gx)]

    return _make(out_data, (a,), grad_fn, op)


def tensor_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, "max")


def tensor_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, "min")


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over all entries or along one axis."""
    nk = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if keepdims:
        out_data = nk
    elif axis is None:
        out_data = nk.reshape(())
    else:
        out_data = np.squeeze(nk, axis=axis)

    def grad_fn(g):
        gb = g
        if not keepdims:
            if axis is None:
                gb = np.asarray(g).reshape((1,) * a.ndim)
            else:
                gb = np.expand_dims(g, axis)
        factor = a.data / np.maximum(nk, 1e-300)
        return [(a, factor * gb)]

    return _make(out_data, (a,), grad_fn, "l2_norm")


# -- classification loss ------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy from raw logits, numerically stabilized.

    ``labels`` are integer class indices, not part of the tape.
    """
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if y.shape[0] != n:
        raise ShapeError("softmax_cross_entropy", logits.shape, y.shape)
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    sumexp = expv.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sumexp)
    loss = -log_probs[np.arange(n), y].mean()

    def grad_fn(g):
        p = expv / sumexp
        p[np.arange(n), y] -= 1.0
        return [(logits, np.asarray(g).reshape(()) * p / n)]

    return _make(np.asarray(loss), (logits,), grad_fn, "softmax_cross_entropy")


# -- backward pass ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
            stack.append((parent, False))
    return order  # parents precede children


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients accumulate into ``.grad`` of leaf tensors with
    ``requires_grad=True`` (restricted to ``wrt`` when given). The tape is
    consumed: a second backward through it raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: tape already consumed")

    wrt_ids = None if wrt is None else {id(t) for t in wrt}
    order = _topo_order(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes: dict[int, Tensor] = {id(n): n for n in order}

    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is not None:
            for parent, pg in node._grad_fn(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
        elif node.requires_grad and (wrt_ids is None or id(node) in wrt_ids):
            node.grad = g.copy() if node.grad is None else node.grad + g

    for node in nodes.values():
        node._consumed = True
        node._grad_fn = None
        node._parents = ()


# -- gradient checking --------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, fd_step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``fn`` must be scalar-valued; error per coordinate is
    |autodiff - fd| / max(1, |fd|). Raises on non-finite values, naming the
    offending flat coordinate.
    """
    if fd_step <= 0:
        raise ValueError("grad_check: fd_step must be positive")
    point.grad = None
    out = fn(point)
    if out.data.size != 1:
        raise ValueError("grad_check: fn must be scalar-valued")
    backward(out, wrt=[point])
    ad = (point.grad if point.grad is not None else np.zeros_like(point.data)).reshape(-1).copy()
    point.grad = None

    flat = point.data.reshape(-1)
    fd = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            f_plus = float(fn(point).data)
            flat[i] = orig - fd_step
            f_minus = float(fn(point).data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * fd_step)
            if not (np.isfinite(fd[i]) and np.isfinite(ad[i])):
                raise FloatingPointError(f"grad_check: non-finite value at flat coordinate {i}")

    rel = np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))
    return float(rel.max()) if rel.size else 0.0


# -- optimizer ----------------------------------------------------------------


class SGD:
    """Momentum SGD with decoupled-from-nothing weight decay (L2 into grad).

    Update per parameter: v <- mu*v + (g + wd*theta); theta <- theta - lr*v.
    Gradients are cleared after the step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = [p for p in params]
        if not all(p.requires_grad for p in self.params):
            raise ValueError("SGD: all parameters must have requires_grad=True")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise RuntimeError(f"SGD.step: parameter {i} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[i]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
