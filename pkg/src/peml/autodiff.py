"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every operation returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to the
parents' gradients.  :func:`backward` walks the nodes reachable from a scalar
loss in reverse topological order.

GELU uses the tanh approximation::

    gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_GRAD_ENABLED = True

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense n-d value with an optional gradient slot.

    Leaves are created by the user; interior nodes are created by operations
    and carry ``op``, ``parents`` and a backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    # one reduction: NaN/inf anywhere makes the sum non-finite
    if not math.isfinite(data.sum()):
        if np.isfinite(data).all():
            raise NumericError(f"overflow while checking output of operation '{op}'")
        raise NumericError(f"non-finite output in operation '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.parents = ()
        out._backward = None
    return out


def custom(op: str, data: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Register a user-defined primitive with an explicit backward rule."""
    return _node(op, np.asarray(data, dtype=np.float64), parents, backward_fn)


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


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    return _node("div", ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _node("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _node("log", y, (x,), lambda g: (g / xd,))


# -- linear algebra and shape ---------------------------------------------

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, _swap(bd)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_swap(ad), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _node("matmul", y, (a, b), back)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _node("reshape", y, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _node("getitem", np.array(x.data[idx]), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node("concat", y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            "stack: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    n = len(tensors)
    return _node("stack", y, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return _node("broadcast_to", y, (x,), lambda g: (_unbroadcast(g, src),))


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = np.where(x.data > 0, 1.0, slope)
    return _node("leaky_relu", x.data * d, (x,), lambda g: (g * d,))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return _node("gelu", y, (x,), lambda g: (g * dy,))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "leaky_relu": leaky_relu, "gelu": gelu}


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _node("log_softmax", y, (x,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional gain and bias."""
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: {name} shape {p.shape} vs input {x.shape}")
    rd = 1.0 / d
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * rd
    with np.errstate(over="ignore"):
        var = (xc * xc).sum(axis=-1, keepdims=True) * rd
    # an infinite variance would normalize the row to zeros without any error
    if not math.isfinite(var.sum()):
        raise NumericError("non-finite variance in operation 'layer_norm'")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = g * gain.data if gain is not None else g
        dx = inv * (gx - gx.sum(axis=-1, keepdims=True) * rd
                    - xhat * ((gx * xhat).sum(axis=-1, keepdims=True) * rd))
        out = [dx]
        if gain is not None:
            out.append((g * xhat).sum(axis=lead))
        if bias is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _node("layer_norm", y, parents, back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity (same object) in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# -- losses and lookups ------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer class targets."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    n, c = logits.shape
    if t.size and (t.min() < 0 or t.max() >= c):
        raise DimensionError(f"cross_entropy: target outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return (d * (g / n),)

    return _node("cross_entropy", np.asarray(loss), (logits,), back)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    return _node("mse", np.asarray((diff * diff).mean()), (pred, target),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise DimensionError(f"embedding: ids outside [0, {v}) for table {table.shape}")
    shape = table.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, ids, g)
        return (z,)

    return _node("embedding", table.data[ids], (table,), back)


# -- graph traversal -----------------------------------------------------------

def graph_nodes(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _propagate(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[id(node)] = g
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    leaves = {id(n): n for n in graph_nodes(loss) if n.is_leaf}
    for key, g in _propagate(loss).items():
        node = leaves[key]
        g = np.array(g, dtype=np.float64)
        node.grad = g if node.grad is None else node.grad + g


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs``; zeros where there is no path."""
    leaves = _propagate(loss)
    return [np.array(leaves[id(x)]) if id(x) in leaves else np.zeros_like(x.data)
            for x in inputs]


# -- dropout keying ------------------------------------------------------------

class DropoutStream:
    """Dropout randomness keyed by (seed, step).

    Masks are drawn in call order from one Philox generator keyed by the pair,
    so a forward pass replays exactly when the stream is rebuilt with the same
    key and the ops run in the same order.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)
        self.counter = 0
        self._rng = None

    def next(self) -> np.random.Generator:
        if self._rng is None:
            self._rng = np.random.Generator(np.random.Philox(key=[self.seed, self.step]))
        self.counter += 1
        return self._rng


# -- finite-difference oracle ----------------------------------------------------

def finite_diff_check(f: Callable, x, eps: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor (``f(x)`` is evaluated) or a list of Tensors, in which
    case ``f`` is called with that list.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    loss = f(x)
    if loss.data.size != 1:
        raise ContractError(f"f must return a scalar, got shape {loss.shape}")
    analytic = grad(loss, xs)
    with no_grad():
        if f(x).item() != loss.item():
            raise ContractError("f is not deterministic; seed or disable dropout")
    worst = 0.0
    for t, ga in zip(xs, analytic):
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(t.size, max_coords, replace=False)
        for i in coords:
            orig = t.data.flat[i]
            with no_grad():
                t.data.flat[i] = orig + eps
                fp = f(x).item()
                t.data.flat[i] = orig - eps
                fm = f(x).item()
            t.data.flat[i] = orig
            num = (fp - fm) / (2 * eps)
            an = ga.flat[i]
            err = abs(an - num) / max(1.0, abs(an), abs(num))
            worst = max(worst, err)
    return worst
