"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op builds a fresh node on the tape. Nodes get a monotonically increasing
id at creation, so inputs always have smaller ids than outputs and sorting by
id gives a valid reverse topological order for the backward sweep.

Each op also charges a FLOP count to any active :func:`count_flops` context.
Convention (mirrored analytically in :mod:`loracl.flops`):

* matmul: ``2 * m * k * n`` per output matrix (multiply-add = 2 FLOPs)
* elementwise binary/unary arithmetic, exp, log, sqrt, tanh: 1 per output element
* reductions (sum, mean, max): 1 per input element
* softmax: :data:`SOFTMAX_FLOPS` per element, layernorm: :data:`LAYERNORM_FLOPS`
  per element, gelu: :data:`GELU_FLOPS` per element
* reshape, transpose, slicing, concat, broadcast: free

Backward charges the forward cost once for every input that needs a gradient.
For matmul that is exactly the cost of the corresponding gradient product; for
the other ops it is the "activation-grad ~ forward" heuristic.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

SOFTMAX_FLOPS = 5
LAYERNORM_FLOPS = 8
GELU_FLOPS = 8
GELU_COEF = 0.044715
KL_LOG_FLOOR = 1e-12
LN_EPS = 1e-5

_ids = itertools.count()
_state = threading.local()
_counter_lock = threading.Lock()
_counters: list["FlopCounter"] = []


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class FlopCounter:
    def __init__(self) -> None:
        self.forward = 0
        self.backward = 0

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def __repr__(self) -> str:
        return f"FlopCounter(forward={self.forward}, backward={self.backward})"


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Count FLOPs of every op executed (in any thread) inside the block."""
    counter = FlopCounter()
    with _counter_lock:
        _counters.append(counter)
    try:
        yield counter
    finally:
        with _counter_lock:
            _counters.remove(counter)


def _charge(n: int, backward: bool = False) -> None:
    if not _counters:
        return
    with _counter_lock:
        for c in _counters:
            if backward:
                c.backward += int(n)
            else:
                c.forward += int(n)


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """Immutable float64 array that optionally participates in the tape.

    ``_parents`` holds the input tensors; ``_backward`` maps the output
    gradient to a tuple of input gradients (``None`` for inputs that do not
    need one).
    """

    __slots__ = ("data", "requires_grad", "name", "grad", "node_id", "_parents", "_backward", "op")
    # make ndarray <op> Tensor dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(
        self, data, requires_grad: bool = False, name: str | None = None, _copy: bool = True
    ) -> None:
        arr = np.array(data, dtype=np.float64) if _copy else np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        if np.isnan(arr).any():
            raise FloatingPointError("tensor data contains NaN")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.name = name if name is not None else f"tensor{self.node_id}"
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, _copy=False)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _needs(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------- arithmetic


def _binary(a, b, fwd, grads, op: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = fwd(a.data, b.data)
    _charge(out_data.size)

    def backward(g):
        ga = gb = None
        if _needs(a):
            _charge(g.size, backward=True)
            ga = _unbroadcast(grads[0](g, a.data, b.data), a.shape)
        if _needs(b):
            _charge(g.size, backward=True)
            gb = _unbroadcast(grads[1](g, a.data, b.data), b.shape)
        return ga, gb

    return _make(out_data, (a, b), backward, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, (lambda g, x, y: g, lambda g, x, y: g), "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, (lambda g, x, y: g, lambda g, x, y: -g), "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, (lambda g, x, y: g * y, lambda g, x, y: g * x), "mul")


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide, (lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)), "div"
    )


def _unary(x: Tensor, data: np.ndarray, dfn: Callable, op: str, cost_per_elem: int = 1) -> Tensor:
    _charge(cost_per_elem * data.size)

    def backward(g):
        _charge(cost_per_elem * g.size, backward=True)
        return (dfn(g),)

    return _make(data, (x,), backward, op)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda g: g * y, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data < 0).any():
        raise FloatingPointError("log of negative value")
    with np.errstate(divide="ignore"):
        y = np.log(x.data)
    return _unary(x, y, lambda g: g / x.data, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if (x.data < 0).any():
        raise FloatingPointError("sqrt of negative value")
    y = np.sqrt(x.data)
    return _unary(x, y, lambda g: g * 0.5 / y, "sqrt")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda g: g * (1.0 - y * y), "tanh")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data * x.data, lambda g: 2.0 * g * x.data, "square")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)
    _charge(x.size)

    def backward(g):
        _charge(x.size, backward=True)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    y = x.data.mean(axis=axes, keepdims=keepdims)
    _charge(x.size)

    def backward(g):
        _charge(x.size, backward=True)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(y, (x,), backward, "mean")


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    y = x.data.reshape(shape)
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    y = x.data.transpose(axes)
    return _make(y, (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    y = x.data[index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(y, (x,), backward, "getitem")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    y = np.broadcast_to(x.data, shape).copy()
    return _make(y, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    y = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if _needs(x) else None
            for i, x in enumerate(xs)
        )

    return _make(y, xs, backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch dims broadcast like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2
    try:
        if flat:
            # one GEMM over all leading dims instead of a batched loop
            y = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
        else:
            y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    cost = 2 * y.size * a.shape[-1]
    _charge(cost)

    def backward(g):
        ga = gb = None
        if _needs(a):
            _charge(cost, backward=True)
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if _needs(b):
            _charge(cost, backward=True)
            if flat:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(y, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with torch-style (out, in) weight layout."""
    y = matmul(x, swap_last(weight))
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- nn ops


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    _charge(SOFTMAX_FLOPS * s.size)

    def backward(g):
        _charge(SOFTMAX_FLOPS * s.size, backward=True)
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise FloatingPointError("log_softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    _charge(SOFTMAX_FLOPS * y.size)

    def backward(g):
        _charge(SOFTMAX_FLOPS * y.size, backward=True)
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def layernorm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then ``* gain + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    m = x.shape[-1]
    if gain.shape != (m,) or bias.shape != (m,):
        raise ShapeError(f"layernorm gain/bias must have shape ({m},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data
    _charge(LAYERNORM_FLOPS * y.size)

    def backward(g):
        gx = gg = gb = None
        if _needs(x):
            _charge(LAYERNORM_FLOPS * y.size, backward=True)
            gh = g * gain.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if _needs(gain):
            _charge(y.size, backward=True)
            gg = (g * xhat).reshape(-1, m).sum(axis=0)
        if _needs(bias):
            _charge(y.size, backward=True)
            gb = g.reshape(-1, m).sum(axis=0)
        return gx, gg, gb

    return _make(y, (x, gain, bias), backward, "layernorm")


def gelu(x) -> Tensor:
    """Tanh-approximation GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    inner = c * (xd + GELU_COEF * xd * xd * xd)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def dfn(g):
        dinner = c * (1.0 + 3.0 * GELU_COEF * xd * xd)
        return g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner)

    return _unary(x, y, dfn, "gelu", GELU_FLOPS)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if ((labels < 0) | (labels >= c)).any():
        raise IndexError(f"labels must lie in [0, {c}), got {labels.min()}..{labels.max()}")
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(b), labels))
    return mul(mean(picked), -1.0)


def kl_div(p, q, floor: float = KL_LOG_FLOOR) -> Tensor:
    """Row-mean of ``sum p * (ln p - ln q)``; ``p == 0`` entries contribute 0.

    Both logarithms are clamped at ``ln(floor)``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    qc = np.maximum(qd, floor)
    pc = np.maximum(pd, floor)
    terms = np.where(pd > 0, pd * (np.log(pc) - np.log(qc)), 0.0)
    rows = int(np.prod(p.shape[:-1])) if p.ndim > 1 else 1
    y = terms.sum() / rows
    _charge(3 * p.size)

    def backward(g):
        gp = gq = None
        if _needs(p):
            _charge(3 * p.size, backward=True)
            dp = np.where(pd > 0, np.log(pc) - np.log(qc) + np.where(pd > floor, 1.0, 0.0), 0.0)
            gp = g * dp / rows
        if _needs(q):
            _charge(3 * p.size, backward=True)
            gq = g * np.where(qd > floor, -pd / qc, 0.0) / rows
        return gp, gq

    return _make(np.asarray(y), (p, q), backward, "kl_div")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a GradMap: leaf name -> gradient array for every leaf with
    ``requires_grad``. Leaves that are frozen never appear. The gradient is
    also stored on ``leaf.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return {}

    # collect the graph reachable from loss
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes or not t.requires_grad:
            continue
        nodes[t.node_id] = t
        stack.extend(t._parents)

    grads[loss.node_id] = np.ones_like(loss.data)
    out: dict[str, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g
            out[t.name] = g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, floor: float = 1e-3) -> float:
    """Max per-coordinate relative error between autodiff and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero gradients from inflating the ratio with pure round-off.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True, name="x")
    out = f(leaf)
    g = backward(out).get("x")
    analytic = np.zeros_like(x0) if g is None else g
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
