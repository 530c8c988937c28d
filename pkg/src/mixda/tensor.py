"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure that pushes the output gradient back into them.
Graphs are only recorded when at least one input requires a gradient, so
forward passes over frozen parameters cost no bookkeeping.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
LN_EPS = 1e-5

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
    def parent_ids(self) -> tuple[int, ...]:
        return tuple(p.node_id for p in self._parents)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        seen: dict[int, Tensor] = {}
        for p in parents:
            if p.requires_grad:
                seen.setdefault(p.node_id, p)
        out._parents = tuple(seen.values())
        out._backward = backward
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


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(x, g * c)

    return _result(x.data * c, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None

    if b.ndim == 2:
        # common activation @ weight case: fold leading axes into one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accum(b, a2.T @ g2)

        return _result((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), backward)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------------ elementwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GeLU."""
    v = x.data
    v2 = v * v
    inner = GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * v2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


_UNARY = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(x: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch by name: relu, gelu, sigmoid, add, mul or scale."""
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        return _BINARY[kind](x, other)
    if kind == "scale":
        return scale(x, other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------- shapes


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _result(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _result(out, (x,), backward)


def index(x: Tensor, idx) -> Tensor:
    if isinstance(idx, np.ndarray) and idx.dtype == bool:
        idx = np.nonzero(idx)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _result(np.array(out), (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        _accum(weight, full)

    return _result(weight.data[ids], (weight,), backward)


def detach(x: Tensor) -> Tensor:
    return x.detach()


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# --------------------------------------------------------- fused layers


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            _accum(
                x,
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                ),
            )

    return _result(out, (x, gain, bias), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax over empty axis, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (x,), backward)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------------ losses


class NoSupervisedPositions(ValueError):
    """Raised when a masked loss has nothing to average over."""


def masked_cross_entropy(logits: Tensor, labels, ignore_index: int = -100) -> tuple[Tensor, int]:
    """Mean negative log-likelihood over non-ignored rows.

    Returns the scalar loss and the number of supervised rows.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    rows = np.flatnonzero(labels != ignore_index)
    m = rows.size
    if m == 0:
        raise NoSupervisedPositions("no supervised positions")
    targets = labels[rows]
    v = logits.shape[1]
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError(f"label outside [0, {v})")
    logp = log_softmax_rows(logits.data[rows])
    loss = -logp[np.arange(m), targets].sum() / m

    def backward(g):
        p = np.exp(logp)
        p[np.arange(m), targets] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (float(g) / m)
        _accum(logits, full)

    return _result(np.array(loss), (logits,), backward), m


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        _accum(pred, diff * (2.0 * float(g) / n))

    return _result(np.array((diff * diff).sum() / n), (pred,), backward)


def l2_alignment(pairs: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Mean over layers of the per-token squared L2 distance.

    Within a layer the squared difference is summed over features and
    averaged over token rows. The first member of each pair is a constant.
    """
    if not pairs:
        raise ValueError("l2_alignment needs at least one layer")
    terms = []
    for f, k in pairs:
        if f.shape != k.shape:
            raise DimensionError(f"alignment pair shapes {f.shape} vs {k.shape}")
        tokens = int(np.prod(f.shape[:-1])) if f.ndim > 1 else 1
        diff = k - Tensor(f.data)
        terms.append(scale(tsum(diff * diff), 1.0 / tokens))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return scale(total, 1.0 / len(terms))


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None  # intermediates restart from zero
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def stack_sum(terms: Iterable[Tensor]) -> Tensor:
    it = iter(terms)
    total = next(it)
    for t in it:
        total = total + t
    return total
