"""Dense tensors with reverse-mode automatic differentiation on a tape.

Tensors wrap row-major numpy arrays (float32 for training, float64 for
gradient checks).  Operations executed while a Tape is active record a
backward rule; Tape.backward replays the rules in reverse recording order,
which is a valid topological order by construction.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, ShapeError, StateError

Scalar = Union[int, float]

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


class Tensor:
    """A dense array plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def accumulate_grad(self, g: np.ndarray):
        # copy-on-write: a first contribution may alias an upstream buffer,
        # so only accumulate in place once this tensor owns its grad array
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif not self._grad_owned:
            self.grad = self.grad + g
            self._grad_owned = True
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations.

    Every recorded node's inputs were recorded (or are leaves) before the
    node itself, so reverse replay visits consumers before producers.
    A tape can run backward exactly once; a second call raises StateError.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._active[-1] if cls._active else None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self._nodes.append((out, inputs, backward))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Populate grad fields of every grad-requiring tensor reachable from loss."""
        if self._consumed:
            raise StateError("tape already ran backward; build a fresh tape per step")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        loss._grad_owned = True
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is not None and inp.requires_grad:
                    inp.accumulate_grad(g)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach `grad.shape` from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                           _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    if ad.ndim > 2 and bd.ndim == 2:
        # linear-layer case: collapse the batch so BLAS sees one big gemm
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = Tensor((a2 @ bd).reshape(lead + (bd.shape[1],)))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record(out, (a, b), backward)

    out = Tensor(np.matmul(ad, bd))

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximate GELU, elementwise."""
    x = a.data
    x2 = x * x
    inner = x2 * 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    t = np.tanh(inner)
    res = t + 1.0
    res *= x
    res *= 0.5
    out = Tensor(res)

    def backward(g):
        dinner = x2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        dx = 1.0 - t * t
        dx *= x * dinner
        dx += 1.0 + t
        dx *= 0.5
        return (g * dx,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(a.data.transpose(axes))
    inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: out[i] = table[ids[i]] (gradient scatter-adds)."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backward)


def select_positions(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one sequence position per batch row: out[i] = a[i, idx[i], :]."""
    idx = np.asarray(idx)
    batch = np.arange(a.data.shape[0])
    out = Tensor(a.data[batch, idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[batch, idx] = g
        return (ga,)

    return _record(out, (a,), backward)


def gather_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor (log-prob of the true class)."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# neural-net specific ops


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of x / temperature, with max subtraction."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot) / temperature,)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Numerically stable log-softmax over the last axis of x / temperature."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    zmax = z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    out = Tensor(z - logsum)
    p = np.exp(out.data)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm parameter shapes {gain.data.shape}/{bias.data.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes)
        gbias = g.sum(axis=axes)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at p=0."""
    if not (0.0 <= p < 1.0):
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise DomainError("training-mode dropout needs a seeded rng")
    dt = x.data.dtype
    keep = (rng.random(x.data.shape, dtype=dt if dt == np.float32 else np.float64) >= p)
    mask = keep.astype(dt)
    mask *= np.asarray(1.0 / (1.0 - p), dtype=dt)
    out = Tensor(x.data * mask)
    return _record(out, (x,), lambda g: (g * mask,))


def l2_normalize(x: Tensor) -> Tensor:
    """Scale vectors along the last axis to unit Euclidean norm."""
    sq = tsum(mul(x, x), axis=-1, keepdims=True)
    return div(x, sqrt(sq))


def assert_finite(t: Tensor, what: str = "tensor"):
    if not np.isfinite(t.data).all():
        raise DomainError(f"{what} contains NaN/Inf")
