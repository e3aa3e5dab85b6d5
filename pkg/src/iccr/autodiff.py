"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient. ``backward`` walks the tape in reverse
and accumulates vector-Jacobian products.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, w))
    >>> grads = backward(loss, tape)
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5

_local = threading.local()


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Tape:
    """Ordered record of primitive applications.

    Each record is ``(output, inputs, vjp)`` where ``vjp`` maps the output
    cotangent to a tuple of input cotangents (``None`` for inputs that do not
    need one). Records are appended in execution order, so every input
    precedes the record that consumes it.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"{name} produced non-finite values")


def _emit(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(name, out)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.records.append((result, tuple(inputs), vjp))
    return result


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


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GPT-2 flavoured GELU (tanh approximation)."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * v * (1.0 + 0.044715 * v * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (x,), vjp)


_POINTWISE = {"gelu": gelu, "tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul}


def pointwise(kind: str, *args) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(*args)


def softmax_causal(logits) -> Tensor:
    """Row-wise softmax over the last axis restricted to columns <= row.

    Works on any tensor whose last two axes are square (batched attention).
    Masked entries are exactly zero.
    """
    x = as_tensor(logits)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"softmax_causal needs square trailing axes, got {x.shape}")
    T = x.shape[-1]
    mask = np.tril(np.ones((T, T), dtype=bool))
    masked = np.where(mask, x.data, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax_causal", out, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    D = x.shape[-1]
    if D < 1 or gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(f"layer_norm: gain/bias must be ({D},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis), 1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def vjp(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        if basic:  # no repeated positions, plain assignment suffices
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(x.data[index]), (x,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit("stack", out, ts, vjp)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a mapping from tensor to gradient. When ``params`` is given the
    mapping holds exactly those tensors, with zeros for any not reachable from
    the loss; otherwise it holds every gradient-requiring leaf that was reached.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(rec[0] is loss for rec in tape.records):
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    produced: set[int] = set()
    for out, inputs, vjp in reversed(tape.records):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            seen[key] = inp

    if params is None:
        return {seen[k]: v for k, v in grads.items() if k in seen and k not in produced}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + floor)``. The floor keeps
    exactly-zero gradients (key biases under softmax, say) from turning
    finite-difference rounding noise into an O(1) relative error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    analytic = backward(y, tape, [x])[x]

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(Tensor(base)).data)
        flat[i] = orig - step
        fm = float(fn(Tensor(base)).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + floor)
    return float(err.max()) if err.size else 0.0
