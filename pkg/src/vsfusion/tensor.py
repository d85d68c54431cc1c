"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`GradTape` is active and
any input requires a gradient, the operation appends a record (output, inputs,
vector-Jacobian product) to the tape. ``GradTape.gradient`` walks the records
in reverse, which is a valid topological order because records are appended
in execution order.

Outside a tape nothing is recorded, so inference pays no bookkeeping cost.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DimensionError",
    "tensor",
    "backward",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "square",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "sum",
    "mean",
    "std",
    "reduce_mean_std",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "clamp_min",
    "pick",
    "dense",
    "conv1d_k1",
    "lstm_seq",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d array of doubles.

    ``Tensor(data)`` validates its input (finite values, positive extents).
    Results of operations skip that check.
    """

    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out._tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise DimensionError(f"expected a single element, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


class GradTape:
    """Records primitive applications for one backward pass.

    Use as a context manager::

        with GradTape() as tape:
            loss = model(params)
        grads = tape.gradient(loss, params)

    A tape can be differentiated once. A second ``gradient`` call raises,
    so training loops never silently accumulate stale gradients.
    """

    def __init__(self, watch: Iterable[Tensor] = ()):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._watched: dict[int, Tensor] = {}
        self._used = False
        self.watch(*watch)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            self._watched[id(t)] = t

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is None and id(t) not in self._watched:
                # user-created leaf seen for the first time
                self._watched[id(t)] = t
        out._tape = self
        self.records.append((out, inputs, vjp))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradient of scalar ``loss`` w.r.t. ``sources`` (default: all leaves seen).

        Sources that did not influence ``loss`` get exact zeros.
        """
        if self._used:
            raise RuntimeError("gradient() already called on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape (detached graph)")
        self._used = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        if sources is None:
            sources = list(self._watched.values())
        result = {}
        for s in sources:
            g = grads.get(id(s))
            result[s] = np.zeros_like(s.data) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape)
        self.records = []
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of ``loss`` for every leaf on the tape that recorded it."""
    if loss.data.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss is not attached to any gradient tape")
    return loss._tape.gradient(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, requires_grad=True)
        tape._record(out, inputs, vjp)
        return out
    return Tensor._wrap(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient is blocked where the floor is active."""
    a = _as_tensor(a)
    keep = a.data > lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    a = _as_tensor(a)
    out = _softmax(a.data, axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


# --- reductions and shape ----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def _exact_mean(x: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    """``x.mean`` except that constant slices return their value exactly.

    Summing n equal values and dividing by n can be off by an ulp, which
    would make the spread of identical rows a tiny nonzero number.
    """
    mu = x.mean(axis=axis, keepdims=keepdims)
    if x.size:
        hi = x.max(axis=axis, keepdims=keepdims)
        mu = np.where(hi == x.min(axis=axis, keepdims=keepdims), hi, mu)
    return mu


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise DimensionError("mean over an empty axis")
    out = _exact_mean(a.data, axis, keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), vjp)


def std(a, axis: int = 0) -> Tensor:
    """Population standard deviation along ``axis``.

    Where the spread is exactly zero the derivative is taken as zero (the
    one-sided limit is unbounded, but every row equals the mean there).
    """
    a = _as_tensor(a)
    n = a.shape[axis]
    if n == 0:
        raise DimensionError("std over an empty axis")
    centered = a.data - _exact_mean(a.data, axis, True)
    out = np.sqrt((centered * centered).mean(axis=axis))

    def vjp(g):
        s = np.expand_dims(out, axis)
        safe = np.where(s > 0, s, 1.0)
        scale = np.where(s > 0, np.expand_dims(g, axis) / (n * safe), 0.0)
        return (centered * scale,)

    return _make(out, (a,), vjp)


def reduce_mean_std(a, axis: int = 0) -> tuple[Tensor, Tensor]:
    """Per-column population mean and standard deviation along ``axis``."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("empty reduction")
    return mean(a, axis=axis), std(a, axis=axis)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _make(out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pick(a, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` for every row of a 2-d tensor."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), vjp)


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), vjp)


def dense(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis of ``x``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"dense shape mismatch: x{x.shape}, W{w.shape}, b{b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(lead + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), vjp)


def conv1d_k1(x, w, b) -> Tensor:
    """Kernel-size-1 convolution along time: the same affine map at every step."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"conv1d_k1 expects (..., T, C_in), got {x.shape}")
    return dense(x, w, b)


def lstm_seq(x, w_x, w_h, b, h0=None, c0=None) -> Tensor:
    """Run an LSTM over ``x`` and return every hidden state.

    Args:
        x: (T, I) or (B, T, I) input sequence.
        w_x: (I, 4U) input weights, gate blocks ordered input, forget, cell, output.
        w_h: (U, 4U) recurrent weights.
        b: (4U,) bias.
        h0, c0: initial states, (U,) or (B, U); zeros when omitted.

    Returns:
        Hidden states with the same leading layout as ``x``: (T, U) or (B, T, U).
    """
    x, w_x, w_h, b = (_as_tensor(t) for t in (x, w_x, w_h, b))
    squeeze = x.ndim == 2
    X = x.data[None] if squeeze else x.data
    if X.ndim != 3:
        raise DimensionError(f"lstm_seq expects (T, I) or (B, T, I), got {x.shape}")
    B, T, I = X.shape
    U = w_h.shape[0]
    if w_x.shape != (I, 4 * U) or w_h.shape != (U, 4 * U) or b.shape != (4 * U,):
        raise DimensionError(
            f"lstm_seq parameter shapes inconsistent: x{x.shape}, W_x{w_x.shape}, "
            f"W_h{w_h.shape}, b{b.shape}")
    h0 = _as_tensor(np.zeros(U) if h0 is None else h0)
    c0 = _as_tensor(np.zeros(U) if c0 is None else c0)
    H0 = np.broadcast_to(h0.data, (B, U))
    C0 = np.broadcast_to(c0.data, (B, U))

    Zx = (X.reshape(B * T, I) @ w_x.data).reshape(B, T, 4 * U) + b.data
    gates = np.empty((B, T, 4 * U))
    cells = np.empty((B, T, U))
    hs = np.empty((B, T, U))
    h, c = H0, C0
    for t in range(T):
        z = Zx[:, t] + h @ w_h.data
        i = _sigmoid(z[:, :U])
        f = _sigmoid(z[:, U:2 * U])
        g = np.tanh(z[:, 2 * U:3 * U])
        o = _sigmoid(z[:, 3 * U:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :U], gates[:, t, U:2 * U] = i, f
        gates[:, t, 2 * U:3 * U], gates[:, t, 3 * U:] = g, o
        cells[:, t], hs[:, t] = c, h

    def vjp(gH):
        gH = gH[None] if squeeze else gH
        dZ = np.empty((B, T, 4 * U))
        dh_next = np.zeros((B, U))
        dc_next = np.zeros((B, U))
        for t in reversed(range(T)):
            i, f = gates[:, t, :U], gates[:, t, U:2 * U]
            g, o = gates[:, t, 2 * U:3 * U], gates[:, t, 3 * U:]
            c_prev = cells[:, t - 1] if t > 0 else C0
            tc = np.tanh(cells[:, t])
            dh = gH[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dZ[:, t]
            dz[:, :U] = dc * g * i * (1.0 - i)
            dz[:, U:2 * U] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * U:3 * U] = dc * i * (1.0 - g * g)
            dz[:, 3 * U:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ w_h.data.T
        dZ2 = dZ.reshape(B * T, 4 * U)
        gx = (dZ2 @ w_x.data.T).reshape(X.shape) if x.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        gwx = X.reshape(B * T, I).T @ dZ2 if w_x.requires_grad else None
        if w_h.requires_grad:
            H_prev = np.concatenate([H0[:, None], hs[:, :-1]], axis=1).reshape(B * T, U)
            gwh = H_prev.T @ dZ2
        else:
            gwh = None
        gb = dZ2.sum(axis=0) if b.requires_grad else None
        gh0 = _unbroadcast(dh_next, h0.shape) if h0.requires_grad else None
        gc0 = _unbroadcast(dc_next, c0.shape) if c0.requires_grad else None
        return gx, gwx, gwh, gb, gh0, gc0

    out = hs[0] if squeeze else hs
    return _make(out, (x, w_x, w_h, b, h0, c0), vjp)


# --- oracle ------------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0.copy()))
        flat[i] = orig - h
        fm = float(f(x0.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
