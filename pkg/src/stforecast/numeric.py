"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly and, when any input needs a gradient,
records a closure that maps the output gradient back onto its inputs.
``Tensor.backward`` walks that graph in reverse topological order.

The fused ops (``conv2d_same``, ``softmax``, ``lstm_cell``) carry hand
derived backward passes; ``grad_check`` is the finite-difference oracle
that keeps them honest.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An op or layer was configured with unsupported settings."""


class NumericError(ArithmeticError):
    """A value that must be finite is not."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-d float64 array that remembers how it was produced."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(param) into every reachable ``Param.grad``."""
        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Param):
                node.grad += g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Param(Tensor):
    """A learnable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def where(condition, a, b) -> Tensor:
    """Select ``a`` where ``condition`` holds, else ``b``; gradients route likewise."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(condition, dtype=bool)
    try:
        out = np.where(cond, a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"where: shapes {cond.shape}, {a.shape}, {b.shape} do not broadcast"
        ) from None
    zero = np.zeros((), dtype=DTYPE)
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tuple(ts), backward)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    pieces = []
    start = 0
    ax = axis % a.ndim
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[ax] = slice(start, start + n)
        pieces.append(getitem(a, tuple(index)))
        start += n
    return pieces


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack needs at least one tensor")
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: shapes {[t.shape for t in ts]} differ") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(ts), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``a`` is [..., k] and ``b`` is [k, n] (or [k])."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = (a.data.reshape(-1, a.shape[-1]) * g.reshape(-1, 1)).sum(axis=0)
            return ga, gb
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# fused ops
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # x: [N, H, W, C] -> [N, H, W, k*k*C] for a zero-padded "same" window
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # windows: [N, H, W, C, k, k] -> [N, H, W, k, k, C]
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(
        x.shape[0], x.shape[1], x.shape[2], k * k * x.shape[3]
    )


def conv2d_same(x, kernel, bias) -> Tensor:
    """Zero-padded "same" cross-correlation.

    Args:
        x: input of shape [H, W, Cin] or [N, H, W, Cin].
        kernel: [k, k, Cin, Cout], ``k`` odd.
        bias: [Cout].

    Returns:
        Tensor shaped like ``x`` with ``Cout`` channels.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d_same: kernel must be [k, k, Cin, Cout], got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d_same: kernel size must be odd, got {k}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d_same: bias {bias.shape} does not match Cout={cout}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[-1] != cin:
        raise DimensionError(f"conv2d_same: input {x.shape} does not match kernel {kernel.shape}")
    n, h, w, _ = xd.shape
    cols = _im2col(xd, k)
    wmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols.reshape(-1, k * k * cin) @ wmat).reshape(n, h, w, cout) + bias.data
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        g2 = g4.reshape(-1, cout)
        gk = (cols.reshape(-1, k * k * cin).T @ g2).reshape(kernel.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, h, w, k, k, cin)
            pad = (k - 1) // 2
            gxp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=DTYPE)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + h, dj:dj + w, :] += gcols[:, :, :, di, dj, :]
            gx = gxp[:, pad:pad + h, pad:pad + w, :]
            if single:
                gx = gx[0]
        return gx, gk, gb

    return _make(out, (x, kernel, bias), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    a = as_tensor(a)
    if a.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def lstm_cell(x, hc, w_input, w_hidden, bias, valid=None) -> Tensor:
    """One LSTM step on a batch, with per-row skipping.

    The recurrent state is carried as a single tensor ``hc = [h ; c]`` of
    shape [B, 2d]. Gate order in the fused weights is input, forget,
    output, candidate. Rows where ``valid`` is False return ``hc``
    unchanged and pass gradients straight through to it.

    Args:
        x: [B, p] inputs.
        hc: [B, 2d] previous hidden and cell state.
        w_input: [p, 4d].
        w_hidden: [d, 4d].
        bias: [4d].
        valid: optional bool array [B].

    Returns:
        [B, 2d] next ``[h ; c]``.
    """
    x, hc = as_tensor(x), as_tensor(hc)
    w_input, w_hidden, bias = as_tensor(w_input), as_tensor(w_hidden), as_tensor(bias)
    d = w_hidden.shape[0]
    if (
        x.ndim != 2
        or hc.shape != (x.shape[0], 2 * d)
        or w_input.shape != (x.shape[1], 4 * d)
        or w_hidden.shape != (d, 4 * d)
        or bias.shape != (4 * d,)
    ):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, state {hc.shape}, W_x {w_input.shape}, "
            f"W_h {w_hidden.shape}, b {bias.shape} are inconsistent"
        )
    keep = None
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).reshape(-1)
        if keep.shape[0] != x.shape[0]:
            raise DimensionError(f"lstm_cell: valid has {keep.shape[0]} rows, batch has {x.shape[0]}")
        if keep.all():
            keep = None
    # skipped rows never touch their input, so garbage there cannot leak
    xd = x.data if keep is None else np.where(keep[:, None], x.data, 0.0)
    h_prev = hc.data[:, :d]
    c_prev = hc.data[:, d:]
    z = xd @ w_input.data + h_prev @ w_hidden.data + bias.data
    i = _sigmoid(z[:, :d])
    f = _sigmoid(z[:, d:2 * d])
    o = _sigmoid(z[:, 2 * d:3 * d])
    u = np.tanh(z[:, 3 * d:])
    c = f * c_prev + i * u
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=1)
    if keep is not None:
        out = np.where(keep[:, None], out, hc.data)

    def backward(g):
        gh = g[:, :d]
        gc_out = g[:, d:]
        if keep is not None:
            skip = ~keep[:, None]
            g_pass = np.where(skip, g, 0.0)
            gh = np.where(skip, 0.0, gh)
            gc_out = np.where(skip, 0.0, gc_out)
        gc = gc_out + gh * o * (1.0 - tc * tc)
        gz = np.concatenate(
            [
                gc * u * i * (1.0 - i),
                gc * c_prev * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                gc * i * (1.0 - u * u),
            ],
            axis=1,
        )
        ghc = np.concatenate([gz @ w_hidden.data.T, gc * f], axis=1)
        if keep is not None:
            ghc = ghc + g_pass
        return gz @ w_input.data.T, ghc, xd.T @ gz, h_prev.T @ gz, gz.sum(axis=0)

    return _make(out, (x, hc, w_input, w_hidden, bias), backward)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _scalar_value(out) -> float:
    if isinstance(out, Tensor):
        if out.size != 1:
            raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
        return float(out.data.reshape(()))
    return float(out)


def grad_check(fn: Callable[[], Tensor], params: Sequence[Param], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` is called with no arguments and must read ``params`` as they
    currently stand. Parameter values are restored afterwards.
    """
    if not 0.0 < eps <= 1e-3:
        raise ConfigurationError(f"grad_check: eps must lie in (0, 1e-3], got {eps}")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"grad_check: parameter {p.name!r} is not finite")
    zero_grads(params)
    out = fn()
    if not math.isfinite(_scalar_value(out)):
        names = ", ".join(repr(p.name) for p in params)
        raise NumericError(f"grad_check: function value is not finite at the base point of {names}")
    out.backward()
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad.copy()
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                f_plus = _scalar_value(fn())
                flat[j] = orig - eps
                f_minus = _scalar_value(fn())
                flat[j] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"grad_check: non-finite value perturbing {p.name!r}[{j}]")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic.reshape(-1)[j]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    zero_grads(params)
    return worst
