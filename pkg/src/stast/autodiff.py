"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation appends one record to the active
:class:`GradientTape`; :func:`backward` replays the tape in reverse order and
accumulates gradients into every tensor that requires them.  Arrays are plain
numpy; the global precision switch selects float64 (oracle/test mode) or
float32 (training mode).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_DTYPES = {"float64": np.float64, "float32": np.float32}
_state = {"dtype": np.float64, "grad_enabled": True}


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


def set_precision(name: str) -> None:
    """Select ``"float64"`` or ``"float32"`` for every tensor created afterwards."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype():
    return _state["dtype"]


def precision_name() -> str:
    return "float64" if _state["dtype"] is np.float64 else "float32"


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class Rng:
    """Seeded random stream; same seed and call sequence give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size):
        return self._gen.uniform(low, high, size)

    def normal(self, loc, scale, size):
        return self._gen.normal(loc, scale, size)

    def random(self, size):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        # inclusive upper bound
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


class GradientTape:
    """Ordered record of executed operations.

    ``generation`` increases every time the tape is consumed by a backward
    pass; tensors remember the generation they were recorded in, which is how
    a second backward over an already-replayed graph is detected.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self.generation = 0

    def record(self, out: "Tensor", parents: tuple, fn: Callable) -> None:
        self.records.append((out, parents, fn))

    def clear(self) -> None:
        self.records = []
        self.generation += 1

    def __len__(self):
        return len(self.records)


_tape = GradientTape()


def active_tape() -> GradientTape:
    return _tape


def reset_tape() -> None:
    _tape.clear()


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is None:
        dtype = _state["dtype"]
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_generation", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._generation = _tape.generation

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self) -> int:
        return self._generation

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    """Wrap an op result; record it on the tape if any parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._generation = _tape.generation
    needs = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        _tape.record(out, parents, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring ancestor of ``loss``.

    The tape is consumed: a second call on the same graph raises
    :class:`TapeStateError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._generation != _tape.generation:
        raise TapeStateError("gradient tape for this loss was already consumed; run a fresh forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring gradients")
    loss.grad = np.ones_like(loss.data)
    for out, parents, fn in reversed(_tape.records):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for parent, g in zip(parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
    _tape.clear()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def where(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``cond`` holds, a constant elsewhere (no gradient there)."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, x.data, np.asarray(fill, dtype=x.data.dtype))
    return _make(out.astype(x.data.dtype, copy=False), (x,),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), x.shape),))


# ------------------------------------------------------------------ reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * p,))


# --------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    advanced = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def fn(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)
    return _make(out, tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def pad_axis(x: Tensor, length: int, axis: int = 1) -> Tensor:
    """Zero-pad (or keep) ``x`` along ``axis`` up to ``length``."""
    cur = x.shape[axis]
    if cur == length:
        return x
    if cur > length:
        raise DimensionError(f"cannot pad axis of size {cur} down to {length}")
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, length - cur)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, cur)
    sl = tuple(sl)
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


# ---------------------------------------------------------------- linear alg

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; leading axes are flattened for BLAS."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, fn)


# ----------------------------------------------------------- nn primitives

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    return _make(out, (x,),
                 lambda g: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the looked-up rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size:
        bad = np.flatnonzero((ids.reshape(-1) < 0) | (ids.reshape(-1) >= n))
        if bad.size:
            pos = int(bad[0])
            raise IndexError(f"token id {int(ids.reshape(-1)[pos])} at position {pos} "
                             f"out of range for table with {n} rows")
    out = table.data[ids] if ids.size else np.zeros(ids.shape + (table.shape[1],), table.data.dtype)

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), fn)


def gather_rows(x: Tensor, batch_idx: np.ndarray, row_idx: np.ndarray) -> Tensor:
    """``out[b, j] = x[batch_idx[b, j], row_idx[b, j]]`` for a B x T x d input."""
    return index(x, (batch_idx, row_idx))


def dropout(x: Tensor, rate: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout; identity at rate 0 or outside training."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)
    return _make(out, (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over unmasked positions.

    ``logits`` is ``(..., C)`` with ``targets``/``mask`` shaped like the leading
    axes.  Masked positions contribute nothing to the value or the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(f"cross-entropy shapes disagree: logits {logits.shape}, "
                             f"targets {targets.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateBatchError("all positions are masked")
    m = np.max(logits.data, axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, np.where(mask, targets, 0)[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * mask).sum() / n, dtype=logits.data.dtype)

    def fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.where(mask, targets, 0)[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (g / n)),)

    return _make(out, (logits,), fn)


# ------------------------------------------------------------------ helpers

def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numeric_gradient(f: Callable[[], float], x: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` with respect to ``x.data``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error scaled by the gradient magnitude.

    The scale is floored at 1e-6 so that a gradient which is identically zero
    (e.g. a key bias under softmax) is judged by absolute error instead of by
    central-difference roundoff divided by almost nothing.
    """
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-6)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    rate = np.exp(-math.log(10000.0) * (2 * (i // 2)) / d_model)
    angle = pos * rate
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
