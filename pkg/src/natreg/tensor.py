"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends one record to the active :class:`Tape`.
``backward`` replays the tape in exact reverse recording order, so no
topological sort is needed. Tapes are thread-local: independent sentences
may be processed on separate threads, each with its own tape.

Arithmetic defaults to float32. :func:`precision` switches the dtype used
for newly created tensors (the finite-difference oracle runs in float64).
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-8
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_local = threading.local()
_default_dtype = np.float32


def default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


@dataclass
class TapeEntry:
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)
    enabled: bool = True

    def record(self, output, inputs, backward) -> None:
        self.entries.append(TapeEntry(output, tuple(inputs), backward))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


def get_tape() -> Tape:
    try:
        return _local.tape
    except AttributeError:
        _local.tape = Tape()
        return _local.tape


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return constants."""
    tape = get_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data if type(data) is np.ndarray else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

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


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a tensor in the current default dtype."""
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a binary op's operands; bare scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, inputs: Iterable[Tensor], backward) -> Tensor:
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data)
    out.grad = None
    out.requires_grad = needs
    out.name = None
    if needs:
        tape.entries.append(TapeEntry(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every reachable tensor that requires grad.

    The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar, got shape {loss.shape}")
    tape = tape or get_tape()
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        grads = entry.backward(g)
        for inp, gi in zip(entry.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            # grads are never mutated in place, so aliasing is safe
            inp.grad = gi if inp.grad is None else inp.grad + gi
    tape.clear()


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(y, (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# ----------------------------------------------------------------------------
# shape
# ----------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(x.data[index]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


# ----------------------------------------------------------------------------
# linear algebra and normalisation
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, computed with max subtraction."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ContractError("softmax needs at least one column")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw)


def pick(x: Tensor, ids) -> Tensor:
    """Select ``x[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    sel = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(sel, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        red = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if bias.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(y.astype(x.dtype), (x, gain, bias), bw)


def cosine_sim(u: Tensor, v: Tensor, stop_grad_v: bool = False, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity along the last axis.

    ``u . v / (max(|u|, eps) * max(|v|, eps))``; zero vectors give 0.
    With ``stop_grad_v`` no gradient is propagated into ``v``.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1] or u.shape[-1] < 1:
        raise DimensionError(f"cosine_sim: {u.shape} vs {v.shape}")
    dot = (u.data * v.data).sum(axis=-1)
    nu_raw = np.sqrt((u.data * u.data).sum(axis=-1))
    nv_raw = np.sqrt((v.data * v.data).sum(axis=-1))
    nu = np.maximum(nu_raw, eps)
    nv = np.maximum(nv_raw, eps)
    s = dot / (nu * nv)

    def bw(g):
        gu = gv = None
        ge = g[..., None]
        if u.requires_grad:
            # norm is constant below eps
            radial = np.where(nu_raw > eps, s / nu, 0.0)[..., None]
            gu = ge * (v.data / (nu * nv)[..., None] - radial * u.data / nu[..., None])
        if v.requires_grad and not stop_grad_v:
            radial = np.where(nv_raw > eps, s / nv, 0.0)[..., None]
            gv = ge * (u.data / (nu * nv)[..., None] - radial * v.data / nv[..., None])
        return gu, gv

    inputs = (u, v) if not stop_grad_v else (u, v.detach())
    return _make(np.asarray(s, dtype=u.dtype), inputs, bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# finite-difference oracle
# ----------------------------------------------------------------------------


def _scalar(out) -> float:
    if isinstance(out, Tensor):
        out = out.data
    out = np.asarray(out)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients of ``f`` at ``x``."""
    return grad_check_many(lambda: f(x), [x], step)


def grad_check_many(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` for a closure over several tensors.

    ``max_elements`` limits the number of probed entries per tensor (sampled
    with ``rng``); by default every entry is probed.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    tape = get_tape()
    tape.clear()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    _scalar(out)
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = _scalar(f())
                flat[i] = orig - step
                fm = _scalar(f())
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                a = float(ga.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    for p, s in zip(params, saved):
        p.requires_grad = s
        p.grad = None
    return worst
