"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one record (output, inputs, adjoint rule)
to the active :class:`Tape`.  Forward order is already a topological order, so
:func:`backward` simply replays the records in reverse.  Parameters are leaves;
their gradients accumulate in ``Parameter.grad``.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
0-d scalar operand.  Anything else must go through :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, LabelError

TAGS = ("Visual", "Textual", "Shared", "Head")

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

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
            raise ContractError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """A trainable leaf tensor with a fixed modality tag."""

    def __init__(self, data, tag: str, name: str = ""):
        if tag not in TAGS:
            raise ConfigError(f"unknown modality tag {tag!r}; expected one of {TAGS}")
        super().__init__(data, requires_grad=True)
        self._tag = tag
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def tag(self) -> str:
        return self._tag

    @property
    def value(self) -> np.ndarray:
        return self.data

    def resize(self, data: np.ndarray) -> None:
        """Replace the value with a new array (head expansion); grad is reset."""
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, tag={self.tag})"


@dataclass
class Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP
    op: str


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []
        self._outputs: set[int] = set()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP, op: str) -> None:
        self.records.append(Record(out, inputs, vjp, op))
        self._outputs.add(id(out))

    def holds(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def touches(self, t: Tensor) -> bool:
        """True if ``t`` is an input or output of any record."""
        key = id(t)
        return key in self._outputs or any(key == id(i) for r in self.records for i in r.inputs)

    def clear(self) -> None:
        self.records.clear()
        self._outputs.clear()


_tape = Tape()
_grad_enabled = True


def current_tape() -> Tape:
    return _tape


def new_tape() -> Tape:
    """Discard any recorded graph and start a fresh tape."""
    global _tape
    _tape = Tape()
    return _tape


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP, op: str) -> Tensor:
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _tape.record(out, inputs, vjp, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


# --------------------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def relu(x: Tensor) -> Tensor:
    gate = (x.data > 0).astype(np.float64)
    return _make(x.data * gate, (x,), lambda g: (g * gate,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, tanh."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "tanh": tanh}
    try:
        fn = table[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} disagree") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp, "softmax")


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if t.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {t.shape[0]} targets")
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= c))
    if bad.any():
        raise LabelError(f"target index {int(t[bad][0])} out of range for {c} classes")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise LabelError("cross_entropy: no non-ignored targets")
    rows = np.nonzero(valid)[0]
    lsm = log_softmax_array(logits.data, axis=1)
    loss = -lsm[rows, t[rows]].sum() / n_valid

    def vjp(g):
        grad = np.exp(lsm)
        grad[rows, t[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / n_valid),)

    return _make(np.asarray(loss), (logits,), vjp, "cross_entropy")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _make(np.array(x.data[idx]), (x,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} ({e})") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, vjp, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast (the only route to non-scalar broadcasting)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (_unbroadcast(g, src).reshape(src),), "broadcast_to")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise LabelError(f"embedding id out of range [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, ids, g)
        return (z,)

    return _make(table.data[ids], (table,), vjp, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply learnable gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make(out, (x, gain, bias), vjp, "layer_norm")


def l2norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as 0."""
    n = np.sqrt((x.data * x.data).sum(axis=axis))
    xd = x.data

    def vjp(g):
        nn = np.expand_dims(n, axis)
        safe = np.where(nn > 0, nn, 1.0)
        return (np.where(nn > 0, xd / safe, 0.0) * np.expand_dims(g, axis),)

    return _make(n, (x,), vjp, "l2norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, broadcast_to(b, y.shape))
    return y


# ---------------------------------------------------------------- differentiation


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every Parameter reachable from ``loss`` via the tape.

    Parameters not reached keep whatever grad they had (zero after ``sgd_step``).
    The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape
    if not loss.requires_grad:
        tape.clear()
        return
    if not tape.holds(loss):
        raise ContractError("loss was not produced on the current tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                adj[key] = adj[key] + gi if key in adj else gi
    tape.clear()


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def sgd_step(
    params: Iterable[Parameter],
    lr: float,
    scale_by_tag: Mapping[str, float] | None = None,
) -> None:
    """value <- value - lr * scale(tag) * grad, then zero the grads."""
    if not (lr > 0 and math.isfinite(lr)):
        raise ConfigError(f"learning rate must be positive, got {lr}")
    scales = dict(scale_by_tag or {})
    for tag, s in scales.items():
        if not (math.isfinite(s) and 0.0 < s <= 1.0):
            raise ConfigError(f"scale for {tag} must lie in (0, 1], got {s}")
    for p in params:
        step = lr * p.grad
        s = scales.get(p.tag, 1.0)
        if s != 1.0:
            step = s * step
        p.data -= step
        p.grad[...] = 0.0
