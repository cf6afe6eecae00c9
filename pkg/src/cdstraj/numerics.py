"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learnable weight lives in a :class:`ParamStore`. A forward pass binds
the store to a :class:`Tape` (``params.bind(tape)``), runs ordinary tensor
ops, and :func:`backward` replays the recorded adjoints in reverse order,
accumulating into ``params.grads``. Binding with ``tape=None`` gives
constant tensors and records nothing, which is how inference runs.

Ops accept numpy broadcasting over leading (batch) axes so a whole batch of
scenes goes through one tape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, DimensionError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "tape")
    # make ndarray (op) Tensor dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = "" if self.tape is None else ", taped"
        return f"Tensor(shape={self.shape}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: dict[int, tuple[str, Tensor]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, self)
        self.leaves[id(t)] = (name, t)
        return t

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        self.nodes.append((out, parents, fn))


class ParamStore:
    """Named float64 arrays plus same-shaped gradient slots."""

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        self.entries: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        self.entries[name] = np.array(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.entries[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def num_values(self) -> int:
        return int(np.sum([v.size for v in self.entries.values()]))

    def zero_grad(self) -> None:
        for name, value in self.entries.items():
            self.grads[name] = np.zeros_like(value)

    def bind(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {name: Tensor(value) for name, value in self.entries.items()}
        return {name: tape.leaf(name, value) for name, value in self.entries.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.entries.items():
            out.entries[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def subset(self, prefixes: Iterable[str]) -> list[str]:
        prefixes = tuple(prefixes)
        return [n for n in self.entries if n.startswith(prefixes)]


# ----------------------------------------------------------------------------
# op plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("tensors from two different tapes mixed in one op")
            tape = t.tape
    return tape


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = _tape_of(*parents)
    out = Tensor(data, tape)
    if tape is not None:
        tape.record(out, parents, fn)
    return out


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


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free and odd-symmetric, so s(x) + s(-x) == 1 to rounding
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data >= 0.0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back)


def linear(x, W, b=None) -> Tensor:
    """``x @ W (+ b)`` for x of shape [..., p], W [p, q], b [q]."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear shape mismatch: x {x.shape} vs W {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    parents: tuple[Tensor, ...] = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear bias shape {b.shape} does not match W {W.shape}")
        out = out + b.data
        parents = (x, W, b)
    p, q = Wd.shape

    def back(g):
        g2 = g.reshape(-1, q)
        gW = xd.reshape(-1, p).T @ g2
        gx = g @ Wd.T
        if len(parents) == 3:
            return gx, gW, g2.sum(axis=0)
        return gx, gW

    return _make(out, parents, back)


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(a.data[index], (a,), back)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, back)


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` (broadcastable to x, truthy = keep) gives excluded entries exactly
    zero weight; a row with every entry excluded comes out all zero.
    """
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    xd = x.data
    if mask is None:
        shifted = xd - xd.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        masked = np.where(keep, xd, -np.inf)
        row_max = masked.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.where(keep, np.exp(np.where(keep, xd, 0.0) - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / np.where(denom > 0.0, denom, 1.0)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), back)


# ----------------------------------------------------------------------------
# gradients


def backward(loss: Tensor, tape: Tape | None = None, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) into ``params.grads`` (``+=``).

    Parameters that the loss does not reach receive nothing, so after a
    ``zero_grad`` their slots stay zero. Returns the per-name gradients of
    this call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss.tape
    found: dict[str, np.ndarray] = {}
    if tape is None or loss.tape is not tape:
        if params is not None:
            for name, value in params.entries.items():
                found[name] = np.zeros_like(value)
        return found
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if parent.tape is None or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for key, (name, leaf) in tape.leaves.items():
        g = grads.get(key)
        found[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
    if params is not None:
        for name, g in found.items():
            if name in params.grads:
                params.grads[name] = params.grads[name] + g
    return found


def finite_diff_gradcheck(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    details: dict | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` maps a bound parameter dict to a scalar Tensor, or to a tuple
    of scalar Tensors whose sum is the loss, and must be deterministic. Terms
    are differenced separately, which keeps a small term's derivative from
    drowning in the round-off of a large one. Relative error is
    ``|a - b| / max(|a|, |b|, 1e-8)``. If ``details`` is given it is filled
    with the worst error per name.
    """
    names = list(params.entries) if names is None else list(names)

    def terms(P) -> list[Tensor]:
        out = loss_fn(P)
        return list(out) if isinstance(out, (tuple, list)) else [out]

    def value() -> np.ndarray:
        return np.array([float(t.data) for t in terms(params.bind(None))])

    base = value()
    if not np.array_equal(value(), base):
        raise DeterminismError("loss function returned different values for identical parameters")

    tape = Tape()
    parts = terms(params.bind(tape))
    loss = parts[0]
    for t in parts[1:]:
        loss = add(loss, t)
    analytic = backward(loss, tape)

    worst = 0.0
    for name in names:
        arr = params.entries[name]
        flat = arr.reshape(-1)
        ga = analytic.get(name, np.zeros_like(arr)).reshape(-1)
        name_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = float(np.sum(fp - fm)) / (2.0 * h)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            name_worst = max(name_worst, err)
        if details is not None:
            details[name] = name_worst
        worst = max(worst, name_worst)
    return worst


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
