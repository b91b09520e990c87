"""Small dense tensor library with tape-based reverse-mode gradients.

Every trainable computation in the recommender is expressed with the ops in
this module.  Values are float64 numpy arrays.  Gradients are only recorded
while a :class:`Tape` is active on the current thread; outside a tape the ops
run as plain numpy code, which is what inference uses.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands do not have conforming shapes."""


class DomainError(ValueError):
    """Input is outside the domain of an operation (empty, NaN, ...)."""


class InvariantError(RuntimeError):
    """An internal contract was violated."""


_local = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, kept to what the model code actually uses
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records backward closures of ops executed while it is active.

    Use as a context manager; the tape is thread-local so independent tapes
    can run in separate threads.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) into ``grad`` of every leaf that requires it.

        Leaf gradients accumulate (``+=``); intermediate gradients are scratch.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # what is left are leaves (parameters / inputs marked requires_grad)
        leaves = {id(t): t for _, inputs, _ in self._nodes for t in inputs}
        leaves[id(loss)] = loss
        for key, g in grads.items():
            t = leaves[key]
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
            else:
                t.grad += g


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    tape = _current_tape()
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot combine {a.shape} and {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot combine {a.shape} and {b.shape}") from e
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------- products


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0 if b.data.ndim == 1 else -2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(list(range(ad.ndim - 1)), list(range(g.ndim))))
            return ga, gb
        if ad.ndim == 1:
            ga = g @ bd.T
            gb = np.outer(ad, g)
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(data, (a, b), backward)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b``; ``x`` may carry leading batch axes."""
    x, W = as_tensor(x), as_tensor(W)
    if W.data.ndim != 2 or x.data.ndim == 0 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input x{x.shape} does not conform to weight W{W.shape}")
    y = matmul(x, W)
    if b is None:
        return y
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias b{b.shape} does not match weight W{W.shape}")
    return add(y, b)


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last axes differ, {a.shape} vs {b.shape}")
    return sum_(mul(a, b), axis=-1)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with gradients.

    Every index of an operand must appear in the other operand or the output.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(c not in other and c not in out for c in s):
            raise ShapeError(f"einsum: unsupported reduction in {subscripts!r}")
    try:
        data = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as e:
        raise ShapeError(f"einsum {subscripts!r}: {a.shape}, {b.shape}") from e

    def backward(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise DomainError("mean of empty tensor")
    return scale(sum_(a), 1.0 / n)


def mean_pool(rows: Tensor) -> Tensor:
    """Elementwise mean over the first axis."""
    rows = as_tensor(rows)
    if rows.data.ndim == 0 or rows.shape[0] == 0:
        raise DomainError("mean_pool needs at least one row")
    t = rows.shape[0]
    return scale(sum_(rows, axis=0), 1.0 / t)


# ---------------------------------------------------------------- softmax family


def softmax(v, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` (bool, same shape) marks valid slots; masked slots get weight 0.
    A slice with no valid slot yields all zeros.
    """
    v = as_tensor(v)
    x = v.data
    if x.size == 0 or (x.ndim and x.shape[axis] == 0):
        raise DomainError("softmax of empty input")
    if mask is None and np.isnan(x).any():
        raise DomainError("softmax input contains NaN")
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (v,), backward)


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    x = v.data
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (v,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from e
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tensors, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a: Tensor, key) -> Tensor:
    """Basic or fancy indexing ``a[key]``."""
    data = a.data[key]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(data), (a,), backward)


def take(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(data, (table,), backward)


# ---------------------------------------------------------------- parameters


class ParamRegistry:
    """Named trainable tensors in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise InvariantError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamRegistry, state: AdamState, lr: float) -> None:
    """One Adam update in place; gradients are zeroed afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise InvariantError(f"parameter {name!r} has no accumulated gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise DomainError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x0))
        flat[i] = orig - eps
        fm = float(f(x0))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise DomainError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm, with a floor for all-zero pairs."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den
