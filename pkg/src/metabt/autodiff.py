"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations build a fresh :class:`Tape` per graph. A primitive is recorded on
the innermost active tape whenever one of its operands requires a gradient;
outside a tape every primitive is a plain numpy computation, which is how the
decoders run.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(mul(w, w))
    >>> backward(tape, loss, {"w": w})["w"]
    array([2., 4.])
"""

from __future__ import annotations

import math
import os
import threading
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

# Set METABT_DEBUG=1 to check every forward value and every gradient for NaN/inf.
DEBUG = os.environ.get("METABT_DEBUG", "") not in ("", "0")


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericError(FloatingPointError):
    """A value or gradient became NaN or infinite."""


class Tensor:
    """Dense float64 array with an optional gradient requirement.

    Tensors are never mutated in place; their buffers are marked read-only.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Node(NamedTuple):
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list["Tape"]:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by a primitive")
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(Node(out, parents, vjp))
    return out


def constant(arr) -> Tensor:
    return Tensor._wrap(np.asarray(arr, dtype=np.float64).copy())


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics for 1-D and 2-D operands."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    A2 = A[None, :] if A.ndim == 1 else A
    B2 = B[:, None] if B.ndim == 1 else B

    def vjp(g):
        g2 = np.asarray(g).reshape(A2.shape[0], B2.shape[1])
        ga = (g2 @ B2.T).reshape(A.shape)
        gb = (A2.T @ g2).reshape(B.shape)
        return ga, gb

    return _result(np.asarray(A @ B, dtype=np.float64), (a, b), vjp)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _result(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast along every leading axis of x."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def gather(table: Tensor, idx) -> Tensor:
    """Rows of a 2-D table selected by an integer index array of any shape."""
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"gather: indices must be integers, got {idx.dtype}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")
    T = table.data

    def vjp(g):
        gt = np.zeros_like(T)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(T[idx], (table,), vjp)


def pick(a: Tensor, idx) -> Tensor:
    """a[..., idx] elementwise along the last axis; result drops that axis."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not fit {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError(f"pick: index out of range for last axis {a.shape[-1]}")
    ix = idx[..., None]
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, ix, np.asarray(g)[..., None], axis=-1)
        return (ga,)

    return _result(np.take_along_axis(a.data, ix, axis=-1)[..., 0], (a,), vjp)


def select(x: Tensor, i: int, axis: int = 0) -> Tensor:
    """Slice ``i`` along ``axis``; the axis is dropped."""
    if x.ndim == 0 or not -x.shape[axis] <= i < x.shape[axis]:
        raise IndexError(f"select: index {i} out of range for axis {axis} of {x.shape}")
    ax = axis % x.ndim
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        idx = [slice(None)] * len(shape)
        idx[ax] = i
        gx[tuple(idx)] = g
        return (gx,)

    return _result(np.take(x.data, i, axis=ax), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no operands")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape}")
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return _result(out, xs, lambda g: np.split(g, cuts, axis=ax))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("stack: no operands")
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeError(f"stack: shape mismatch {xs[0].shape} vs {x.shape}")
    ax = axis % (xs[0].ndim + 1)
    out = np.stack([x.data for x in xs], axis=ax)
    return _result(out, xs, lambda g: [np.take(g, i, axis=ax) for i in range(len(xs))])


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean of x over positions where mask is non-zero; mask is a constant."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"masked_mean: mask {m.shape} does not fit {x.shape}")
    n = m.sum()
    if n <= 0:
        raise ContractError("masked_mean: mask selects no positions")
    return _result(np.asarray((x.data * m).sum() / n), (x,), lambda g: (g * m / n,))


def total(x: Tensor) -> Tensor:
    """Sum of every entry, as a scalar."""
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    try:
        ins, out = spec.replace(" ", "").split("->")
        a, b = ins.split(",")
    except ValueError:
        raise ShapeError(f"einsum: expected 'ab,bc->ac' form, got {spec!r}") from None
    for s in (a, b, out):
        if len(set(s)) != len(s) or not s.isalpha() and s:
            raise ShapeError(f"einsum: unsupported subscripts {spec!r}")
    for s, other in ((a, b + out), (b, a + out)):
        if any(c not in other for c in s):
            raise ShapeError(f"einsum: index summed within one operand in {spec!r}")
    return a, b, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum restricted to specs whose adjoints are einsums too."""
    sa, sb, so = _parse_einsum(spec)
    try:
        out = np.einsum(spec, a.data, b.data)
    except ValueError:
        raise ShapeError(f"einsum {spec!r}: shapes {a.shape} and {b.shape} do not conform") from None
    A, B = a.data, b.data

    def vjp(g):
        return (np.einsum(f"{so},{sb}->{sa}", g, B), np.einsum(f"{so},{sa}->{sb}", g, A))

    return _result(np.asarray(out, dtype=np.float64), (a, b), vjp)


# --------------------------------------------------------------------------
# gradients


class GradVector(dict):
    """Parameter name -> gradient array, same shapes as the parameters."""

    def norm(self) -> float:
        return math.sqrt(grad_dot(self, self))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self[k]) for k in sorted(self)]) if self else np.zeros(0)

    def scaled(self, c: float) -> "GradVector":
        return GradVector({k: v * c for k, v in self.items()})

    def plus(self, other: Mapping[str, np.ndarray], weight: float = 1.0) -> "GradVector":
        _check_keys(self, other)
        return GradVector({k: self[k] + weight * other[k] for k in self})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def _check_keys(a: Mapping, b: Mapping) -> None:
    if set(a) != set(b):
        raise ContractError(f"gradient key sets differ: {sorted(set(a) ^ set(b))}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ContractError(f"gradient shapes differ for {k!r}: {np.shape(a[k])} vs {np.shape(b[k])}")


def backward(tape: Tape, loss: Tensor, wrt: Mapping[str, Tensor]) -> GradVector:
    """Exact reverse-mode gradient of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    The tape is consumed; a second call on it raises ContractError.
    """
    if tape.consumed:
        raise ContractError("backward: tape already consumed")
    if not tape.nodes:
        raise ContractError("backward: empty tape")
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    found = False
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        found = True
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = np.asarray(gp, dtype=np.float64)
    if not found:
        raise ContractError("backward: loss was not recorded on this tape")
    tape.consumed = True
    tape.nodes = []
    out = GradVector()
    for name, t in wrt.items():
        g = grads.get(id(t))
        out[name] = np.zeros(t.shape) if g is None else np.array(np.broadcast_to(g, t.shape))
    if DEBUG and not out.is_finite():
        raise NumericError("backward: non-finite gradient")
    return out


def grad_dot(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Sum over parameters of the elementwise-product sums; symmetric."""
    _check_keys(a, b)
    return math.fsum(float(np.dot(np.ravel(a[k]), np.ravel(b[k]))) for k in sorted(a))


def value_and_grad(f: Callable[[Mapping[str, Tensor]], Tensor],
                   params: Mapping[str, Tensor]) -> tuple[float, GradVector]:
    """Evaluate scalar ``f(params)`` on a fresh tape and return (value, gradient)."""
    with Tape() as tape:
        loss = f(params)
    if not loss.requires_grad:
        return loss.item(), GradVector({k: np.zeros(t.shape) for k, t in params.items()})
    return loss.item(), backward(tape, loss, params)


def fd_check(f: Callable[[Mapping[str, Tensor]], Tensor],
             params: Mapping[str, Tensor], step: float = 1e-5,
             names: Iterable[str] | None = None) -> float:
    """Worst relative error between backward() and central differences.

    The denominator per coordinate is max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ContractError("fd_check: step must be positive")
    leaves = {k: Tensor(t.data, requires_grad=True) for k, t in params.items()}
    _, analytic = value_and_grad(f, leaves)
    worst = 0.0
    for name in (names if names is not None else leaves):
        base = leaves[name].data
        for i in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                arr = base.copy()
                arr[i] += sgn * step
                trial = dict(leaves)
                trial[name] = Tensor(arr)
                v = f(trial).item()
                if not math.isfinite(v):
                    raise NumericError(f"fd_check: f is non-finite at {name}{list(i)}")
                vals.append(v)
            num = (vals[0] - vals[1]) / (2.0 * step)
            ana = float(analytic[name][i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
