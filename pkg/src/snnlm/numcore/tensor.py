"""Row-major float tensors and a reverse-mode differentiation tape.

The substrate is deliberately small: dense arrays (float32 by default,
float64 when validating gradients), a linear tape of primitive ops, and
exactly the primitives the model needs.  Backward replays the tape once,
in reverse creation order, so gradient accumulation is additive and
deterministic.  Reductions accumulate in float64 regardless of storage
dtype.

Broadcasting follows numpy's trailing-dimension alignment and nothing
else; a shape pair that numpy would reject raises ``DimensionError``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class NumericError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


_check_finite_enabled = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf validation; returns the previous setting."""
    global _check_finite_enabled
    previous = _check_finite_enabled
    _check_finite_enabled = bool(enabled)
    return previous


def _require_finite(data: np.ndarray, op: str) -> None:
    if _check_finite_enabled and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Shape + row-major float data, optionally named (parameters)."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Arithmetic sugar; all routed through the module-level primitives.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


Operand = Union[Tensor, np.ndarray, float, int]

# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops; backward replays it in reverse.

    Each node is ``(out, parents, backward_fn)`` where ``backward_fn``
    receives dL/d(out) and accumulates into ``parent.grad``.  ``backward``
    first clears the gradients of every tensor the tape touches, so
    repeated backward passes over one tape are bit-identical.  One tape is
    single-threaded by contract; independent tapes may run concurrently.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Accumulate dL/d(leaf) for the scalar ``root`` into ``.grad`` slots."""
        if root.size != 1:
            raise DimensionError("backward root must be scalar")
        seen: set = set()
        for out, parents, _ in self._nodes:
            for t in (out, *parents):
                if id(t) not in seen:
                    seen.add(id(t))
                    t.grad = None
        root.grad = np.ones_like(root.data)
        for out, parents, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._nodes.append((out, tuple(parents), backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # first contribution: owned, writable, contiguous copy
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# Extension points for fused primitives defined outside this module
# (the neuron scan kernels register themselves through these).
record_op = _record
accumulate_grad = _accumulate


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


def _as_array(x: Operand, like_dtype) -> tuple:
    """Return (data, tensor-or-None); plain arrays/scalars carry no grad."""
    if isinstance(x, Tensor):
        return x.data, x
    arr = np.asarray(x, dtype=like_dtype)
    return arr, None


def _operand_dtype(*xs: Operand):
    for x in xs:
        if isinstance(x, Tensor):
            return x.data.dtype
    return DEFAULT_DTYPE


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> None:
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: shapes {sa} and {sb} do not broadcast")


# ---------------------------------------------------------------------------
# Binary pointwise
# ---------------------------------------------------------------------------


def _binary(op: str, a: Operand, b: Operand, fwd, da_fn, db_fn) -> Tensor:
    dtype = _operand_dtype(a, b)
    ad, at = _as_array(a, dtype)
    bd, bt = _as_array(b, dtype)
    _check_broadcast(ad.shape, bd.shape, op)
    out_data = fwd(ad, bd)
    _require_finite(out_data, op)
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        if at is not None:
            _accumulate(at, _unbroadcast(da_fn(g, ad, bd), ad.shape))
        if bt is not None:
            _accumulate(bt, _unbroadcast(db_fn(g, ad, bd), bd.shape))

    _record(out, [t for t in (at, bt) if t is not None], backward)
    return out


def add(a: Operand, b: Operand) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Operand, b: Operand) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Operand, b: Operand) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Operand, b: Operand) -> Tensor:
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.any(bd == 0):
        raise DomainError("div: zero divisor")
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


# ---------------------------------------------------------------------------
# Unary pointwise
# ---------------------------------------------------------------------------


def _unary(op: str, a: Tensor, out_data: np.ndarray, dx_fn) -> Tensor:
    _require_finite(out_data, op)
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, dx_fn(g))

    _record(out, [a], backward)
    return out


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a, -a.data, lambda g: -g)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_data(a.data)
    return _unary("sigmoid", a, y, lambda g: g * (y * (1.0 - y)))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # max(x,0) + log1p(exp(-|x|)) is overflow-safe at both tails
    y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_data(x)
    return _unary("softplus", a, y, lambda g: g * sig)


def absval(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _unary("abs", a, np.abs(a.data), lambda g: g * sign)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    y = np.sqrt(a.data)
    return _unary("sqrt", a, y, lambda g: g * (0.5 / y))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _unary("exp", a, y, lambda g: g * y)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    x = a.data
    return _unary("log", a, np.log(x), lambda g: g / x)


# ---------------------------------------------------------------------------
# Linear algebra / shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out_data = ad @ bd
    _require_finite(out_data, "matmul")
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    _record(out, [a, b], backward)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError("transpose expects a 2-D tensor")
    out = Tensor(a.data.T)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    _record(out, [a], backward)
    return out


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    _record(out, [a], backward)
    return out


def broadcast_to(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    _check_broadcast(a.shape, shape, "broadcast_to")
    out = Tensor(np.broadcast_to(a.data, shape))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))

    _record(out, [a], backward)
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_along(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)
    out = Tensor(out_data.astype(a.dtype))
    _require_finite(out.data, "sum")

    def backward(g: np.ndarray) -> None:
        ge = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(ge, a.shape))

    _record(out, [a], backward)
    return out


def mean_along(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    out_data = (a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims) / n)
    out = Tensor(out_data.astype(a.dtype))
    _require_finite(out.data, "mean")

    def backward(g: np.ndarray) -> None:
        ge = g if keepdims else np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(ge / n, a.shape).astype(a.dtype))

    _record(out, [a], backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype))
    _require_finite(out.data, "sum")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.shape))

    _record(out, [a], backward)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype))
    _require_finite(out.data, "mean")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.dtype))

    _record(out, [a], backward)
    return out


def cumsum_exclusive(a: Tensor, axis: int) -> Tensor:
    """y[k] = sum of x[j] for j < k along ``axis`` (y[0] = 0)."""
    x = a.data
    inclusive = np.cumsum(x, axis=axis)
    out_data = inclusive - x  # exclusive prefix
    _require_finite(out_data, "cumsum")
    out = Tensor(out_data)

    def backward(g: np.ndarray) -> None:
        suffix = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        _accumulate(a, suffix - g)

    _record(out, [a], backward)
    return out


# ---------------------------------------------------------------------------
# Lookup / loss
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds so repeated ids accumulate."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError("embedding_lookup expects flat ids")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError("embedding_lookup: id out of range")
    out = Tensor(table.data[ids])

    def backward(g: np.ndarray) -> None:
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    _record(out, [table], backward)
    return out


def cross_entropy_logits(logits: Tensor, targets: np.ndarray,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over (optionally masked) rows.

    ``logits`` is (rows, vocab); ``targets`` integer ids per row.  The
    log-softmax is computed in a max-shifted form and the mean accumulates
    in float64.
    """
    if logits.ndim != 2:
        raise DimensionError("cross_entropy_logits expects 2-D logits")
    z = logits.data
    rows = z.shape[0]
    targets = np.asarray(targets)
    if targets.shape != (rows,):
        raise DimensionError("targets must have one id per logits row")
    if mask is None:
        mask = np.ones(rows, dtype=z.dtype)
    else:
        mask = np.asarray(mask, dtype=z.dtype)
    denom = float(mask.sum(dtype=np.float64))
    if denom <= 0:
        raise DomainError("cross_entropy_logits: empty mask")

    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True, dtype=np.float64).astype(z.dtype)
    log_probs = (z - zmax) - np.log(sez)
    nll = -log_probs[np.arange(rows), targets]
    loss = float((nll * mask).sum(dtype=np.float64) / denom)
    out = Tensor(np.asarray(loss, dtype=z.dtype))
    _require_finite(out.data, "cross_entropy")

    def backward(g: np.ndarray) -> None:
        p = ez / sez
        p[np.arange(rows), targets] -= 1.0
        p *= (mask / denom)[:, None]
        _accumulate(logits, (float(g) * p).astype(z.dtype))

    _record(out, [logits], backward)
    return out
