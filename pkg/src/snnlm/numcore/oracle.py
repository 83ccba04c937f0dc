"""Scalar-level gradient oracle, independent of the production backward.

``Value`` is a float64 scalar node recording its parents and local
partial derivatives.  Gradients come from naive per-scalar reverse
accumulation over a topological order, with the same sigmoid surrogate
rule at spike nodes as the production kernels use.  This path shares no
code with the tape in ``tensor.py``; it exists to cross-check it.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Tuple, Union

import numpy as np

SURROGATE_SHARPNESS = 4.0


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _surrogate(u: float, sharpness: float) -> float:
    s = _sigmoid(sharpness * u)
    return sharpness * s * (1.0 - s)


class Value:
    """One float64 scalar in the oracle graph."""

    __slots__ = ("v", "grad", "_parents", "_locals")

    def __init__(self, v: float, parents: Tuple["Value", ...] = (),
                 locals_: Tuple[float, ...] = ()):
        self.v = float(v)
        self.grad = 0.0
        self._parents = parents
        self._locals = locals_

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        return Value(self.v + other.v, (self, other), (1.0, 1.0))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        return Value(self.v - other.v, (self, other), (1.0, -1.0))

    def __rsub__(self, other):
        other = _wrap(other)
        return Value(other.v - self.v, (other, self), (1.0, -1.0))

    def __mul__(self, other):
        other = _wrap(other)
        return Value(self.v * other.v, (self, other), (other.v, self.v))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return Value(self.v / other.v, (self, other),
                     (1.0 / other.v, -self.v / (other.v * other.v)))

    def __rtruediv__(self, other):
        other = _wrap(other)
        return other.__truediv__(self)

    def __neg__(self):
        return Value(-self.v, (self,), (-1.0,))

    # -- nonlinearities ------------------------------------------------

    def sigmoid(self) -> "Value":
        s = _sigmoid(self.v)
        return Value(s, (self,), (s * (1.0 - s),))

    def softplus(self) -> "Value":
        y = max(self.v, 0.0) + math.log1p(math.exp(-abs(self.v)))
        return Value(y, (self,), (_sigmoid(self.v),))

    def absv(self) -> "Value":
        sign = 0.0 if self.v == 0.0 else math.copysign(1.0, self.v)
        return Value(abs(self.v), (self,), (sign,))

    def exp(self) -> "Value":
        y = math.exp(self.v)
        return Value(y, (self,), (y,))

    def log(self) -> "Value":
        return Value(math.log(self.v), (self,), (1.0 / self.v,))

    def sqrt(self) -> "Value":
        y = math.sqrt(self.v)
        return Value(y, (self,), (0.5 / y,))

    def spike(self, sharpness: float = SURROGATE_SHARPNESS) -> "Value":
        """Heaviside with a sigmoid-surrogate local derivative (fires at 0)."""
        fired = 1.0 if self.v >= 0.0 else 0.0
        return Value(fired, (self,), (_surrogate(self.v, sharpness),))

    def spike_smooth(self, sharpness: float = SURROGATE_SHARPNESS) -> "Value":
        """Smooth firing sigma(sharpness * u); derivative equals the surrogate."""
        return Value(_sigmoid(sharpness * self.v), (self,),
                     (_surrogate(self.v, sharpness),))

    # -- reverse accumulation -------------------------------------------

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 and push gradients to every ancestor once."""
        order: list = []
        visited: set = set()
        stack: list = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = 1.0
        for node in reversed(order):
            g = node.grad
            if g == 0.0:
                continue
            for parent, local in zip(node._parents, node._locals):
                parent.grad += local * g


def _wrap(x: Union[Value, float, int]) -> Value:
    return x if isinstance(x, Value) else Value(float(x))


def wrap_array(arr: np.ndarray) -> np.ndarray:
    """Elementwise Value view of ``arr`` (object dtype, float64 values)."""
    out = np.empty(arr.shape, dtype=object)
    flat_in = np.asarray(arr, dtype=np.float64).reshape(-1)
    flat_out = out.reshape(-1)
    for i, x in enumerate(flat_in):
        flat_out[i] = Value(x)
    return out


def grads_of(arr: np.ndarray) -> np.ndarray:
    """Collect ``.grad`` from an array of Values."""
    out = np.empty(arr.shape, dtype=np.float64)
    flat_in = arr.reshape(-1)
    flat_out = out.reshape(-1)
    for i, v in enumerate(flat_in):
        flat_out[i] = v.grad
    return out


def oracle_grad(f: Callable[[Dict[str, np.ndarray]], Value],
                params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Gradient map of a scalar function of named arrays.

    ``f`` receives ``{name: array-of-Value}`` and must return one Value;
    the result maps each name to d f / d param, computed scalar by scalar.
    """
    wrapped = {name: wrap_array(np.asarray(p)) for name, p in params.items()}
    out = f(wrapped)
    if not isinstance(out, Value):
        raise TypeError("oracle function must return a Value")
    out.backward()
    return {name: grads_of(w) for name, w in wrapped.items()}


def finite_difference_grad(f: Callable[[Dict[str, np.ndarray]], float],
                           params: Dict[str, np.ndarray],
                           step: float = 1e-3) -> Dict[str, np.ndarray]:
    """Central finite differences of a scalar function, in float64."""
    base = {name: np.asarray(p, dtype=np.float64).copy()
            for name, p in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = f(base)
            flat[i] = keep - step
            lo = f(base)
            flat[i] = keep
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads
