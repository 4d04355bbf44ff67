"""Vectorized forward-mode dual numbers.

A :class:`Dual` carries values of any shape plus a leading axis of tangent
directions. Plant right-hand sides are written generically, so evaluating
them on duals yields local Jacobians of the physics residual for whole
training batches at once.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Dual", "seed"]


def _val(x):
    return x.val if isinstance(x, Dual) else x


class Dual:
    __slots__ = ("val", "der")
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @property
    def n_dir(self) -> int:
        return self.der.shape[0]

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val + o.val, self.der + o.der)
        return Dual(self.val + o, self.der)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val - o.val, self.der - o.der)
        return Dual(self.val - o, self.der)

    def __rsub__(self, o):
        return Dual(o - self.val, -self.der)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.val * o.val, self.der * o.val + o.der * self.val)
        return Dual(self.val * o, self.der * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            inv = 1.0 / o.val
            v = self.val * inv
            return Dual(v, (self.der - o.der * v) * inv)
        return Dual(self.val / o, self.der / o)

    def __rtruediv__(self, o):
        v = o / self.val
        return Dual(v, -self.der * (v / self.val))

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        v = self.val ** p
        return Dual(v, self.der * (p * self.val ** (p - 1.0)))

    def __rpow__(self, base):
        return (self * np.log(base)).exp()

    def exp(self):
        v = np.exp(self.val)
        return Dual(v, self.der * v)

    def log(self):
        return Dual(np.log(self.val), self.der / self.val)

    def tanh(self):
        t = np.tanh(self.val)
        return Dual(t, self.der * (1.0 - t * t))

    def sigmoid(self):
        s = 0.5 * (1.0 + np.tanh(0.5 * self.val))
        return Dual(s, self.der * (s * (1.0 - s)))


def seed(values, index: int, n_dir: int) -> Dual:
    """Dual whose tangent is the unit vector ``index`` of ``n_dir`` directions."""
    values = np.asarray(values, dtype=float)
    der = np.zeros((n_dir,) + values.shape)
    der[index] = 1.0
    return Dual(values, der)
