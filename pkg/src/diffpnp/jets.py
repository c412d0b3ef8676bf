"""Forward-mode second-order jets.

A `Jet2` carries a value array together with its gradient and Hessian with
respect to a fixed set of `d` scalar variables. Arithmetic propagates both
derivative orders exactly, so any function composed from +, -, *, /, and the
registered univariate maps yields machine-precision first and second
derivatives. Value shapes broadcast (scalars mix with per-point arrays); the
trailing derivative axes are always (d,) and (d, d).
"""

from __future__ import annotations

import numpy as np


class Jet2:
    """Value with exact gradient and Hessian w.r.t. d ambient variables."""

    __slots__ = ("val", "g", "h")

    def __init__(self, val, g, h):
        self.val = np.asarray(val, dtype=np.float64)
        self.g = np.asarray(g, dtype=np.float64)
        self.h = np.asarray(h, dtype=np.float64)

    @classmethod
    def constant(cls, value, ndim: int) -> "Jet2":
        val = np.asarray(value, dtype=np.float64)
        return cls(val, np.zeros(val.shape + (ndim,)), np.zeros(val.shape + (ndim, ndim)))

    @classmethod
    def variable(cls, value, index: int, ndim: int) -> "Jet2":
        """Seed a jet whose value is the ambient variable `index`."""
        val = np.asarray(value, dtype=np.float64)
        g = np.zeros(val.shape + (ndim,))
        g[..., index] = 1.0
        return cls(val, g, np.zeros(val.shape + (ndim, ndim)))

    @property
    def ndim_vars(self) -> int:
        return self.g.shape[-1]

    def _lift(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            return other
        return Jet2.constant(other, self.ndim_vars)

    def __add__(self, other):
        o = self._lift(other)
        return Jet2(self.val + o.val, self.g + o.g, self.h + o.h)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.val, -self.g, -self.h)

    def __sub__(self, other):
        o = self._lift(other)
        return Jet2(self.val - o.val, self.g - o.g, self.h - o.h)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        o = self._lift(other)
        av, bv = self.val, o.val
        g = av[..., None] * o.g + bv[..., None] * self.g
        h = (
            av[..., None, None] * o.h
            + bv[..., None, None] * self.h
            + self.g[..., :, None] * o.g[..., None, :]
            + o.g[..., :, None] * self.g[..., None, :]
        )
        return Jet2(av * bv, g, h)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        cv = self.val / o.val
        cg = (self.g - cv[..., None] * o.g) / o.val[..., None]
        h = (
            self.h
            - cv[..., None, None] * o.h
            - cg[..., :, None] * o.g[..., None, :]
            - o.g[..., :, None] * cg[..., None, :]
        ) / o.val[..., None, None]
        return Jet2(cv, cg, h)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def apply(self, f0: np.ndarray, f1: np.ndarray, f2: np.ndarray) -> "Jet2":
        """Chain a univariate map given its value and two derivatives at self.val."""
        f0 = np.asarray(f0, dtype=np.float64)
        f1 = np.asarray(f1, dtype=np.float64)
        f2 = np.asarray(f2, dtype=np.float64)
        g = f1[..., None] * self.g
        h = f1[..., None, None] * self.h + f2[..., None, None] * (
            self.g[..., :, None] * self.g[..., None, :]
        )
        return Jet2(f0, g, h)


# Rotation-series coefficients as functions of q = theta^2. Working in q
# rather than theta keeps everything analytic through theta = 0 (no sqrt in
# the derivative chain). The series branch takes over for q <= Q_SWITCH where
# the closed forms lose digits to cancellation; truncation error of the kept
# terms is < 1e-13 there.
_Q_SWITCH = 1e-2


def _branch(q, small, large):
    q = np.asarray(q, dtype=np.float64)
    use_series = q <= _Q_SWITCH
    qs = np.where(use_series, q, 0.0)
    # Evaluate the closed form only at safe q to avoid divide warnings.
    ql = np.where(use_series, 1.0, q)
    return np.where(use_series, small(qs), large(ql))


def sin_ratio(q):
    """sin(theta)/theta and its first two derivatives w.r.t. q = theta^2."""

    def f0s(q):
        return 1.0 - q / 6.0 + q**2 / 120.0 - q**3 / 5040.0 + q**4 / 362880.0

    def f0l(q):
        th = np.sqrt(q)
        return np.sin(th) / th

    def f1s(q):
        return -1.0 / 6.0 + q / 60.0 - q**2 / 1680.0 + q**3 / 90720.0

    def f1l(q):
        th = np.sqrt(q)
        return (th * np.cos(th) - np.sin(th)) / (2.0 * th**3)

    def f2s(q):
        return 1.0 / 60.0 - q / 840.0 + q**2 / 30240.0 - q**3 / 1995840.0

    def f2l(q):
        th = np.sqrt(q)
        return ((6.0 - 2.0 * q) * np.sin(th) - 6.0 * th * np.cos(th)) / (8.0 * th**5)

    return _branch(q, f0s, f0l), _branch(q, f1s, f1l), _branch(q, f2s, f2l)


def versine_ratio(q):
    """(1 - cos(theta))/theta^2 and its first two derivatives w.r.t. q."""

    def f0s(q):
        return 0.5 - q / 24.0 + q**2 / 720.0 - q**3 / 40320.0 + q**4 / 3628800.0

    def f0l(q):
        return (1.0 - np.cos(np.sqrt(q))) / q

    def f1s(q):
        return -1.0 / 24.0 + q / 360.0 - q**2 / 13440.0 + q**3 / 907200.0

    def f1l(q):
        th = np.sqrt(q)
        return (th * np.sin(th) - 2.0 * (1.0 - np.cos(th))) / (2.0 * q**2)

    def f2s(q):
        return 1.0 / 360.0 - q / 6720.0 + q**2 / 302400.0 - q**3 / 23950080.0

    def f2l(q):
        th = np.sqrt(q)
        return (q * np.cos(th) - 5.0 * th * np.sin(th) + 8.0 * (1.0 - np.cos(th))) / (
            4.0 * q**3
        )

    return _branch(q, f0s, f0l), _branch(q, f1s, f1l), _branch(q, f2s, f2l)


def cubic_ratio(q):
    """(theta - sin(theta))/theta^3, value only (used by the right Jacobian)."""

    def f0s(q):
        return 1.0 / 6.0 - q / 120.0 + q**2 / 5040.0 - q**3 / 362880.0

    def f0l(q):
        th = np.sqrt(q)
        return (th - np.sin(th)) / (q * th)

    return _branch(q, f0s, f0l)
