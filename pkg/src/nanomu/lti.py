"""Scalar rational transfer functions with an optional pure delay.

Coefficients are stored in ascending powers of ``s`` so that ``num[0]`` and
``den[0]`` give the DC terms directly and Horner evaluation runs from the
top coefficient down.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
from numpy.polynomial import polynomial as P


class InvalidParameterError(ValueError):
    """A parameter is outside its admissible range."""


class UnsupportedDelayError(ValueError):
    """An operation was asked to handle a delay it cannot represent."""


class PoleOnGridError(ArithmeticError):
    """The denominator vanishes at an evaluation frequency."""

    def __init__(self, omega):
        super().__init__(f"pole on the evaluation grid at omega = {omega!r} rad/s")
        self.omega = omega


def _trim(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    nz = np.flatnonzero(c)
    if nz.size == 0:
        return c[:1] * 0.0
    return c[: nz[-1] + 1].copy()


@dataclass(frozen=True, eq=False)
class RationalTF:
    """``num(s) / den(s) * exp(-s * delay)`` with real coefficients."""

    num: np.ndarray
    den: np.ndarray
    delay: float = 0.0

    def __post_init__(self):
        num = _trim(self.num)
        den = _trim(self.den)
        if not np.all(np.isfinite(num)) or not np.all(np.isfinite(den)):
            raise InvalidParameterError("coefficients must be finite")
        if den.size == 1 and den[0] == 0.0:
            raise InvalidParameterError("denominator is identically zero")
        if self.delay < 0 or not np.isfinite(self.delay):
            raise InvalidParameterError(f"delay must be >= 0, got {self.delay}")
        num.setflags(write=False)
        den.setflags(write=False)
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)
        object.__setattr__(self, "delay", float(self.delay))

    @classmethod
    def constant(cls, k=1.0):
        return cls([k], [1.0])

    @property
    def order(self):
        return self.den.size - 1

    @property
    def dc_gain(self):
        return self.num[0] / self.den[0]

    def __call__(self, s):
        return evaluate(self, s)

    def __mul__(self, other):
        if isinstance(other, RationalTF):
            return series(self, other)
        return RationalTF(self.num * float(other), self.den, self.delay)

    __rmul__ = __mul__

    def __repr__(self):
        d = f", delay={self.delay:g}" if self.delay else ""
        return f"RationalTF(num={self.num.tolist()}, den={self.den.tolist()}{d})"

    def to_dict(self):
        return {"num": self.num.tolist(), "den": self.den.tolist(), "delay": self.delay}

    @classmethod
    def from_dict(cls, d):
        return cls(d["num"], d["den"], d.get("delay", 0.0))


@dataclass(frozen=True)
class ModePair:
    """One resonance (pole pair) with an optional anti-resonance (zero pair).

    Frequencies are in rad/s. ``zero_freq=None`` marks a pure resonance.
    """

    pole_freq: float
    pole_damping: float
    zero_freq: float | None = None
    zero_damping: float | None = None

    def __post_init__(self):
        if not (self.pole_freq > 0 and self.pole_damping > 0):
            raise InvalidParameterError("pole frequency and damping must be positive")
        if self.zero_freq is not None:
            if self.zero_damping is None:
                raise InvalidParameterError("zero_damping is required with zero_freq")
            if not (self.zero_freq > 0 and self.zero_damping > 0):
                raise InvalidParameterError("zero frequency and damping must be positive")

    @property
    def has_zero(self):
        return self.zero_freq is not None

    @property
    def n2(self):
        return 1.0 / self.zero_freq**2 if self.has_zero else None

    @property
    def n1(self):
        return 2.0 * self.zero_damping / self.zero_freq if self.has_zero else None

    @property
    def d2(self):
        return 1.0 / self.pole_freq**2

    @property
    def d1(self):
        return 2.0 * self.pole_damping / self.pole_freq


def tf_from_mode_pair(mode: ModePair) -> RationalTF:
    """``(n2 s^2 + n1 s + 1) / (d2 s^2 + d1 s + 1)``, unity DC gain."""
    num = [1.0, mode.n1, mode.n2] if mode.has_zero else [1.0]
    return RationalTF(num, [1.0, mode.d1, mode.d2])


def series(a: RationalTF, b: RationalTF) -> RationalTF:
    return RationalTF(P.polymul(a.num, b.num), P.polymul(a.den, b.den), a.delay + b.delay)


def series_chain(tfs) -> RationalTF:
    out = RationalTF.constant(1.0)
    for tf in tfs:
        out = series(out, tf)
    return out


def feedback(plant: RationalTF, controller: RationalTF) -> RationalTF:
    """Process-sensitivity closed loop ``G / (1 + G C)`` without cancellation.

    A plant delay is carried over unchanged (it only appears in the
    numerator path of the closed loop when the controller is zero); a
    delayed plant in a nontrivial loop must be rationalized first.
    """
    if controller.delay:
        raise UnsupportedDelayError("controller delay is not supported")
    c_is_zero = controller.num.size == 1 and controller.num[0] == 0.0
    if plant.delay and not c_is_zero:
        raise UnsupportedDelayError(
            "plant delay inside a closed loop; rationalize it with pade_delay first"
        )
    num = P.polymul(plant.num, controller.den)
    den = P.polyadd(P.polymul(plant.den, controller.den), P.polymul(plant.num, controller.num))
    return RationalTF(num, den, plant.delay)


def evaluate(tf: RationalTF, s):
    """Evaluate at arbitrary complex ``s`` (Horner, via ``polyval``)."""
    s = np.asarray(s, dtype=complex)
    num = P.polyval(s, tf.num)
    den = P.polyval(s, tf.den)
    out = num / den
    if tf.delay:
        out = out * np.exp(-s * tf.delay)
    return out


def as_grid(points) -> np.ndarray:
    """Validate a frequency grid: nonempty, positive, strictly increasing."""
    w = np.atleast_1d(np.asarray(points, dtype=float))
    if w.ndim != 1 or w.size == 0:
        raise InvalidParameterError("frequency grid must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidParameterError("frequency grid points must be positive and finite")
    if np.any(np.diff(w) <= 0):
        raise InvalidParameterError("frequency grid must be strictly increasing")
    return w


def freq_response(tf: RationalTF, grid) -> np.ndarray:
    w = as_grid(grid)
    s = 1j * w
    den = P.polyval(s, tf.den)
    bad = np.flatnonzero(den == 0)
    if bad.size:
        raise PoleOnGridError(float(w[bad[0]]))
    out = P.polyval(s, tf.num) / den
    if tf.delay:
        out = out * np.exp(-s * tf.delay)
    return out


def pade_delay(tau: float, order: int = 2) -> RationalTF:
    """Diagonal ``[order/order]`` Padé approximant of ``exp(-s tau)``."""
    if order not in (1, 2, 3):
        raise InvalidParameterError(f"Padé order must be 1, 2 or 3, got {order}")
    if tau < 0:
        raise InvalidParameterError("delay must be nonnegative")
    if tau == 0:
        return RationalTF.constant(1.0)
    n = order
    c = np.array(
        [
            factorial(2 * n - k) * factorial(n) / (factorial(2 * n) * factorial(k) * factorial(n - k))
            for k in range(n + 1)
        ]
    )
    powers = tau ** np.arange(n + 1)
    den = c * powers
    num = den * (-1.0) ** np.arange(n + 1)
    return RationalTF(num, den)


def rationalize(tf: RationalTF, order: int = 2) -> RationalTF:
    """Replace an exact delay by its Padé approximant."""
    if not tf.delay:
        return tf
    return series(RationalTF(tf.num, tf.den), pade_delay(tf.delay, order))


def poly_roots(c) -> np.ndarray:
    """Roots of an ascending-coefficient polynomial.

    The variable is rescaled so the constant and leading coefficients have
    equal magnitude before the (balanced) companion eigenvalue solve; the
    structural polynomials here span many decades in their coefficients.
    """
    c = _trim(c)
    nz = np.flatnonzero(c)
    lead_zeros = nz[0] if nz.size else 0
    c = c[lead_zeros:]
    n = c.size - 1
    if n <= 0:
        return np.zeros(lead_zeros, dtype=complex)
    scale = (abs(c[0]) / abs(c[-1])) ** (1.0 / n)
    cs = c * scale ** np.arange(n + 1)
    cs = cs / cs[-1]
    comp = np.zeros((n, n))
    comp[1:, :-1] = np.eye(n - 1)
    comp[:, -1] = -cs[:-1]
    r = np.linalg.eigvals(comp) * scale
    return np.concatenate([r, np.zeros(lead_zeros, dtype=complex)])


def stability_tolerance(roots) -> float:
    mags = np.abs(roots)
    return 1e-8 * max(1.0, float(mags.max()) if mags.size else 1.0)


def is_stable(tf: RationalTF):
    """Return ``(stable, poles)``; stable iff every pole has Re < -eps."""
    if tf.delay:
        raise UnsupportedDelayError("rationalize the delay before root-based stability tests")
    poles = poly_roots(tf.den)
    if poles.size == 0:
        return True, poles
    eps = stability_tolerance(poles)
    return bool(np.all(poles.real < -eps)), poles
