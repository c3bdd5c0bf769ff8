"""Structured and unstructured uncertainty models of resonant plants.

Each resonance/anti-resonance pair ``g_j`` gets up to four real parametric
channels: the numerator coefficients ``n1, n2`` enter through an input
multiplicative factor ``1 + w_n1 d_n1 + w_n2 d_n2`` and the denominator
coefficients ``d1, d2`` through an inverse multiplicative factor
``1 / (1 - w_d1 d_d1 - w_d2 d_d2)``.  With the weights built by
:func:`structured_weights` this product is algebraically identical to
substituting ``mean * (1 + radius * delta)`` for every coefficient.

Everything not covered by the active parametric channels is lumped into one
complex output-multiplicative block ``1 + W_u Delta_u``.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import least_squares, minimize

from .lti import (
    InvalidParameterError,
    ModePair,
    RationalTF,
    as_grid,
    freq_response,
    series_chain,
)

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-4
RESIDUAL_SAMPLES = 256
VERTEX_CAP = 2**12
VARIANTS = ("M01", "M11", "M31", "custom")

# multiplicative ("m") blocks move zeros, inverse multiplicative ("i") move poles
VARIANT_BLOCKS = {
    "M01": (),
    "M11": ("i1",),
    "M31": ("i1", "i3", "i4", "m3", "m4"),
}


class UncertaintyError(ValueError):
    pass


class SingularPerturbationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class UncertainCoefficient:
    mean: float
    radius: float

    def __post_init__(self):
        if not self.mean > 0:
            raise UncertaintyError(f"coefficient mean must be positive, got {self.mean}")
        if not 0 <= self.radius < 1:
            raise UncertaintyError(
                f"relative radius {self.radius:.4g} outside [0, 1); "
                "the coefficient would be allowed to change sign"
            )

    def at(self, delta):
        return self.mean * (1.0 + self.radius * delta)


def relative_radii(samples) -> UncertainCoefficient:
    """Arithmetic mean and ``(max - min) / (2 mean)`` of positive samples."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise UncertaintyError("no coefficient samples")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise UncertaintyError("coefficient samples must be positive and finite")
    mean = float(x.mean())
    radius = float((x.max() - x.min()) / (2.0 * mean))
    return UncertainCoefficient(mean, radius)


@dataclass(frozen=True)
class ModePairStats:
    d2: UncertainCoefficient
    d1: UncertainCoefficient
    n2: UncertainCoefficient | None = None
    n1: UncertainCoefficient | None = None

    def __post_init__(self):
        if (self.n1 is None) != (self.n2 is None):
            raise UncertaintyError("n1 and n2 must both be given or both absent")

    @property
    def has_zero(self):
        return self.n2 is not None

    def nominal_mode(self) -> ModePair:
        p = 1.0 / np.sqrt(self.d2.mean)
        zp = self.d1.mean * p / 2.0
        if not self.has_zero:
            return ModePair(p, zp)
        z = 1.0 / np.sqrt(self.n2.mean)
        return ModePair(p, zp, z, self.n1.mean * z / 2.0)

    def nominal_tf(self) -> RationalTF:
        num = [1.0, self.n1.mean, self.n2.mean] if self.has_zero else [1.0]
        return RationalTF(num, [1.0, self.d1.mean, self.d2.mean])

    def coefficient(self, name) -> UncertainCoefficient | None:
        return getattr(self, name)

    def to_dict(self):
        def c(u):
            return None if u is None else {"mean": u.mean, "radius": u.radius}

        return {k: c(getattr(self, k)) for k in ("n2", "n1", "d2", "d1")}

    @classmethod
    def from_dict(cls, d):
        def c(u):
            return None if u is None else UncertainCoefficient(u["mean"], u["radius"])

        return cls(d2=c(d["d2"]), d1=c(d["d1"]), n2=c(d.get("n2")), n1=c(d.get("n1")))


@dataclass(frozen=True)
class Channel:
    """One real parametric channel ``delta`` of one mode."""

    mode: int  # zero-based mode index
    coef: str  # "n1", "n2", "d1" or "d2"
    weight: RationalTF

    @property
    def block(self):
        return ("m" if self.coef[0] == "n" else "i") + str(self.mode + 1)

    @property
    def label(self):
        return f"delta_{self.coef}_{self.mode + 1}"

    @property
    def inverse(self):
        return self.coef[0] == "d"


@dataclass(frozen=True)
class StructuredWeightSet:
    """Column weights of one mode; the row weights are fixed to ``[1 1]``."""

    w_m2: tuple  # (n1 channel, n2 channel) RationalTF or None when radius is 0
    w_i2: tuple  # (d1 channel, d2 channel)
    w_m1: tuple = (1.0, 1.0)
    w_i1: tuple = (1.0, 1.0)

    @property
    def active(self):
        names = ("n1", "n2", "d1", "d2")
        return {n: w is not None for n, w in zip(names, self.w_m2 + self.w_i2)}

    def weight(self, coef):
        return {"n1": self.w_m2[0], "n2": self.w_m2[1], "d1": self.w_i2[0], "d2": self.w_i2[1]}[coef]

    @property
    def is_empty(self):
        return not any(self.active.values())


def structured_weights(stats: ModePairStats) -> StructuredWeightSet:
    """Weights turning the LFT form into direct coefficient substitution.

    Channels with zero radius are dropped (weight ``None``).
    """
    d_den = [1.0, stats.d1.mean, stats.d2.mean]
    w_d1 = w_d2 = w_n1 = w_n2 = None
    if stats.d1.radius > 0:
        w_d1 = RationalTF([0.0, -stats.d1.mean * stats.d1.radius], d_den)
    if stats.d2.radius > 0:
        w_d2 = RationalTF([0.0, 0.0, -stats.d2.mean * stats.d2.radius], d_den)
    if stats.has_zero:
        n_den = [1.0, stats.n1.mean, stats.n2.mean]
        if stats.n1.radius > 0:
            w_n1 = RationalTF([0.0, stats.n1.mean * stats.n1.radius], n_den)
        if stats.n2.radius > 0:
            w_n2 = RationalTF([0.0, 0.0, stats.n2.mean * stats.n2.radius], n_den)
    return StructuredWeightSet(w_m2=(w_n1, w_n2), w_i2=(w_d1, w_d2))


def _check_delta(values):
    v = np.asarray(values, dtype=float)
    if np.any(np.abs(v) > 1.0 + 1e-12):
        raise UncertaintyError("real perturbations must lie in [-1, 1]")
    return v


def perturbed_mode_tf(stats: ModePairStats, delta: dict) -> RationalTF:
    """Substitute ``mean * (1 + radius * delta)`` into every coefficient.

    ``delta`` maps coefficient names (``"n1"``, ``"n2"``, ``"d1"``, ``"d2"``)
    to values in [-1, 1]; missing names mean zero.
    """
    _check_delta(list(delta.values()))
    d1 = stats.d1.at(delta.get("d1", 0.0))
    d2 = stats.d2.at(delta.get("d2", 0.0))
    if stats.has_zero:
        num = [1.0, stats.n1.at(delta.get("n1", 0.0)), stats.n2.at(delta.get("n2", 0.0))]
    else:
        num = [1.0]
    return RationalTF(num, [1.0, d1, d2])


def lft_mode_response(stats, weights: StructuredWeightSet, delta: dict, grid) -> np.ndarray:
    """Frequency response of ``g (1 - W_i1 D_i W_i2)^-1 (1 + W_m1 D_m W_m2)``."""
    _check_delta(list(delta.values()))
    w = as_grid(grid)
    g = freq_response(stats.nominal_tf(), w)
    mult = np.ones_like(g)
    inv = np.ones_like(g)
    for coef in ("n1", "n2"):
        wt = weights.weight(coef)
        if wt is not None and delta.get(coef, 0.0):
            mult = mult + freq_response(wt, w) * delta[coef]
    for coef in ("d1", "d2"):
        wt = weights.weight(coef)
        if wt is not None and delta.get(coef, 0.0):
            inv = inv - freq_response(wt, w) * delta[coef]
    if np.any(np.abs(inv) < 1e-300):
        raise SingularPerturbationError("inverse multiplicative factor is singular")
    return g * mult / inv


def lft_mode_tf(stats, weights: StructuredWeightSet, delta: dict) -> RationalTF:
    """Rational form of the LFT-perturbed mode, built by polynomial algebra."""
    _check_delta(list(delta.values()))
    g = stats.nominal_tf()
    # 1 + sum(w_c delta_c) over the shared denominator of the numerator weights
    mult_num = np.array(g.num, dtype=float)
    for coef in ("n1", "n2"):
        wt = weights.weight(coef)
        if wt is not None:
            mult_num = P.polyadd(mult_num, wt.num * delta.get(coef, 0.0))
    inv_num = np.array(g.den, dtype=float)
    for coef in ("d1", "d2"):
        wt = weights.weight(coef)
        if wt is not None:
            inv_num = P.polysub(inv_num, wt.num * delta.get(coef, 0.0))
    # g * (mult_num / g.num) * (g.den / inv_num) = mult_num / inv_num
    if np.allclose(inv_num, 0.0):
        raise SingularPerturbationError("inverse multiplicative factor is singular")
    return RationalTF(mult_num, inv_num)


def relative_error(measured, modeled) -> np.ndarray:
    """``|measured - modeled| / |modeled|`` pointwise."""
    measured = np.asarray(measured, dtype=complex)
    modeled = np.asarray(modeled, dtype=complex)
    if measured.shape != modeled.shape:
        raise ValueError("measured and modeled responses differ in length")
    mag = np.abs(modeled)
    if np.any(mag < 1e-300):
        raise ZeroDivisionError("modeled response vanishes at a grid point")
    return np.abs(measured - modeled) / mag


def envelope_over_set(errors) -> np.ndarray:
    errors = [np.asarray(e, dtype=float) for e in errors]
    if not errors:
        raise ValueError("empty error set")
    return np.max(np.vstack(errors), axis=0)


# --------------------------------------------------------------------------
# unstructured weight fitting


@dataclass(frozen=True)
class UnstructuredWeight:
    weight: RationalTF
    floor: float = WEIGHT_FLOOR
    metadata: dict = field(default_factory=dict)

    def response(self, grid):
        return freq_response(self.weight, grid)

    def to_dict(self):
        return {"weight": self.weight.to_dict(), "floor": self.floor, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d):
        return cls(RationalTF.from_dict(d["weight"]), d["floor"], d.get("metadata", {}))


def _sections_logmag(params, w):
    """log|W| for ``gain * prod(section)`` with log-parametrized sections."""
    out = np.full(w.shape, params[0])
    for lwz, lzz, lwp, lzp in params[1:].reshape(-1, 4):
        wz, zz, wp, zp = np.exp([lwz, lzz, lwp, lzp])
        rz = w / wz
        rp = w / wp
        out += 0.5 * np.log((1 - rz**2) ** 2 + (2 * zz * rz) ** 2)
        out -= 0.5 * np.log((1 - rp**2) ** 2 + (2 * zp * rp) ** 2)
    return out


def _sections_tf(params) -> RationalTF:
    tfs = [RationalTF.constant(float(np.exp(params[0])))]
    for lwz, lzz, lwp, lzp in params[1:].reshape(-1, 4):
        wz, zz, wp, zp = np.exp([lwz, lzz, lwp, lzp])
        tfs.append(RationalTF([1.0, 2 * zz / wz, 1 / wz**2], [1.0, 2 * zp / wp, 1 / wp**2]))
    return series_chain(tfs)


def _local_peaks(y, x, count, min_ratio=1.3):
    """Indices of the ``count`` largest local maxima of ``y`` at least
    ``min_ratio`` apart in ``x``."""
    k = np.flatnonzero((y[1:-1] >= y[:-2]) & (y[1:-1] > y[2:])) + 1
    chosen = []
    for i in k[np.argsort(-y[k], kind="stable")]:
        if all(max(x[i], x[j]) / min(x[i], x[j]) >= min_ratio for j in chosen):
            chosen.append(i)
        if len(chosen) == count:
            break
    return np.array(sorted(chosen), dtype=int)


def fit_unstructured_weight(
    envelope, grid, order=6, margin=0.05, floor=WEIGHT_FLOOR, under_penalty=10.0, polish=True
) -> UnstructuredWeight:
    """Stable minimum-phase weight overbounding ``envelope * (1 + margin)``.

    The shape is a gain times ``order / 2`` second-order sections
    ``(s^2/wz^2 + 2 zz s/wz + 1) / (s^2/wp^2 + 2 zp s/wp + 1)`` with all
    parameters positive, fitted in log-magnitude (under-coverage is
    penalized more heavily than over-coverage).  Two starts are tried:
    sections added greedily at the worst remaining under-coverage, and
    sections seeded at the largest peaks of the target.  Each fit is
    rescaled by the smallest factor that restores coverage at every grid
    point, and the one with the least mean log excess is kept.  With
    ``polish`` the mean log excess is then minimized directly subject to
    coverage (SLSQP); the polished shape is kept only if it is better.
    """
    w = as_grid(grid)
    env = np.asarray(envelope, dtype=float)
    if env.shape != w.shape:
        raise ValueError("envelope and grid lengths differ")
    if np.any(env < 0) or not np.all(np.isfinite(env)):
        raise ValueError("envelope must be finite and nonnegative")
    if order % 2 or order < 0:
        raise InvalidParameterError(f"order must be a nonnegative even integer, got {order}")
    if margin < 0:
        raise InvalidParameterError("margin must be nonnegative")

    target = np.maximum(env * (1.0 + margin), floor)
    lt = np.log(target)
    n_sec = order // 2
    meta = {"order": order, "margin": margin, "fallback": False}
    lw = np.log(w)
    lo_w, hi_w = lw[0] - np.log(10.0), lw[-1] + np.log(10.0)
    lz_lo, lz_hi = np.log(1e-3), np.log(10.0)

    def resid(p):
        r = _sections_logmag(p, w) - lt
        return np.where(r < 0, under_penalty * r, r)

    def bounds(n):
        lb = np.concatenate([[-np.inf], np.tile([lo_w, lz_lo, lo_w, lz_lo], n)])
        ub = np.concatenate([[np.inf], np.tile([hi_w, lz_hi, hi_w, lz_hi], n)])
        return lb, ub

    def refit(params):
        lb, ub = bounds(len(params) // 4)
        params = np.clip(params, lb + 1e-9, ub - 1e-9)
        return least_squares(resid, params, bounds=(lb, ub), x_scale="jac", max_nfev=400).x

    def bump(k, height):
        zp = 0.05
        zz = float(np.clip(zp * np.clip(height, 1.5, 1e3), zp, 5.0))
        return [lw[k], np.log(zz), lw[k], np.log(zp)]

    def greedy():
        params = np.array([float(np.median(lt))])
        for _ in range(n_sec):
            gap = lt - _sections_logmag(params, w)
            k = int(np.argmax(gap))
            params = refit(np.concatenate([params, bump(k, np.exp(gap[k]))]))
        return params

    def peaks():
        base = float(np.median(lt))
        ks = _local_peaks(lt, w, n_sec)
        if len(ks) < n_sec:
            return None
        secs = [bump(k, np.exp(lt[k] - base)) for k in ks]
        return refit(np.concatenate([[base]] + secs))

    def excess(params):
        return float(np.mean(_sections_logmag(params, w) - lt) + np.max(lt - _sections_logmag(params, w)))

    candidates = []
    try:
        if n_sec == 0:
            candidates.append(least_squares(resid, np.array([float(np.median(lt))]), max_nfev=200).x)
        else:
            for start in (greedy, peaks):
                params = start()
                if params is not None and np.all(np.isfinite(params)):
                    candidates.append(params)
        if not candidates:
            raise FloatingPointError("non-finite weight parameters")
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("weight fit failed (%s); using constant overbound", exc)
        candidates = [np.array([float(lt.max())])]
        meta["fallback"] = True

    params = min(candidates, key=excess).copy()
    params[0] += float(np.max(lt - _sections_logmag(params, w)))
    if polish and n_sec and not meta["fallback"]:
        lb, ub = bounds(n_sec)
        with warnings.catch_warnings():
            # SLSQP clips trial points to the bounds and says so
            warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
            sol = minimize(
                lambda p: float(np.mean(_sections_logmag(p, w) - lt)),
                np.clip(params, lb + 1e-9, ub - 1e-9),
                method="SLSQP",
                bounds=list(zip(np.where(np.isfinite(lb), lb, None), np.where(np.isfinite(ub), ub, None))),
                constraints=[{"type": "ineq", "fun": lambda p: _sections_logmag(p, w) - lt}],
                options={"maxiter": 300},
            )
        cand = sol.x.copy()
        if np.all(np.isfinite(cand)):
            cand[0] += max(0.0, float(np.max(lt - _sections_logmag(cand, w))))
            if excess(cand) < excess(params):
                params = cand
                meta["polished"] = True
    tf = _sections_tf(params)
    mag = np.abs(freq_response(tf, w))
    # guard against roundoff in the rescaling step
    short = np.max(target / mag)
    if short > 1.0:
        tf = tf * float(short * (1 + 1e-12))
    meta["params"] = params.tolist()
    meta["log_rms_excess"] = float(np.sqrt(np.mean((np.log(np.abs(freq_response(tf, w))) - lt) ** 2)))
    return UnstructuredWeight(tf, floor, meta)


# --------------------------------------------------------------------------
# composed uncertain plant


@dataclass(frozen=True)
class UncertainPlant:
    modes: tuple  # ModePairStats per mode
    weights: tuple  # StructuredWeightSet per mode
    channels: tuple  # active Channel objects, in chain order
    actuator: RationalTF
    delay: float
    unstructured: UnstructuredWeight | None
    variant: str = "custom"

    @property
    def n_real(self):
        return len(self.channels)

    @property
    def channel_labels(self):
        return [c.label for c in self.channels]

    def nominal_tf(self) -> RationalTF:
        chain = series_chain([m.nominal_tf() for m in self.modes] + [self.actuator])
        return RationalTF(chain.num, chain.den, self.delay)

    def components(self, grid):
        return PlantComponents.build(self, grid)

    def to_dict(self):
        return {
            "variant": self.variant,
            "modes": [m.to_dict() for m in self.modes],
            "active_blocks": sorted({c.block for c in self.channels}),
            "channels": self.channel_labels,
            "actuator": self.actuator.to_dict(),
            "delay_s": self.delay,
            "unstructured": None if self.unstructured is None else self.unstructured.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        modes = [ModePairStats.from_dict(m) for m in d["modes"]]
        unst = None if d["unstructured"] is None else UnstructuredWeight.from_dict(d["unstructured"])
        plant = build_structured(modes, RationalTF.from_dict(d["actuator"]), d["delay_s"], d["variant"],
                                 blocks=d["active_blocks"])
        return UncertainPlant(plant.modes, plant.weights, plant.channels, plant.actuator, plant.delay,
                              unst, plant.variant)


@dataclass
class PlantComponents:
    """Per-frequency responses of every element of the uncertain chain."""

    grid: np.ndarray
    modes: np.ndarray  # (n_modes, F) nominal g_j
    tail: np.ndarray  # actuator * delay
    channel_weights: np.ndarray  # (n_real, F)
    channel_mode: np.ndarray  # (n_real,)
    channel_inverse: np.ndarray  # (n_real,) bool
    wu: np.ndarray | None  # (F,)

    @classmethod
    def build(cls, plant: UncertainPlant, grid):
        w = as_grid(grid)
        modes = np.array([freq_response(m.nominal_tf(), w) for m in plant.modes])
        tail = freq_response(RationalTF(plant.actuator.num, plant.actuator.den, plant.delay), w)
        cw = np.array([freq_response(c.weight, w) for c in plant.channels]).reshape(len(plant.channels), w.size)
        wu = None if plant.unstructured is None else plant.unstructured.response(w)
        return cls(
            w,
            modes,
            tail,
            cw,
            np.array([c.mode for c in plant.channels], dtype=int),
            np.array([c.inverse for c in plant.channels], dtype=bool),
            wu,
        )

    @property
    def nominal(self):
        return np.prod(self.modes, axis=0) * self.tail

    def structured(self, deltas) -> np.ndarray:
        """Structured-model responses for a batch of real deltas ``(S, n_real)``."""
        deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
        if deltas.shape[1] != self.channel_weights.shape[0]:
            raise ValueError(f"expected {self.channel_weights.shape[0]} real channels, got {deltas.shape[1]}")
        out = np.broadcast_to(self.nominal, (deltas.shape[0], self.grid.size)).copy()
        for j in np.unique(self.channel_mode):
            sel = self.channel_mode == j
            mult = 1.0 + deltas[:, sel & ~self.channel_inverse] @ self.channel_weights[sel & ~self.channel_inverse]
            inv = 1.0 - deltas[:, sel & self.channel_inverse] @ self.channel_weights[sel & self.channel_inverse]
            if np.any(np.abs(inv) < 1e-300):
                raise SingularPerturbationError("inverse multiplicative factor is singular")
            out *= mult / inv
        return out


def _channels_for(modes, weights, blocks):
    channels = []
    for j, (st, ws) in enumerate(zip(modes, weights)):
        for coef in ("n1", "n2", "d1", "d2"):
            blk = ("m" if coef[0] == "n" else "i") + str(j + 1)
            wt = ws.weight(coef)
            if blk in blocks and wt is not None:
                channels.append(Channel(j, coef, wt))
    return channels


def build_structured(mode_stats, actuator, delay, variant="custom", blocks=None) -> UncertainPlant:
    """Structured part only (no unstructured weight)."""
    variant = variant.upper() if variant.lower() != "custom" else "custom"
    if variant not in VARIANTS:
        raise UncertaintyError(f"unknown variant {variant!r}")
    if blocks is None:
        if variant == "custom":
            raise UncertaintyError("custom variant needs an explicit block list")
        blocks = VARIANT_BLOCKS[variant]
    blocks = tuple(blocks)
    mode_stats = tuple(mode_stats)
    if not mode_stats:
        raise UncertaintyError("at least one mode is required")
    for b in blocks:
        if b[0] not in "mi" or not b[1:].isdigit():
            raise UncertaintyError(f"bad block label {b!r}")
        j = int(b[1:])
        if not 1 <= j <= len(mode_stats):
            raise UncertaintyError(f"block {b} references mode {j} but only {len(mode_stats)} modes exist")
        if b[0] == "m" and not mode_stats[j - 1].has_zero:
            # no anti-resonance: the multiplicative block is identically 1
            continue
    weights = tuple(structured_weights(s) for s in mode_stats)
    channels = tuple(_channels_for(mode_stats, weights, set(blocks)))
    return UncertainPlant(mode_stats, weights, channels, actuator, float(delay), None, variant)


def _sample_box(rng, n, k):
    return rng.uniform(-1.0, 1.0, size=(n, k))


def best_fit_deltas(comp: PlantComponents, measured, n_samples=RESIDUAL_SAMPLES, seed=0):
    """Closest structured member (in relative error) to each measured FRF.

    The starting point is the best of ``n_samples`` seeded box draws plus all
    vertices (when few), refined by bounded least squares on the complex
    relative error.
    """
    k = comp.channel_weights.shape[0]
    measured = np.atleast_2d(measured)
    if k == 0:
        return np.zeros((measured.shape[0], 0))
    rng = np.random.default_rng(seed)
    cand = [np.zeros((1, k)), _sample_box(rng, n_samples, k)]
    if k <= 10:
        cand.append(np.array(list(itertools.product((-1.0, 1.0), repeat=k))))
    cand = np.vstack(cand)
    resp = comp.structured(cand)
    out = []
    for g_e in measured:
        err = np.abs(g_e[None, :] - resp) / np.abs(resp)
        start = cand[int(np.argmin(np.mean(err**2, axis=1)))]

        def r(d, g_e=g_e):
            m = comp.structured(d[None, :])[0]
            e = (g_e - m) / m
            return np.concatenate([e.real, e.imag])

        sol = least_squares(r, start, bounds=(-1.0, 1.0), max_nfev=200 * (k + 1))
        out.append(np.clip(sol.x, -1.0, 1.0))
    return np.array(out)


def assemble_uncertain_plant(
    mode_stats,
    actuator,
    delay,
    variant,
    measured_set=None,
    grid=None,
    blocks=None,
    order=6,
    margin=0.05,
    seed=0,
) -> UncertainPlant:
    """Compose the uncertain plant of one variant.

    ``measured_set`` is a sequence of complex responses on ``grid`` (or
    FRFData objects); the unstructured weight covers, for every member, the
    relative error left after the best-fitting structured member.
    """
    plant = build_structured(mode_stats, actuator, delay, variant, blocks)
    if measured_set is None:
        return plant
    measured = []
    for m in measured_set:
        if hasattr(m, "response"):
            if grid is None:
                grid = m.grid
            elif not np.array_equal(m.grid, grid):
                raise ValueError("measured FRFs must share the fitting grid")
            m = m.response
        measured.append(np.asarray(m, dtype=complex))
    grid = as_grid(grid)
    comp = plant.components(grid)
    deltas = best_fit_deltas(comp, np.array(measured), seed=seed)
    if deltas.shape[1]:
        fits = comp.structured(deltas)
    else:
        fits = np.broadcast_to(comp.nominal, (len(measured), grid.size))
    env = envelope_over_set([relative_error(g, f) for g, f in zip(measured, fits)])
    wu = fit_unstructured_weight(env, grid, order=order, margin=margin)
    meta = dict(wu.metadata)
    meta["best_fit_deltas"] = deltas.tolist()
    meta["residual_peak"] = float(env.max())
    wu = UnstructuredWeight(wu.weight, wu.floor, meta)
    return UncertainPlant(plant.modes, plant.weights, plant.channels, plant.actuator, plant.delay, wu, plant.variant)


def sample_uncertain(plant: UncertainPlant, delta, delta_u, grid, components=None) -> np.ndarray:
    """Response of the full chain for one real ``delta`` vector and ``Delta_u``.

    ``delta_u`` may be a scalar or a per-frequency array of modulus <= 1.
    """
    comp = components if components is not None else plant.components(grid)
    delta = _check_delta(np.atleast_1d(np.asarray(delta, dtype=float)))
    du = np.asarray(delta_u, dtype=complex)
    if np.any(np.abs(du) > 1.0 + 1e-12):
        raise UncertaintyError("|Delta_u| must not exceed 1")
    g = comp.structured(delta.reshape(1, -1))[0]
    if comp.wu is not None:
        g = g * (1.0 + comp.wu * du)
    return g


def vertex_and_random_deltas(k, n_random, include_vertices=True, seed=0):
    rng = np.random.default_rng(seed)
    parts = [np.zeros((1, k))]
    if include_vertices and k:
        if 2**k <= VERTEX_CAP:
            parts.append(np.array(list(itertools.product((-1.0, 1.0), repeat=k))))
        else:
            parts.append(rng.choice([-1.0, 1.0], size=(VERTEX_CAP, k)))
    if n_random and k:
        parts.append(_sample_box(rng, n_random, k))
    return np.vstack(parts)


def envelope(plant: UncertainPlant, grid, n_random=1024, include_vertices=True, seed=0, floor_db=-240.0):
    """Per-frequency ``(min_db, max_db)`` of the uncertain set.

    Real channels are sampled at all vertices plus ``n_random`` interior
    points.  The complex block contributes its exact extremes over the unit
    disk, ``1 + |W_u|`` and ``max(0, 1 - |W_u|)``; where the lower factor
    vanishes the minimum is clipped to ``floor_db``.
    """
    comp = plant.components(grid)
    deltas = vertex_and_random_deltas(plant.n_real, n_random, include_vertices, seed)
    mags = np.abs(comp.structured(deltas))
    lo = mags.min(axis=0)
    hi = mags.max(axis=0)
    if comp.wu is not None:
        a = np.abs(comp.wu)
        hi = hi * (1.0 + a)
        lo = lo * np.maximum(0.0, 1.0 - a)
    floor = 10 ** (floor_db / 20)
    return 20 * np.log10(np.maximum(lo, floor)), 20 * np.log10(np.maximum(hi, floor))
