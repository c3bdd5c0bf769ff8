"""Bandpass damping controllers and their fixed-structure mu synthesis.

The controller is

    C(s) = M (s / (s^2 + 2 zeta_c w_c s + w_c^2))^n  (s - w_d) / (s + w_d),

an n-th order bandpass centred on the bandgap ``w_c`` followed by a
non-minimum-phase all-pass that supplies the phase lead needed at the
resonance.  Its four continuous parameters are tuned by a bounded
Nelder-Mead search on the peak robust-performance mu upper bound.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .lti import RationalTF, as_grid, freq_response, series_chain
from .lti import InvalidParameterError
from .mu import (
    FAST,
    PRECISE,
    MuProfile,
    _Form,
    _bfgs,
    _normalize,
    _osborne,
    interconnection,
    nominal_closed_loop_poles,
    robust_performance_profile,
    rp_structure,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("gain", "zeta_c", "omega_c", "omega_d")


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class BandpassParams:
    gain: float
    zeta_c: float
    omega_c: float
    order: int = 2
    omega_d: float = 1.0

    def __post_init__(self):
        if not self.gain > 0:
            raise InvalidParameterError("gain must be positive")
        if not 0 < self.zeta_c < 1:
            raise InvalidParameterError("zeta_c must lie in (0, 1)")
        if not (self.omega_c > 0 and self.omega_d > 0):
            raise InvalidParameterError("omega_c and omega_d must be positive")
        if int(self.order) != self.order or self.order < 1:
            raise InvalidParameterError("order must be a positive integer")

    def vector(self):
        return np.array([self.gain, self.zeta_c, self.omega_c, self.omega_d])

    @classmethod
    def from_vector(cls, v, order):
        return cls(float(v[0]), float(v[1]), float(v[2]), int(order), float(v[3]))

    def to_dict(self):
        return asdict(self)


def bandpass_tf(p: BandpassParams) -> RationalTF:
    bp = RationalTF([0.0, 1.0], [p.omega_c**2, 2 * p.zeta_c * p.omega_c, 1.0])
    allpass = RationalTF([-p.omega_d, 1.0], [p.omega_d, 1.0])
    return series_chain([RationalTF.constant(p.gain)] + [bp] * p.order + [allpass])


@dataclass(frozen=True)
class ParamBounds:
    """Box on ``(gain, zeta_c, omega_c, omega_d)`` plus the starting point."""

    low: tuple
    high: tuple
    initial: tuple

    def __post_init__(self):
        lo, hi, x0 = (np.asarray(v, dtype=float) for v in (self.low, self.high, self.initial))
        if lo.shape != (4,) or hi.shape != (4,) or x0.shape != (4,):
            raise InvalidParameterError("bounds need four entries (gain, zeta_c, omega_c, omega_d)")
        if np.any(lo >= hi):
            raise InvalidParameterError("every lower bound must be below its upper bound")
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise InvalidParameterError("initial point lies outside the bounds")
        if lo[0] <= 0 or lo[2] <= 0 or lo[3] <= 0 or lo[1] <= 0 or hi[1] >= 1:
            raise InvalidParameterError("bounds admit invalid controller parameters")

    @classmethod
    def around_mode(cls, mode_low, mode_high, order=2, gain=(1e-3, 10.0), initial_gain=0.1, zeta=(0.05, 0.7),
                    initial_zeta=0.3, omega_d_ratio=(0.2, 10.0), initial_omega_d_ratio=1.2):
        """Default box around the first mode (frequencies in rad/s).

        ``omega_c`` spans ``[0.75 mode_low, 1.25 mode_high]``.  Gains are
        relative to ``(2 zeta w) ** order``, the value at which the bandpass
        has unit magnitude at its centre ``w = mode_low``.
        """
        wc0 = mode_low
        ref = (2 * initial_zeta * wc0) ** order
        return cls(
            (gain[0] * ref, zeta[0], 0.75 * mode_low, omega_d_ratio[0] * wc0),
            (gain[1] * ref, zeta[1], 1.25 * mode_high, omega_d_ratio[1] * mode_high),
            (initial_gain * ref, initial_zeta, wc0, initial_omega_d_ratio * wc0),
        )

    def to_dict(self):
        return {"low": list(self.low), "high": list(self.high), "initial": list(self.initial)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["low"]), tuple(d["high"]), tuple(d["initial"]))


@dataclass(frozen=True)
class SensitivityWeightSpec:
    """Shape of the process-sensitivity template ``1 / W``.

    ``low_freq_bound_db`` is the allowed low-frequency amplification in
    absolute dB, ``rolloff_slope_db`` the template slope (dB/decade, negative)
    above ``rolloff_corner`` (rad/s).  Each notch relaxes the template by
    ``depth`` dB at its centre; ``width`` is the pole damping of the notch
    section, i.e. roughly its relative half-bandwidth.
    """

    low_freq_bound_db: float
    notch_freqs: tuple = ()
    notch_depths: tuple = ()
    notch_widths: tuple = ()
    rolloff_slope_db: float = -40.0
    rolloff_corner: float = 2 * np.pi * 1000.0
    high_freq_limit: float = 100.0  # template flattens this factor above the corner

    def __post_init__(self):
        if not (len(self.notch_freqs) == len(self.notch_depths) == len(self.notch_widths)):
            raise InvalidParameterError("notch frequencies, depths and widths differ in length")
        if np.any(np.diff(self.notch_freqs) <= 0):
            raise InvalidParameterError("notch frequencies must increase")
        if np.any(np.asarray(self.notch_depths) < 0) or np.any(np.asarray(self.notch_widths) <= 0):
            raise InvalidParameterError("notch depths must be >= 0 and widths > 0")
        slope_order = -self.rolloff_slope_db / 20.0
        if slope_order <= 0 or abs(slope_order - round(slope_order)) > 1e-9:
            raise InvalidParameterError("rolloff slope must be a negative multiple of 20 dB/decade")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("notch_freqs", "notch_depths", "notch_widths"):
            d[k] = tuple(d.get(k, ()))
        return cls(**d)


def build_sensitivity_weight(spec: SensitivityWeightSpec) -> RationalTF:
    k = int(round(-spec.rolloff_slope_db / 20.0))
    w_h = spec.rolloff_corner
    w_f = spec.high_freq_limit * w_h
    cap = 10.0 ** (spec.low_freq_bound_db / 20.0)
    hp = RationalTF([1.0, 1.0 / w_h], [1.0, 1.0 / w_f])
    parts = [RationalTF.constant(1.0 / cap)] + [hp] * k
    for wn, depth, width in zip(spec.notch_freqs, spec.notch_depths, spec.notch_widths):
        if depth == 0:
            continue
        zz = width * 10.0 ** (-depth / 20.0)
        parts.append(RationalTF([1.0, 2 * zz / wn, 1 / wn**2], [1.0, 2 * width / wn, 1 / wn**2]))
    return series_chain(parts)


def default_weight_spec(plant, low_freq_margin_db=14.0, depth_db=15.0, width=0.15) -> SensitivityWeightSpec:
    """Template referenced to the nominal DC gain with notches at modes 3 and 4."""
    dc = abs(plant.nominal_tf().dc_gain)
    notch = tuple(plant.modes[j].nominal_mode().pole_freq for j in (2, 3) if j < len(plant.modes))
    return SensitivityWeightSpec(
        low_freq_bound_db=20 * np.log10(dc) + low_freq_margin_db,
        notch_freqs=notch,
        notch_depths=(depth_db,) * len(notch),
        notch_widths=(width,) * len(notch),
    )


def generalized_plant(plant_response, weight_response) -> np.ndarray:
    """``[[W G, -W G], [G, -G]]`` from inputs ``(d, u)`` to outputs ``(z1, x)``."""
    g = np.asarray(plant_response, dtype=complex)
    w = np.asarray(weight_response, dtype=complex)
    p = np.empty(g.shape + (2, 2), dtype=complex)
    p[..., 0, 0] = w * g
    p[..., 0, 1] = -w * g
    p[..., 1, 0] = g
    p[..., 1, 1] = -g
    return p


def close_generalized(p, controller_response):
    """Lower LFT with ``u = C x``: ``P11 + P12 C (1 - P22 C)^-1 P21``."""
    c = np.asarray(controller_response, dtype=complex)
    return p[..., 0, 0] + p[..., 0, 1] * c * p[..., 1, 0] / (1.0 - p[..., 1, 1] * c)


def analysis_grid(mode_freqs, f_lo=1.0, f_hi=5000.0, n_log=600, n_extra=40, band=0.10):
    """Log grid (Hz range) densified within +-band of each modal frequency (rad/s)."""
    w = 2 * np.pi * np.logspace(np.log10(f_lo), np.log10(f_hi), n_log)
    extra = [np.linspace((1 - band) * wm, (1 + band) * wm, n_extra) for wm in mode_freqs]
    return np.unique(np.concatenate([w] + extra))


# --------------------------------------------------------------------------
# bounded Nelder-Mead


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    nfev: int
    history: list = field(default_factory=list)  # best value after every accepted step


def bounded_simplex(fun, x0, lo, hi, rng, max_fev=300, init_step=0.15, xtol=1e-4, ftol=1e-5):
    """Nelder-Mead on the unit box with projection onto the bounds.

    ``x0``, ``lo``, ``hi`` are in the caller's coordinates; the simplex lives
    in normalized ``[0, 1]`` coordinates.  The initial simplex is a randomly
    rotated regular one of edge ``init_step`` (seeded through ``rng``).
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    n = lo.size
    if max_fev < n + 1:
        raise ValueError(f"max_fev must be at least {n + 1} to build the initial simplex")

    def to_x(u):
        return lo + np.clip(u, 0.0, 1.0) * (hi - lo)

    nfev = 0
    cache = {}

    def f(u):
        nonlocal nfev
        u = np.clip(u, 0.0, 1.0)
        key = u.tobytes()
        if key not in cache:
            if nfev >= max_fev:
                raise _BudgetExhausted
            nfev += 1
            cache[key] = float(fun(to_x(u)))
        return cache[key]

    u0 = (np.asarray(x0, float) - lo) / (hi - lo)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    simplex = [np.clip(u0, 0, 1)] + [np.clip(u0 + init_step * q[:, i], 0, 1) for i in range(n)]
    vals = [f(u) for u in simplex]
    history = [min(vals)]
    try:
        _nelder_mead_steps(f, simplex, vals, history, xtol, ftol)
    except _BudgetExhausted:
        pass
    k = int(np.argmin(vals))
    return SimplexResult(to_x(simplex[k]), vals[k], nfev, history)


class _BudgetExhausted(Exception):
    pass


def _nelder_mead_steps(f, simplex, vals, history, xtol, ftol):
    """Iterate in place on ``simplex``/``vals`` until converged or out of budget."""
    while True:
        order = np.argsort(vals, kind="stable")
        simplex[:] = [simplex[i] for i in order]
        vals[:] = [vals[i] for i in order]
        spread = max(np.max(np.abs(u - simplex[0])) for u in simplex[1:])
        if spread < xtol or abs(vals[-1] - vals[0]) <= ftol * max(abs(vals[0]), 1e-12) and spread < 10 * xtol:
            break
        centroid = np.mean(simplex[:-1], axis=0)
        worst = simplex[-1]
        xr = np.clip(centroid + (centroid - worst), 0, 1)
        fr = f(xr)
        if fr < vals[0]:
            xe = np.clip(centroid + 2.0 * (centroid - worst), 0, 1)
            fe = f(xe)
            simplex[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < vals[-2]:
            simplex[-1], vals[-1] = xr, fr
        else:
            if fr < vals[-1]:
                xc = np.clip(centroid + 0.5 * (xr - centroid), 0, 1)
            else:
                xc = np.clip(centroid + 0.5 * (worst - centroid), 0, 1)
            fc = f(xc)
            if fc < min(fr, vals[-1]):
                simplex[-1], vals[-1] = xc, fc
            else:
                best = simplex[0]
                for i in range(1, len(simplex)):
                    u = best + 0.5 * (simplex[i] - best)
                    vals[i] = f(u)
                    simplex[i] = u
        history.append(min(vals))


# --------------------------------------------------------------------------
# objective


class PeakMuObjective:
    """Peak mixed-mu upper bound over a grid, evaluated lazily.

    Every frequency keeps the D,G scalings of its last refinement.  A new
    candidate is first bounded with those stored scalings (one eigenvalue
    solve per frequency, always a valid bound); only frequencies whose
    stored-scaling bound exceeds the best refined value so far are
    re-optimized.  The returned peak is therefore a valid upper bound on the
    grid maximum of mu.
    """

    def __init__(self, plant, weight, grid, order=2, temps=FAST, batch=16, stability_scale=None):
        self.plant = plant
        self.grid = as_grid(grid)
        self.comp = plant.components(self.grid)
        self.wresp = freq_response(weight, self.grid)
        self.structure = rp_structure(plant)
        self.order = order
        self.temps = temps
        self.batch = batch
        self.x = None
        self.nfev = 0
        self.n_refined = 0
        self.stability_scale = stability_scale or plant.modes[0].nominal_mode().pole_freq

    def controller(self, v):
        return bandpass_tf(BandpassParams.from_vector(v, self.order))

    def matrices(self, ctrl):
        return interconnection(self.comp, freq_response(ctrl, self.grid), self.wresp)

    def __call__(self, v):
        self.nfev += 1
        try:
            ctrl = self.controller(v)
        except InvalidParameterError:
            return 1e3
        stable, poles = nominal_closed_loop_poles(self.plant, ctrl)
        if not stable:
            return 10.0 + max(0.0, float(poles.real.max())) / self.stability_scale
        return self.peak(self.matrices(ctrl))

    def peak(self, m):
        mn, scale = _normalize(m)
        form = _Form(mn, self.structure, use_g=True)
        if self.x is None:
            xd = _osborne(mn, self.structure)
            self.x = np.concatenate([xd, np.zeros((mn.shape[0], form.ng))], axis=1)
        ub = np.sqrt(np.maximum(form.lam_max(self.x), 0.0)) * scale
        refined = np.zeros(ub.size, dtype=bool)
        best = -np.inf
        while True:
            cand = np.flatnonzero(~refined & (ub > best))
            if cand.size == 0:
                break
            cand = cand[np.argsort(-ub[cand], kind="stable")][: self.batch]
            sub = _Form(mn[cand], self.structure, use_g=True)
            x_new, lam = _bfgs(sub, self.x[cand], self.temps)
            val = np.sqrt(np.maximum(lam, 0.0)) * scale[cand]
            keep = val <= ub[cand]
            self.x[cand[keep]] = x_new[keep]
            ub[cand] = np.minimum(ub[cand], val)
            refined[cand] = True
            self.n_refined += cand.size
            best = max(best, float(ub[cand].max()))
        return float(ub.max())


@dataclass
class SynthesisResult:
    params: BandpassParams
    profile: MuProfile
    nfev: int
    wall_time: float
    restarts: list
    history: list

    @property
    def mu_peak(self):
        return self.profile.peak_upper

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "mu_peak": self.mu_peak,
            "mu_peak_freq_hz": self.profile.peak_freq / (2 * np.pi),
            "evaluations": self.nfev,
            "wall_time_s": self.wall_time,
            "restarts": self.restarts,
        }


def synthesize(plant, weight, bounds: ParamBounds, order=2, seed=0, grid=None, restarts=5,
               max_fev=200, temps=FAST, final_temps=PRECISE):
    """Minimize the peak robust-performance mu over the bandpass parameters.

    The search uses normalized coordinates with ``gain``, ``omega_c`` and
    ``omega_d`` on a log scale.  Restart 0 starts at ``bounds.initial``;
    later restarts start from the incumbent with a freshly rotated,
    smaller simplex.
    """
    t0 = time.perf_counter()
    if grid is None:
        grid = analysis_grid([m.nominal_mode().pole_freq for m in plant.modes])
    obj = PeakMuObjective(plant, weight, grid, order=order, temps=temps)
    init_ctrl = bandpass_tf(BandpassParams.from_vector(bounds.initial, order))
    if not nominal_closed_loop_poles(plant, init_ctrl)[0]:
        log.warning("initial controller does not stabilize the nominal loop")
    logmask = np.array([True, False, True, True])
    lo = np.where(logmask, np.log(bounds.low), bounds.low)
    hi = np.where(logmask, np.log(bounds.high), bounds.high)

    def fwd(v):
        return np.where(logmask, np.log(v), v)

    def back(y):
        return np.where(logmask, np.exp(y), y)

    rng = np.random.default_rng(seed)
    best_y = fwd(np.asarray(bounds.initial, float))
    best_f = np.inf
    history = []
    runs = []
    for k in range(restarts):
        step = 0.15 if k == 0 else 0.15 / (1 + k)
        res = bounded_simplex(lambda y: obj(back(y)), best_y, lo, hi, rng, max_fev=max_fev, init_step=step)
        runs.append({"restart": k, "best": res.fun, "evaluations": res.nfev})
        history.extend(min(best_f, h) for h in res.history)
        log.info("restart %d: peak mu %.4f after %d evaluations", k, res.fun, res.nfev)
        if res.fun < best_f:
            best_f, best_y = res.fun, res.x
    if best_f >= 10.0:
        raise SynthesisError("no candidate stabilized the nominal loop")
    params = BandpassParams.from_vector(back(best_y), order)
    ctrl = bandpass_tf(params)
    stable, _ = nominal_closed_loop_poles(plant, ctrl)
    assert stable, "synthesis returned a nominally destabilizing controller"
    profile = robust_performance_profile(plant, ctrl, weight, grid, temps=final_temps)
    return SynthesisResult(params, profile, obj.nfev, time.perf_counter() - t0, runs, history)
