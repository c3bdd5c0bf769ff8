"""Closed-loop metrics: sensitivities, loop gain, phase margins, damping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .lti import (
    RationalTF,
    as_grid,
    feedback,
    freq_response,
    is_stable,
    rationalize,
    series,
    series_chain,
)
from .uncertainty import perturbed_mode_tf


def _responses(plant, controller, grid):
    w = as_grid(grid)
    return freq_response(plant, w), freq_response(controller, w)


def process_sensitivity(plant: RationalTF, controller: RationalTF, grid) -> np.ndarray:
    """``|G / (1 + G C)|`` on the grid."""
    g, c = _responses(plant, controller, grid)
    return np.abs(g / (1.0 + g * c))


def noise_sensitivity(plant: RationalTF, controller: RationalTF, grid) -> np.ndarray:
    """``|G C / (1 + G C)|``: sensor noise to true position."""
    g, c = _responses(plant, controller, grid)
    return np.abs(g * c / (1.0 + g * c))


@dataclass
class MarginReport:
    crossings: list = field(default_factory=list)  # (freq rad/s, margin deg)
    phases: list = field(default_factory=list)  # loop phase at each crossing, deg
    stable: bool = True
    no_crossings: bool = False

    @property
    def min_margin(self):
        return min((m for _, m in self.crossings), default=float("nan"))

    def to_dict(self):
        return {
            "crossings": [
                {"freq_hz": f / (2 * np.pi), "phase_margin_deg": m, "loop_phase_deg": ph}
                for (f, m), ph in zip(self.crossings, self.phases)
            ],
            "stable": self.stable,
            "no_crossings": self.no_crossings,
        }


def _wrap_deg(a):
    """Map degrees into (-180, 180]."""
    return 180.0 - np.mod(180.0 - a, 360.0)


def phase_margins(loop: RationalTF, grid, rtol=1e-10) -> MarginReport:
    """Phase margin at every 0 dB crossing of ``L(j w)``.

    Crossings are bracketed by sign changes of ``log|L|`` on the grid and
    refined with Brent's method in ``log w``.  The phase is unwrapped along
    the grid and the branch at each crossing is the one nearest the
    unwrapped phase at the left bracket.  The margin is the angular distance
    of ``L(j w_c)`` from -1, ``|180 + phase|`` with ``180 + phase`` taken in
    (-180, 180]: extra lag or extra lead of that size puts the crossing on
    -1.  Bandpass loops cross with phase lead, where the signed
    ``180 + phase`` convention would report the distance with a minus sign.
    """
    w = as_grid(grid)
    resp = freq_response(loop, w)
    with np.errstate(divide="ignore"):  # a zero loop has no crossings
        logmag = np.log(np.abs(resp))
    phase = np.unwrap(np.angle(resp))
    closed = feedback(rationalize(loop), RationalTF.constant(1.0))
    stable, _ = is_stable(closed)
    report = MarginReport(stable=stable)

    def f(lw):
        return float(np.log(np.abs(freq_response(loop, [np.exp(lw)])[0])))

    for k in np.flatnonzero(np.sign(logmag[:-1]) * np.sign(logmag[1:]) < 0):
        lw = brentq(f, np.log(w[k]), np.log(w[k + 1]), xtol=1e-14, rtol=rtol)
        wc = float(np.exp(lw))
        ph = float(np.angle(freq_response(loop, [wc])[0]))
        ph += 2 * np.pi * np.round((phase[k] - ph) / (2 * np.pi))
        report.phases.append(float(np.degrees(ph)))
        report.crossings.append((wc, float(abs(_wrap_deg(180.0 + np.degrees(ph))))))
    report.no_crossings = not report.crossings
    return report


def gain_reduction_at_mode(open_mag, closed_mag, grid, mode_freq, search_band=0.15) -> float:
    """Peak of ``open_mag`` minus peak of ``closed_mag`` within the band, dB."""
    w = as_grid(grid)
    lo, hi = (1 - search_band) * mode_freq, (1 + search_band) * mode_freq
    if lo < w[0] or hi > w[-1]:
        raise ValueError("search band extends outside the grid")
    band = (w >= lo) & (w <= hi)
    if not np.any(band):
        raise ValueError("no grid points inside the search band")
    o = np.asarray(open_mag, dtype=float)[band]
    c = np.asarray(closed_mag, dtype=float)[band]
    return float(20 * np.log10(o.max()) - 20 * np.log10(c.max()))


def loop_metrics(plant: RationalTF, controller: RationalTF, grid) -> dict:
    """Per-frequency PS, S_xn and loop gain (dB) with the loop phase (deg)."""
    g, c = _responses(plant, controller, grid)
    loop = g * c
    with np.errstate(divide="ignore"):  # a zero controller gives -inf dB
        return {
            "ps_db": 20 * np.log10(np.abs(g / (1.0 + loop))),
            "sxn_db": 20 * np.log10(np.abs(loop / (1.0 + loop))),
            "loop_db": 20 * np.log10(np.abs(loop)),
            "loop_phase_deg": np.degrees(np.unwrap(np.angle(loop))),
        }


def perturbed_plant_tf(plant, delta, delta_u=0.0) -> RationalTF:
    """Rational member of an uncertain plant for real ``delta`` and real ``delta_u``.

    ``delta`` follows ``plant.channel_labels``; a real ``delta_u`` in
    [-1, 1] scales the output-multiplicative weight.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (plant.n_real,):
        raise ValueError(f"expected {plant.n_real} channel values, got {delta.shape}")
    per_mode = [dict() for _ in plant.modes]
    for ch, d in zip(plant.channels, delta):
        per_mode[ch.mode][ch.coef] = float(d)
    parts = [perturbed_mode_tf(s, d) for s, d in zip(plant.modes, per_mode)]
    parts.append(plant.actuator)
    if plant.unstructured is not None and delta_u:
        wu = plant.unstructured.weight
        parts.append(RationalTF(np.polynomial.polynomial.polyadd(wu.den, float(delta_u) * wu.num), wu.den))
    chain = series_chain(parts)
    return RationalTF(chain.num, chain.den, plant.delay)


def stability_sweep(plant, controller: RationalTF, n=500, seed=0, include_unstructured=True, pade_order=2):
    """Close the loop around ``n`` random admissible members.

    Returns the number of unstable loops and the largest closed-loop pole
    real part of each sample.
    """
    rng = np.random.default_rng(seed)
    deltas = rng.uniform(-1.0, 1.0, size=(n, plant.n_real))
    dus = rng.uniform(-1.0, 1.0, size=n) if include_unstructured else np.zeros(n)
    worst = np.empty(n)
    n_unstable = 0
    for i in range(n):
        g = rationalize(perturbed_plant_tf(plant, deltas[i], dus[i]), pade_order)
        ok, poles = is_stable(feedback(g, controller))
        worst[i] = poles.real.max()
        n_unstable += not ok
    return n_unstable, worst


def evaluate_family(samples, controller: RationalTF, grid, search_band=0.15):
    """Per-sample damping, margins and peak noise sensitivity."""
    w = as_grid(grid)
    rows = []
    for s in samples:
        g = s.transfer_function()
        with np.errstate(divide="ignore"):  # a zero controller gives -inf dB
            max_sxn = float(20 * np.log10(noise_sensitivity(g, controller, w).max()))
        open_mag = np.abs(freq_response(g, w))
        closed_mag = process_sensitivity(g, controller, w)
        report = phase_margins(series(g, controller), w)
        rows.append(
            {
                "payload_g": s.payload,
                "gain_reduction_db": gain_reduction_at_mode(
                    open_mag, closed_mag, w, s.modes[0].pole_freq, search_band
                ),
                "min_phase_margin_deg": report.min_margin,
                "max_sxn_db": max_sxn,
                "margins": report,
            }
        )
    return rows
