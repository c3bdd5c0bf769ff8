"""Synthetic payload-swept nanopositioner plants and FRF data handling.

The stage is modelled as a chain of unity-DC resonance/anti-resonance pairs
followed by a second-order actuator/amplifier low-pass and a pure delay.
Modal frequencies fall with payload along ``f(m) = f0 / sqrt(1 + m / m_eff)``
with ``m_eff`` solved from the published 0 g / 100 g endpoints.

All damping values, anti-resonance locations, actuator and delay values are
synthetic stand-ins; the real stage data are unpublished.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lti import ModePair, RationalTF, as_grid, freq_response, series_chain, tf_from_mode_pair

TWO_PI = 2.0 * np.pi

# (unloaded Hz, 100 g Hz) per mode
DEFAULT_MODE_ENDPOINTS_HZ = ((179.0, 156.0), (264.0, 256.0), (350.0, 326.0), (905.0, 840.0))
DEFAULT_POLE_DAMPING = (0.02, 0.03, 0.015, 0.015)


class FRFFormatError(ValueError):
    """Malformed FRF file."""


@dataclass(frozen=True)
class FamilySpec:
    """Parameters of the synthetic family (frequencies in Hz, mass in g)."""

    mode_endpoints_hz: tuple = DEFAULT_MODE_ENDPOINTS_HZ
    reference_payload_g: float = 100.0
    pole_damping: tuple = DEFAULT_POLE_DAMPING
    # anti-resonance j sits at ratio * anchor, the anchor being its own pole
    # ("pole") or the geometric mean of the neighbouring poles ("mean");
    # a ratio of None falls back to zero_ratio
    zero_ratios: tuple = (None, 0.94, 0.93, 0.93)
    zero_anchors: tuple = (None, "pole", "mean", "mean")
    zero_ratio: float = 0.93
    actuator_hz: float = 2000.0
    actuator_damping: float = 0.7
    delay_s: float = 90e-6

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("mode_endpoints_hz", "pole_damping", "zero_ratios", "zero_anchors"):
            if key in d:
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
        return cls(**d)


@dataclass(frozen=True)
class FRFData:
    grid: np.ndarray  # rad/s
    response: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = as_grid(self.grid)
        resp = np.asarray(self.response, dtype=complex)
        if resp.shape != grid.shape:
            raise ValueError("grid and response lengths differ")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "response", resp)


@dataclass(frozen=True)
class PlantSample:
    payload: float
    modes: tuple
    actuator: RationalTF
    delay: float
    frf: FRFData | None = None

    def __post_init__(self):
        poles = [m.pole_freq for m in self.modes]
        if np.any(np.diff(poles) <= 0):
            raise ValueError("modal frequencies must increase within a sample")
        for prev, mode in zip(self.modes[:-1], self.modes[1:]):
            if mode.has_zero and not (prev.pole_freq < mode.zero_freq < mode.pole_freq):
                raise ValueError("pole-zero interlacing violated")

    def transfer_function(self) -> RationalTF:
        chain = series_chain([tf_from_mode_pair(m) for m in self.modes] + [self.actuator])
        return RationalTF(chain.num, chain.den, self.delay)

    def response(self, grid) -> np.ndarray:
        return freq_response(self.transfer_function(), grid)


def second_order_lowpass(freq_hz, damping) -> RationalTF:
    w = TWO_PI * freq_hz
    return RationalTF([1.0], [1.0, 2.0 * damping / w, 1.0 / w**2])


def effective_mass(f_unloaded, f_loaded, reference_payload=100.0):
    """Mass making ``f0 / sqrt(1 + m / m_eff)`` hit both endpoints."""
    return reference_payload / ((f_unloaded / f_loaded) ** 2 - 1.0)


def modal_frequency(f_unloaded, m_eff, payload):
    return f_unloaded / np.sqrt(1.0 + payload / m_eff)


def nanopositioner_family(payloads=None, spec: FamilySpec | None = None):
    """Plant samples for each payload (grams, nonnegative, increasing)."""
    spec = spec or FamilySpec()
    if payloads is None:
        payloads = np.arange(0.0, 101.0, 10.0)
    payloads = np.atleast_1d(np.asarray(payloads, dtype=float))
    if np.any(payloads < 0) or np.any(np.diff(payloads) <= 0):
        raise ValueError("payloads must be nonnegative and increasing")
    m_eff = [effective_mass(f0, f1, spec.reference_payload_g) for f0, f1 in spec.mode_endpoints_hz]
    actuator = second_order_lowpass(spec.actuator_hz, spec.actuator_damping)
    samples = []
    for m in payloads:
        pole_hz = [modal_frequency(f0, me, m) for (f0, _), me in zip(spec.mode_endpoints_hz, m_eff)]
        modes = []
        for j, (fp, zp) in enumerate(zip(pole_hz, spec.pole_damping)):
            if j == 0:
                modes.append(ModePair(TWO_PI * fp, zp))
                continue
            ratio = spec.zero_ratios[j] if spec.zero_ratios[j] is not None else spec.zero_ratio
            anchor = spec.zero_anchors[j] or "mean"
            if anchor not in ("pole", "mean"):
                raise ValueError(f"unknown zero anchor {anchor!r}")
            fz = ratio * (fp if anchor == "pole" else np.sqrt(pole_hz[j - 1] * fp))
            modes.append(ModePair(TWO_PI * fp, zp, TWO_PI * fz, zp))
        samples.append(PlantSample(float(m), tuple(modes), actuator, spec.delay_s))
    return samples


def synthesize_frf(sample: PlantSample, grid, noise_db=None, seed=0) -> FRFData:
    """Exact response plus optional complex Gaussian noise at ``noise_db``.

    The noise is relative: each point gets ``H * (1 + sigma * n)`` with
    ``n`` standard complex normal and ``sigma = 10**(noise_db / 20)``.
    """
    grid = as_grid(grid)
    h = sample.response(grid)
    if noise_db is not None:
        if noise_db > 0:
            raise ValueError("noise_db must be <= 0")
        rng = np.random.default_rng(seed)
        sigma = 10.0 ** (noise_db / 20.0)
        n = (rng.standard_normal(h.size) + 1j * rng.standard_normal(h.size)) / np.sqrt(2.0)
        h = h * (1.0 + sigma * n)
    meta = {"payload_g": sample.payload, "source": "synthetic", "noise_db": noise_db, "seed": seed}
    return FRFData(grid, h, meta)


def write_frf(frf: FRFData, path, fmt="re_im"):
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(frf_to_csv(frf, fmt))


def frf_to_csv(frf: FRFData, fmt="re_im") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    f_hz = frf.grid / TWO_PI
    if fmt == "re_im":
        w.writerow(["freq_hz", "re", "im"])
        for f, h in zip(f_hz, frf.response):
            w.writerow([repr(float(f)), repr(float(h.real)), repr(float(h.imag))])
    elif fmt == "db_deg":
        w.writerow(["freq_hz", "mag_db", "phase_deg"])
        for f, h in zip(f_hz, frf.response):
            w.writerow([repr(float(f)), repr(20 * np.log10(abs(h))), repr(float(np.degrees(np.angle(h))))])
    else:
        raise ValueError(f"unknown FRF format {fmt!r}")
    return buf.getvalue()


def ingest_frf(path, fmt="re_im") -> FRFData:
    """Read a ``freq_hz,col2,col3`` CSV as written by :func:`write_frf`.

    Lines starting with ``#`` are comments and are skipped.
    """
    if fmt not in ("re_im", "db_deg"):
        raise ValueError(f"unknown FRF format {fmt!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [
            (i, row)
            for i, row in enumerate(csv.reader(fh), start=1)
            if not (row and row[0].lstrip().startswith("#"))
        ]
    if not rows:
        raise FRFFormatError(f"{path}: empty file")
    head_line, header = rows[0]
    header = [c.strip() for c in header]
    if len(header) != 3 or header[0] != "freq_hz":
        raise FRFFormatError(f"{path}:{head_line}: expected header 'freq_hz,<col2>,<col3>'")
    freqs, values, lines = [], [], []
    for lineno, row in rows[1:]:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise FRFFormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            f, a, b = (float(c) for c in row)
        except ValueError as exc:
            raise FRFFormatError(f"{path}:{lineno}: {exc}") from None
        freqs.append(f)
        lines.append(lineno)
        if fmt == "re_im":
            values.append(complex(a, b))
        else:
            values.append(10.0 ** (a / 20.0) * np.exp(1j * np.radians(b)))
    if not freqs:
        raise FRFFormatError(f"{path}: no data rows")
    freqs = np.asarray(freqs)
    if np.any(np.diff(freqs) <= 0):
        bad = lines[int(np.flatnonzero(np.diff(freqs) <= 0)[0]) + 1]
        raise FRFFormatError(f"{path}:{bad}: frequencies must be strictly increasing")
    return FRFData(TWO_PI * freqs, np.asarray(values), {"source": str(path), "format": fmt})


def extract_mode_stats(family):
    """Mean coefficients and relative radii of every mode across the family."""
    from .uncertainty import ModePairStats, relative_radii

    counts = {len(s.modes) for s in family}
    if len(counts) != 1:
        raise ValueError(f"inconsistent mode counts across the family: {sorted(counts)}")
    stats = []
    for j in range(counts.pop()):
        modes = [s.modes[j] for s in family]
        has_zero = {m.has_zero for m in modes}
        if len(has_zero) != 1:
            raise ValueError(f"mode {j} has an anti-resonance in some samples only")
        zero = has_zero.pop()
        stats.append(
            ModePairStats(
                d2=relative_radii([m.d2 for m in modes]),
                d1=relative_radii([m.d1 for m in modes]),
                n2=relative_radii([m.n2 for m in modes]) if zero else None,
                n1=relative_radii([m.n1 for m in modes]) if zero else None,
            )
        )
    return stats


def family_manifest(family, spec: FamilySpec, extra=None) -> dict:
    out = {
        "synthetic": True,
        "spec": spec.to_dict(),
        "payloads_g": [s.payload for s in family],
        "samples": [
            {
                "payload_g": s.payload,
                "modes": [
                    {
                        "pole_hz": m.pole_freq / TWO_PI,
                        "pole_damping": m.pole_damping,
                        "zero_hz": None if m.zero_freq is None else m.zero_freq / TWO_PI,
                        "zero_damping": m.zero_damping,
                    }
                    for m in s.modes
                ],
            }
            for s in family
        ],
    }
    if extra:
        out.update(extra)
    return out


def family_from_manifest(manifest: dict):
    spec = FamilySpec.from_dict(manifest["spec"])
    return nanopositioner_family(manifest["payloads_g"], spec), spec


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
