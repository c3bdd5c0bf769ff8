"""Command-line front end: family -> uncertainty -> synth -> mu / eval.

Every command reads an optional JSON config (``--config``), applies the
command-line overrides and writes its results under ``--out``.  Outputs
carry the SHA-256 of the effective config: CSV files as a leading
``# config_sha256=...`` comment line, JSON files as a ``config_sha256``
field.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .evaluation import evaluate_family, loop_metrics, stability_sweep
from .lti import RationalTF, freq_response
from .mu import (
    NominalInstabilityError,
    interconnection,
    mu_lower_sampling,
    robust_performance_profile,
    rp_structure,
)
from .plant_family import (
    TWO_PI,
    FamilySpec,
    extract_mode_stats,
    family_from_manifest,
    family_manifest,
    ingest_frf,
    nanopositioner_family,
    synthesize_frf,
)
from .synthesis import (
    BandpassParams,
    ParamBounds,
    SynthesisError,
    analysis_grid,
    bandpass_tf,
    build_sensitivity_weight,
    default_weight_spec,
    synthesize,
)
from .uncertainty import UncertainPlant, assemble_uncertain_plant, envelope

log = logging.getLogger("nanomu")

VARIANT_NAMES = ("m01", "m11", "m31")

DEFAULT_CONFIG = {
    "seed": 0,
    "variant": None,  # None: every variant (eval: m31)
    "threshold": 1.0,
    "family": {
        "spec": FamilySpec().to_dict(),
        "payloads_g": [float(m) for m in range(0, 101, 10)],
        "noise_db": None,
    },
    "grid": {"f_lo_hz": 1.0, "f_hi_hz": 5000.0, "n_log": 600, "n_extra": 40, "band": 0.10},
    "uncertainty": {"order": 6, "margin": 0.05, "envelope_random": 1024},
    "weight": {"low_freq_margin_db": 14.0, "notch_depth_db": 15.0, "notch_width": 0.15},
    "synthesis": {"order": 2, "restarts": 5, "max_evaluations": 200, "bounds": None},
    "mu": {"lower_samples": 20, "lower_peaks": 8},
    "eval": {"search_band": 0.15, "stability_samples": 500},
}


class ConfigError(ValueError):
    pass


def _merge(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "spec":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        cfg = _merge(cfg, user)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["variant"] is not None and str(cfg["variant"]).lower() not in VARIANT_NAMES + ("all",):
        raise ConfigError(f"unknown variant {cfg['variant']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if not float(cfg["threshold"]) > 0:
        raise ConfigError("threshold must be positive")
    FamilySpec.from_dict(cfg["family"]["spec"])
    payloads = np.asarray(cfg["family"]["payloads_g"], dtype=float)
    if payloads.size == 0 or np.any(payloads < 0) or np.any(np.diff(payloads) <= 0):
        raise ConfigError("payloads must be nonnegative and strictly increasing")
    g = cfg["grid"]
    if not 0 < g["f_lo_hz"] < g["f_hi_hz"] or g["n_log"] < 2:
        raise ConfigError("bad grid settings")
    if cfg["uncertainty"]["order"] not in (0, 2, 4, 6):
        raise ConfigError("weight order must be 0, 2, 4 or 6")
    b = cfg["synthesis"]["bounds"]
    if b is not None:
        try:
            ParamBounds.from_dict(b)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synthesis bounds: {exc}") from None


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# output helpers


def _fmt(x):
    return repr(float(x))


def write_csv(path, header, rows, digest):
    buf = io.StringIO()
    buf.write(f"# config_sha256={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def write_json(path, obj, digest):
    obj = dict(obj)
    obj["config_sha256"] = digest
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def _out(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _variants(cfg, default="all"):
    v = str(cfg["variant"] or default).lower()
    return list(VARIANT_NAMES) if v == "all" else [v]


def _grid(cfg, mode_stats):
    g = cfg["grid"]
    return analysis_grid(
        [m.nominal_mode().pole_freq for m in mode_stats],
        g["f_lo_hz"], g["f_hi_hz"], g["n_log"], g["n_extra"], g["band"],
    )


def _family(cfg):
    spec = FamilySpec.from_dict(cfg["family"]["spec"])
    return nanopositioner_family(cfg["family"]["payloads_g"], spec), spec


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} {path} not found; run the preceding command first") from None


def _load_plant(out, variant) -> UncertainPlant:
    d = _load_json(out / f"uncertainty_{variant}.json", "uncertain-plant file")
    return UncertainPlant.from_dict(d["plant"])


def _weight(cfg, plant):
    w = cfg["weight"]
    spec = default_weight_spec(plant, w["low_freq_margin_db"], w["notch_depth_db"], w["notch_width"])
    return spec, build_sensitivity_weight(spec)


def _load_controller(path) -> RationalTF:
    d = _load_json(path, "controller file")
    if "params" in d:
        return bandpass_tf(BandpassParams(**d["params"]))
    return RationalTF.from_dict(d["controller"])


# --------------------------------------------------------------------------
# commands


def cmd_family(cfg, args):
    out = _out(args)
    digest = config_hash(cfg)
    family, spec = _family(cfg)
    stats = extract_mode_stats(family)
    grid = _grid(cfg, stats)
    frf_dir = out / "frf"
    frf_dir.mkdir(exist_ok=True)
    files = []
    for i, sample in enumerate(family):
        frf = synthesize_frf(sample, grid, cfg["family"]["noise_db"], seed=cfg["seed"] + i)
        name = f"payload_{sample.payload:05.1f}g.csv"
        rows = [(f / TWO_PI, h.real, h.imag) for f, h in zip(frf.grid, frf.response)]
        write_csv(frf_dir / name, ["freq_hz", "re", "im"], rows, digest)
        files.append(f"frf/{name}")
    manifest = family_manifest(family, spec, {"frf_files": files, "noise_db": cfg["family"]["noise_db"]})
    write_json(out / "family.json", manifest, digest)
    log.info("wrote %d FRF files to %s", len(files), frf_dir)
    return 0


def cmd_uncertainty(cfg, args):
    out = _out(args)
    digest = config_hash(cfg)
    manifest = _load_json(out / "family.json", "family manifest")
    family, _ = family_from_manifest(manifest)
    frfs = [ingest_frf(out / f) for f in manifest["frf_files"]]
    grid = frfs[0].grid
    stats = extract_mode_stats(family)
    actuator, delay = family[0].actuator, family[0].delay
    u = cfg["uncertainty"]
    for v in _variants(cfg):
        plant = assemble_uncertain_plant(
            stats, actuator, delay, v.upper(), [f.response for f in frfs], grid,
            order=u["order"], margin=u["margin"], seed=cfg["seed"],
        )
        lo, hi = envelope(plant, grid, n_random=u["envelope_random"], seed=cfg["seed"])
        write_csv(out / f"envelope_{v}.csv", ["freq_hz", "min_db", "max_db"],
                  zip(grid / TWO_PI, lo, hi), digest)
        write_json(out / f"uncertainty_{v}.json", {"plant": plant.to_dict(), "synthetic": True}, digest)
        log.info("%s: %d real channels, residual peak %.3f", v, plant.n_real,
                 plant.unstructured.metadata["residual_peak"])
    return 0


def _mu_rows(plant, controller, weight, grid, profile, cfg):
    """Profile rows; the sampled lower bound is evaluated at the largest
    local peaks of the upper bound and left at the trivial 0 elsewhere."""
    n_lower, n_peaks = cfg["mu"]["lower_samples"], cfg["mu"]["lower_peaks"]
    lower = np.zeros(grid.size)
    if n_lower and n_peaks:
        up = profile.upper
        peaks = np.flatnonzero(np.r_[up[0] > up[1], (up[1:-1] >= up[:-2]) & (up[1:-1] >= up[2:]), up[-1] > up[-2]])
        peaks = np.sort(peaks[np.argsort(-up[peaks], kind="stable")][:n_peaks])
        comp = plant.components(grid[peaks])
        m = interconnection(comp, freq_response(controller, grid[peaks]), freq_response(weight, grid[peaks]))
        st = rp_structure(plant)
        lower[peaks] = [mu_lower_sampling(mk, st, n=n_lower, seed=cfg["seed"]) for mk in m]
    return zip(grid / TWO_PI, profile.upper, lower)


def cmd_synth(cfg, args):
    out = _out(args)
    digest = config_hash(cfg)
    threshold = float(cfg["threshold"])
    worst = 0.0
    for v in _variants(cfg):
        plant = _load_plant(out, v)
        grid = _grid(cfg, plant.modes)
        wspec, weight = _weight(cfg, plant)
        s = cfg["synthesis"]
        if s["bounds"] is not None:
            bounds = ParamBounds.from_dict(s["bounds"])
        else:
            w1 = plant.modes[0]
            lo = 1.0 / np.sqrt(w1.d2.mean * (1 + w1.d2.radius))
            hi = 1.0 / np.sqrt(w1.d2.mean * (1 - w1.d2.radius))
            bounds = ParamBounds.around_mode(lo, hi, order=s["order"])
        try:
            res = synthesize(plant, weight, bounds, order=s["order"], seed=cfg["seed"], grid=grid,
                             restarts=s["restarts"], max_fev=s["max_evaluations"])
        except SynthesisError as exc:
            log.error("%s: %s", v, exc)
            return 2
        ctrl = bandpass_tf(res.params)
        write_csv(out / f"mu_{v}.csv", ["freq_hz", "mu_upper", "mu_lower"],
                  _mu_rows(plant, ctrl, weight, grid, res.profile, cfg), digest)
        info = res.to_dict()
        info.update({
            "variant": v,
            "controller": ctrl.to_dict(),
            "weight": weight.to_dict(),
            "weight_spec": wspec.to_dict(),
            "bounds": bounds.to_dict(),
            "threshold": threshold,
            "certified": res.mu_peak <= threshold,
            "history": res.history,
        })
        write_json(out / f"controller_{v}.json", info, digest)
        log.info("%s: peak mu %.4f at %.1f Hz (%d evaluations, %.1f s)", v, res.mu_peak,
                 res.profile.peak_freq / TWO_PI, res.nfev, res.wall_time)
        print(f"{v}: mu_peak={res.mu_peak:.4f} time_s={res.wall_time:.1f}")
        worst = max(worst, res.mu_peak)
    return 0 if worst <= threshold else 1


def cmd_mu(cfg, args):
    out = _out(args)
    digest = config_hash(cfg)
    threshold = float(cfg["threshold"])
    worst = 0.0
    for v in _variants(cfg):
        plant = _load_plant(out, v)
        path = Path(args.controller) if args.controller else out / f"controller_{v}.json"
        ctrl = _load_controller(path)
        grid = _grid(cfg, plant.modes)
        _, weight = _weight(cfg, plant)
        try:
            prof = robust_performance_profile(plant, ctrl, weight, grid)
        except NominalInstabilityError as exc:
            log.error("%s: %s", v, exc)
            return 2
        write_csv(out / f"mu_analysis_{v}.csv", ["freq_hz", "mu_upper", "mu_lower"],
                  _mu_rows(plant, ctrl, weight, grid, prof, cfg), digest)
        print(f"{v}: mu_peak={prof.peak_upper:.4f}")
        worst = max(worst, prof.peak_upper)
    return 0 if worst <= threshold else 1


def cmd_eval(cfg, args):
    out = _out(args)
    digest = config_hash(cfg)
    v = _variants(cfg, default="m31")[0]
    if v == "all":
        raise ConfigError("eval takes a single variant")
    path = Path(args.controller) if args.controller else out / f"controller_{v}.json"
    ctrl = _load_controller(path)
    family, _ = _family(cfg)
    grid = _grid(cfg, extract_mode_stats(family))
    e = cfg["eval"]
    rows = evaluate_family(family, ctrl, grid, e["search_band"])
    mdir = out / f"metrics_{v}"
    mdir.mkdir(exist_ok=True)
    for s in family:
        m = loop_metrics(s.transfer_function(), ctrl, grid)
        write_csv(mdir / f"payload_{s.payload:05.1f}g.csv",
                  ["freq_hz", "ps_db", "sxn_db", "loop_db", "loop_phase_deg"],
                  zip(grid / TWO_PI, m["ps_db"], m["sxn_db"], m["loop_db"], m["loop_phase_deg"]), digest)
    write_csv(out / f"summary_{v}.csv",
              ["payload_g", "gain_reduction_db", "min_phase_margin_deg", "max_sxn_db"],
              [(r["payload_g"], r["gain_reduction_db"], r["min_phase_margin_deg"], r["max_sxn_db"]) for r in rows],
              digest)
    report = {"variant": v, "margins": [dict(payload_g=r["payload_g"], **r["margins"].to_dict()) for r in rows]}
    n = e["stability_samples"]
    if n:
        try:
            plant = _load_plant(out, v)
        except ConfigError:
            plant = None
            log.warning("no uncertain plant for %s; stability sweep skipped", v)
        if plant is not None:
            n_bad, worst = stability_sweep(plant, ctrl, n=n, seed=cfg["seed"])
            report["stability_sweep"] = {"samples": n, "unstable": n_bad, "max_pole_real": float(worst.max())}
    write_json(out / f"margins_{v}.json", report, digest)
    for r in rows:
        print(f"{r['payload_g']:6.1f} g: reduction {r['gain_reduction_db']:.2f} dB, "
              f"min PM {r['min_phase_margin_deg']:.1f} deg, max |S_xn| {r['max_sxn_db']:.2f} dB")
    return 0


COMMANDS = {
    "family": cmd_family,
    "uncertainty": cmd_uncertainty,
    "mu": cmd_mu,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


def build_parser():
    p = argparse.ArgumentParser(prog="nanomu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=VARIANT_NAMES + ("all",), type=str.lower)
        sp.add_argument("--threshold", type=float, help="certification threshold on peak mu")
        if name in ("mu", "eval"):
            sp.add_argument("--controller", help="controller JSON (default: <out>/controller_<variant>.json)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "variant": args.variant, "threshold": args.threshold})
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
