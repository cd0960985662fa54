"""Command-line pipelines: simulate, correlate, fit, and report.

Every command takes an optional JSON config (strict: unknown keys are
rejected), with command-line flags overriding config keys.  Outputs are
deterministic for a fixed config and seed; numeric report values are
serialized with 9 significant digits so golden-file comparisons are
meaningful.  Exit codes: 0 success, 1 input error, 2 analysis failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, core, emitter_sim, hbt, odmr, presets, scanstats

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ANALYSIS = 2

_REQUIRED = object()


class InputError(Exception):
    """Bad config, unreadable file, malformed data: exit code 1."""


class AnalysisError(Exception):
    """A well-formed analysis that failed (e.g. no convergence): exit code 2."""


# ---------------------------------------------------------------------------
# config and output plumbing
# ---------------------------------------------------------------------------


def _coerce(key: str, value, typ):
    try:
        if typ is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
                raise TypeError
            return int(value)
        if typ is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if typ == "vec3":
            vec = [float(v) for v in value]
            if len(vec) != 3:
                raise TypeError
            return tuple(vec)
        if typ == "floats":
            return [float(v) for v in value]
    except (TypeError, ValueError):
        raise InputError(f"config key {key!r}: expected {typ}, got {value!r}") from None
    raise InputError(f"unhandled config type for {key!r}")  # pragma: no cover


def load_config(path: str | None, schema: dict, overrides: dict | None = None) -> dict:
    """Merge config file, schema defaults, and flag overrides; reject unknowns."""
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise InputError(f"config {path} must be a JSON object")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    merged = {}
    overrides = overrides or {}
    for key, (typ, default) in schema.items():
        if overrides.get(key) is not None:
            value = overrides[key]
        elif key in raw and raw[key] is not None:
            value = raw[key]
        else:
            value = default
        if value is _REQUIRED:
            raise InputError(f"missing required config key {key!r}")
        merged[key] = None if value is None else _coerce(key, value, typ)
    return merged


def _json_safe(obj):
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        if math.isnan(val):
            return None
        if math.isinf(val):
            return "inf" if val > 0 else "-inf"
        # 9 significant digits for stable golden files
        return float(f"{val:.9g}")
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_json_safe(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_report(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_hash(config: dict) -> str:
    canonical = json.dumps(_json_safe(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, outputs: list[str]) -> None:
    write_report(
        out / "manifest.json",
        {
            "command": command,
            "config": config,
            "config_sha256": _config_hash(config),
            "outputs": sorted(outputs),
            "version": __version__,
        },
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _fit_payload(result: core.FitResult) -> dict:
    return {
        "params": result.params,
        "stderr": result.stderr,
        "residual_norm": result.residual_norm,
        "converged": result.converged,
        "iterations": result.iterations,
        "message": result.message,
    }


def _write_table(out: Path, stem: str, columns: dict, fmt: str) -> str:
    """Write a data table as CSV (full-precision floats) or JSON arrays."""
    if fmt == "json":
        name = f"{stem}.json"
        payload = {
            key: [
                int(v) if isinstance(v, (int, np.integer)) else float(v)
                for v in values
            ]
            for key, values in columns.items()
        }
        with open(out / name, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return name
    name = f"{stem}.csv"
    keys = list(columns)
    rows = zip(*columns.values())
    with open(out / name, "w", newline="") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))
                    for v in row
                )
                + "\n"
            )
    return name


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

SIMULATE_SCHEMA = {
    "preset": (str, None),
    "k_exc_per_ns": (float, None),
    "k_em_per_ns": (float, None),
    "k_isc_per_ns": (float, 0.0),
    "k_des_per_ns": (float, 0.0),
    "efficiency": (float, None),
    "background_cps": (float, 0.0),
    "split": (float, 0.5),
    "duration_s": (float, None),
    "power_mw": (float, None),
    "n_emitters": (int, 1),
    "seed": (int, 0),
    "stream_id": (int, 0),
}


def cmd_simulate(args) -> int:
    config = load_config(
        args.config,
        SIMULATE_SCHEMA,
        {"seed": args.seed, "duration_s": args.duration_s, "preset": args.preset},
    )
    if config["preset"] is not None:
        try:
            preset = presets.sim_preset(config["preset"])
        except KeyError as exc:
            raise InputError(str(exc)) from exc
        rates = preset.rates
        det = preset.detection
        duration = config["duration_s"] or preset.duration_s
        power = preset.power_mw
    else:
        for key in ("k_exc_per_ns", "k_em_per_ns", "efficiency", "duration_s"):
            if config[key] is None:
                raise InputError(f"config key {key!r} is required without a preset")
        try:
            rates = emitter_sim.EmitterRates(
                config["k_exc_per_ns"],
                config["k_em_per_ns"],
                config["k_isc_per_ns"],
                config["k_des_per_ns"],
            )
            det = emitter_sim.DetectionModel(
                config["efficiency"], config["background_cps"], config["split"]
            )
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        duration = config["duration_s"]
        power = config["power_mw"]
    if config["n_emitters"] < 1:
        raise InputError("n_emitters must be >= 1")

    out = _out_dir(args)
    rng = core.RngSpec(config["seed"], config["stream_id"])
    meta = {"power_mw": power, "label": config["preset"] or "custom"}

    def run_one(k: int):
        return emitter_sim.simulate_stream(rates, det, duration, rng.substream(k), meta)

    n_emitters = config["n_emitters"]
    try:
        workers = min(core.max_threads(), n_emitters)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if n_emitters == 1:
        pairs = [run_one(0)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(run_one, range(n_emitters)))
    ch0, ch1 = pairs[0]
    for extra0, extra1 in pairs[1:]:
        ch0 = core.merge_streams(ch0, extra0)
        ch1 = core.merge_streams(ch1, extra1)
    sidecar_meta = dict(meta)
    sidecar_meta.update({"seed": config["seed"], "stream_id": config["stream_id"]})
    ch0 = replace(ch0, meta={**sidecar_meta, "label": f"{meta['label']}/ch0"})
    ch1 = replace(ch1, meta={**sidecar_meta, "label": f"{meta['label']}/ch1"})

    core.write_stream(ch0, out / "ch0.csv")
    core.write_stream(ch1, out / "ch1.csv")
    _write_manifest(
        out, "simulate", config, ["ch0.csv", "ch0.json", "ch1.csv", "ch1.json"]
    )
    print(f"wrote {len(ch0)} + {len(ch1)} tags over {duration} s to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# g2
# ---------------------------------------------------------------------------


def _classify_zero(measured_zero: float) -> str:
    if measured_zero < 0.5:
        return "single"
    if measured_zero < 0.9:
        return "few"
    return "no antibunching"


def cmd_g2(args) -> int:
    try:
        ch0 = core.read_stream(args.stream0)
        ch1 = core.read_stream(args.stream1)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args)
    try:
        hist = hbt.correlate(ch0, ch1, args.bin_ps, args.window_ps)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    corrected = hbt.background_correct(hist, args.rho)
    if args.format == "json":
        _write_table(
            out,
            "g2_histogram",
            {
                "tau_ps": corrected.taus_ps,
                "N_norm": corrected.values,
                "raw_pairs": corrected.raw_pairs,
            },
            "json",
        )
    elif args.format == "csv":
        core.write_histogram(corrected, out / "g2_histogram.csv")
    else:
        raise InputError("g2 emits csv or json, not pgm")
    fit = hbt.fit_g2(hist, args.rho)
    payload = {
        "a": fit.a,
        "tau1_ns": fit.tau1_ns,
        "tau2_ns": fit.tau2_ns,
        "g2_zero_model": fit.g2_zero,
        "g2_zero_measured": fit.measured_zero,
        "rho": fit.rho,
        "tau2_identifiable": fit.tau2_identifiable,
        "classification": _classify_zero(fit.measured_zero),
        "bin_ps": hist.bin_width_ps,
        "window_ps": hist.window_ps,
        "fit": _fit_payload(fit.fit),
    }
    write_report(out / "g2_fit.json", payload)
    print(
        f"g2 fit: tau1={fit.tau1_ns:.3g} ns tau2={fit.tau2_ns:.3g} ns a={fit.a:.3g} "
        f"zero_bin={fit.measured_zero:.3g} -> {payload['classification']}"
    )
    if not fit.fit.converged:
        raise AnalysisError(f"g2 fit did not converge: {fit.fit.message}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# saturation
# ---------------------------------------------------------------------------

SATURATION_SCHEMA = {
    "powers_mw": ("floats", None),
    "dwell_s": (float, 1.0),
    "seed": (int, 0),
}


def cmd_saturation(args) -> int:
    out = _out_dir(args)
    config = load_config(args.config, SATURATION_SCHEMA, {"seed": args.seed})
    if args.points:
        try:
            pts = np.loadtxt(args.points, delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read saturation points {args.points}: {exc}") from exc
    else:
        if not config["powers_mw"]:
            raise InputError("provide a points CSV or config powers_mw for synthesis")
        model, efficiency = presets.saturation_power_model()
        gen = core.RngSpec(config["seed"], 0).generator()
        rows = []
        for power in config["powers_mw"]:
            rate = emitter_sim.detected_signal_rate(
                model.rates_at(power), emitter_sim.DetectionModel(efficiency)
            )
            counts = gen.poisson(rate * config["dwell_s"])
            rows.append((power, counts / config["dwell_s"]))
        pts = np.array(rows)
        fmt = "json" if args.format == "json" else "csv"
        _write_table(
            out, "saturation_points", {"power_mw": pts[:, 0], "rate_cps": pts[:, 1]}, fmt
        )
    try:
        fit = scanstats.fit_saturation(pts)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    except RuntimeError as exc:
        raise AnalysisError(str(exc)) from exc
    payload = {
        "I_s_cps": fit.i_s,
        "P0_mw": fit.p0,
        "half_saturation_rate_cps": fit.rate_at(fit.p0),
        "fit": _fit_payload(fit.fit),
    }
    write_report(out / "saturation_fit.json", payload)
    print(f"saturation fit: I_s={fit.i_s:.6g} cps, P0={fit.p0:.6g} mW")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------


def cmd_stability(args) -> int:
    try:
        stream = core.read_stream(args.stream)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args)
    bin_ps = int(args.bin_ms * 1e9)
    if bin_ps <= 0:
        raise InputError("bin_ms must be > 0")
    n_bins = stream.duration_ps // bin_ps
    if n_bins < 100:
        raise InputError(f"trace too short: {n_bins} bins of {args.bin_ms} ms (need >= 100)")
    edges = np.arange(0, (n_bins + 1) * bin_ps, bin_ps)
    counts, _ = np.histogram(stream.times_ps, bins=edges)
    report = scanstats.photostability(counts, args.bin_ms)
    write_report(out / "stability.json", report)
    print(
        f"stability: mean {report['mean_rate']:.6g} cps, fano {report['fano']:.4g}, "
        f"blinking={report['blinking_flag']}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------

SCAN_SCHEMA = {
    "extent_um": (float, 16.0),
    "pixel_um": (float, 0.125),
    "spacing_um": (float, 2.0),
    "psf_sigma_um": (float, 0.2),
    "site_rate": (float, None),
    "background": (float, 50.0),
    "rotation_deg": (float, 0.0),
    "min_sep_px": (int, 5),
    "snr_threshold": (float, 5.0),
    "seed": (int, 0),
}


def cmd_scan(args) -> int:
    config = load_config(args.config, SCAN_SCHEMA, {"seed": args.seed})
    out = _out_dir(args)
    if config["site_rate"] is None:
        spec = presets.scan_preset()
        if config["rotation_deg"]:
            spec = replace(spec, rotation_deg=config["rotation_deg"])
    else:
        try:
            spec = emitter_sim.ScanSpec(
                extent_um=config["extent_um"],
                pixel_um=config["pixel_um"],
                spacing_um=config["spacing_um"],
                psf_sigma_um=config["psf_sigma_um"],
                site_rates=config["site_rate"],
                background=config["background"],
                rotation_deg=config["rotation_deg"],
            )
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    image = emitter_sim.synth_scan(spec, core.RngSpec(config["seed"], 0))
    if args.format == "pgm":
        scanstats.write_pgm16(image, out / "scan_image.pgm")
        image_name = "scan_image.pgm"
    elif args.format == "json":
        write_report(out / "scan_image.json", {"image": image.tolist()})
        image_name = "scan_image.json"
    else:
        scanstats.write_image_csv(image, out / "scan_image.csv")
        image_name = "scan_image.csv"
    spots = scanstats.detect_spots(image, config["min_sep_px"], config["snr_threshold"])
    if len(spots) < 3:
        raise AnalysisError(f"only {len(spots)} spots detected; cannot register a grid")
    spots_um = [((x * spec.pixel_um, y * spec.pixel_um), v) for (x, y), v in spots]
    transform, records = scanstats.register_grid(spots_um, spec.spacing_um)
    scanstats.write_site_table(records, out / "sites.json")
    write_report(
        out / "scan_report.json",
        {
            "n_spots": len(spots),
            "n_sites": len(records),
            "grid_origin_um": list(transform.origin_um),
            "grid_rotation_deg": transform.rotation_deg,
            "grid_pitch_um": transform.pitch_um,
            "grid_residual_um": transform.residual_um,
            "degenerate": transform.degenerate,
            "image": image_name,
        },
    )
    print(
        f"scan: {len(spots)} spots, grid rotation {transform.rotation_deg:.3g} deg, "
        f"residual {transform.residual_um:.3g} um"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# yield
# ---------------------------------------------------------------------------


def cmd_yield(args) -> int:
    out = _out_dir(args)
    path = Path(args.input)
    if not path.exists():
        raise InputError(f"input {path} does not exist")
    try:
        if path.suffix == ".json":
            sites = scanstats.read_site_table(path)
        else:
            if args.single_ref is None:
                raise InputError("--single-ref is required when counting from an image")
            image = (
                scanstats.read_pgm16(path)
                if path.suffix == ".pgm"
                else scanstats.read_image_csv(path)
            )
            spots = scanstats.detect_spots(image)
            if len(spots) < 3:
                raise AnalysisError("too few spots detected to register the site grid")
            spots_um = [((x * args.pixel_um, y * args.pixel_um), v) for (x, y), v in spots]
            _, records = scanstats.register_grid(spots_um, args.pitch_um)
            sites = [
                scanstats.SiteRecord(
                    r.lattice_index,
                    r.position_um,
                    r.intensity,
                    None,
                    hbt.estimate_emitter_count(None, r.intensity, args.single_ref),
                )
                for r in records
            ]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not sites:
        raise AnalysisError("empty site table")
    ions_lo, ions_mid, ions_hi = scanstats.ions_per_aperture_interval(
        args.fluence, args.aperture_nm, args.aperture_tol_nm
    )
    try:
        report = scanstats.yield_report(sites, ions_mid)
    except ValueError as exc:
        raise AnalysisError(str(exc)) from exc
    payload = {
        "lambda_hat": report.lambda_hat,
        "lambda_stderr": report.lambda_stderr,
        "single_fraction": report.single_fraction,
        "ions_per_aperture": report.ions_per_aperture,
        "ions_per_aperture_interval": [ions_lo, ions_mid, ions_hi],
        "conversion_yield": report.conversion_yield,
        "conversion_yield_interval": [
            report.lambda_hat / ions_hi,
            report.lambda_hat / ions_mid,
            report.lambda_hat / ions_lo,
        ],
        "n_sites": report.n_sites,
        "ztp_lambda_hat": report.ztp_lambda_hat,
        "single_fraction_nonzero": report.single_fraction_nonzero,
    }
    write_report(out / "yield_report.json", payload)
    print(
        f"yield: lambda={report.lambda_hat:.4g}, single fraction {report.single_fraction:.3g}, "
        f"conversion {report.conversion_yield:.4g}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------


def cmd_depth(args) -> int:
    out = _out_dir(args)
    try:
        profile = scanstats.read_depth_profile(args.profile)
        stats = scanstats.depth_stats(profile)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    payload = {
        "mean_depth_nm": stats.mean_depth_nm,
        "straggle_nm": stats.straggle_nm,
        "n_rows": int(stats.profile.shape[0]),
    }
    if args.aperture_nm:
        payload["lateral_uncertainty_nm"] = scanstats.lateral_uncertainty(
            args.aperture_nm, args.lateral_straggle_nm
        )
    write_report(out / "depth_stats.json", payload)
    print(f"depth: mean {stats.mean_depth_nm:.4g} nm, straggle {stats.straggle_nm:.4g} nm")
    return EXIT_OK


# ---------------------------------------------------------------------------
# odmr
# ---------------------------------------------------------------------------

ODMR_SCHEMA = {
    "d_mhz": (float, None),
    "g_factor": (float, 2.00),
    "b_gauss": ("vec3", (0.0, 0.0, 0.0)),
    "f_lo_mhz": (float, 40.0),
    "f_hi_mhz": (float, 100.0),
    "n_points": (int, 61),
    "linewidth_mhz": (float, 8.0),
    "peak_contrast": (float, 0.01),
    "rate_cps": (float, 100000.0),
    "gate_ms": (float, 2.8),
    "repetitions": (int, 20000),
    "scans": (int, 6),
    "seed": (int, 0),
}


def _write_odmr_fit(sweep: odmr.OdmrSweep, out: Path) -> core.FitResult:
    try:
        fit = odmr.fit_odmr(sweep)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    centers = [fit.params["f0"]]
    payload = {
        "center_mhz": fit.params["f0"],
        "width_mhz": fit.params["w"],
        "amplitude": fit.params["A"],
        "offset": fit.params["c"],
        "centers_mhz": centers,
        "fit": _fit_payload(fit),
    }
    write_report(out / "odmr_fit.json", payload)
    print(
        f"odmr fit: center {fit.params['f0']:.6g} MHz, width {fit.params['w']:.4g} MHz, "
        f"amplitude {fit.params['A']:.3g}"
    )
    if not fit.converged:
        raise AnalysisError(f"odmr fit did not converge: {fit.message}")
    return fit


def cmd_odmr(args) -> int:
    default = presets.odmr_preset()
    schema = dict(ODMR_SCHEMA)
    schema["d_mhz"] = (float, default.system.d_mhz)
    config = load_config(args.config, schema, {"seed": args.seed})
    out = _out_dir(args)
    system = odmr.SpinSystem(config["d_mhz"], config["g_factor"], config["b_gauss"])
    try:
        protocol = odmr.SweepProtocol(config["gate_ms"], config["repetitions"], config["scans"])
        sweep = odmr.simulate_odmr(
            system,
            config["f_lo_mhz"],
            config["f_hi_mhz"],
            config["n_points"],
            config["linewidth_mhz"],
            config["peak_contrast"],
            config["rate_cps"],
            protocol,
            core.RngSpec(config["seed"], 0),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.format == "json":
        sweep_name = _write_table(
            out,
            "odmr_sweep",
            {
                "freq_mhz": sweep.freqs_mhz,
                "contrast": sweep.contrast,
                "counts_on": sweep.counts_on,
                "counts_off": sweep.counts_off,
            },
            "json",
        )
    elif args.format == "csv":
        odmr.write_sweep(sweep, out / "odmr_sweep.csv")
        sweep_name = "odmr_sweep.csv"
    else:
        raise InputError("odmr emits csv or json, not pgm")
    # fit what was written, so re-fitting the emitted file reproduces
    # this report byte for byte
    sweep_back = _read_sweep_any(out / sweep_name, protocol)
    _write_odmr_fit(sweep_back, out)
    _write_manifest(out, "odmr", config, [sweep_name, "odmr_fit.json"])
    return EXIT_OK


def _read_sweep_any(path: Path, protocol=None) -> odmr.OdmrSweep:
    if Path(path).suffix == ".json":
        with open(path) as fh:
            payload = json.load(fh)
        try:
            return odmr.OdmrSweep(
                np.array(payload["freq_mhz"], dtype=float),
                np.array(payload["contrast"], dtype=float),
                np.array(payload["counts_on"], dtype=np.int64),
                np.array(payload["counts_off"], dtype=np.int64),
                protocol or odmr.SweepProtocol(),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: malformed JSON sweep: {exc}") from exc
    return odmr.read_sweep(path, protocol)


def cmd_odmr_fit(args) -> int:
    out = _out_dir(args)
    try:
        sweep = _read_sweep_any(args.sweep)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    _write_odmr_fit(sweep, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defect-foundry",
        description="Simulate and analyze single color-center characterization data.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument(
            "--format",
            choices=("csv", "json", "pgm"),
            default="csv",
            help="data table format (pgm: 16-bit image, scan only)",
        )

    p = sub.add_parser("simulate", help="generate a two-channel time-tag stream")
    common(p)
    p.add_argument("--preset", help=f"named preset: {', '.join(presets.PRESET_NAMES)}")
    p.add_argument("--duration-s", type=float, dest="duration_s")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("g2", help="correlate two streams, correct, and fit g2")
    common(p)
    p.add_argument("stream0", help="channel-0 time-tag CSV")
    p.add_argument("stream1", help="channel-1 time-tag CSV")
    p.add_argument("--bin-ps", type=int, default=hbt.DEFAULT_BIN_PS, dest="bin_ps")
    p.add_argument("--window-ps", type=int, default=hbt.DEFAULT_WINDOW_PS, dest="window_ps")
    p.add_argument("--rho", type=float, default=1.0, help="signal fraction s/(s+b)")
    p.set_defaults(func=cmd_g2)

    p = sub.add_parser("saturation", help="fit (or synthesize and fit) a saturation curve")
    common(p)
    p.add_argument("--points", help="CSV of power_mw,rate_cps")
    p.set_defaults(func=cmd_saturation)

    p = sub.add_parser("stability", help="photostability report for a time-tag stream")
    common(p)
    p.add_argument("stream", help="time-tag CSV")
    p.add_argument("--bin-ms", type=float, default=100.0, dest="bin_ms")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("scan", help="synthesize a confocal map and register the site grid")
    common(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("yield", help="defect yield statistics from a site table or image")
    common(p)
    p.add_argument("input", help="site table JSON or scan image (CSV/PGM)")
    p.add_argument("--fluence", type=float, default=presets.FLUENCE_PER_CM2)
    p.add_argument("--aperture-nm", type=float, default=presets.APERTURE_DIAMETER_NM)
    p.add_argument("--aperture-tol-nm", type=float, default=presets.APERTURE_TOL_NM)
    p.add_argument("--single-ref", type=float, help="single-emitter reference intensity")
    p.add_argument("--pixel-um", type=float, default=0.125)
    p.add_argument("--pitch-um", type=float, default=2.0)
    p.set_defaults(func=cmd_yield)

    p = sub.add_parser("depth", help="depth statistics from a depth_nm,weight profile CSV")
    common(p)
    p.add_argument("profile", help="two-column CSV depth_nm,weight")
    p.add_argument("--aperture-nm", type=float, dest="aperture_nm")
    p.add_argument(
        "--lateral-straggle-nm", type=float, default=0.0, dest="lateral_straggle_nm"
    )
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("odmr", help="simulate a gated ODMR sweep and fit the resonance")
    common(p)
    p.set_defaults(func=cmd_odmr)

    p = sub.add_parser("odmr-fit", help="re-fit a previously written sweep CSV")
    common(p)
    p.add_argument("sweep", help="sweep CSV from the odmr command")
    p.set_defaults(func=cmd_odmr_fit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AnalysisError as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
