"""Named presets encoding the reference characterization values.

These tie the simulator to the reference single-defect measurements:
g2 lifetimes at two excitation powers, the saturation curve, the
implantation yield constants, and the zero-field spin resonance.  The
g2 presets boost the collection efficiency well above the physical
value so a 60 s synthetic acquisition carries enough coincidences for a
stable fit; the ``paper-saturation`` preset keeps the physical
brightness (7.4 kcps at saturation) instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .emitter_sim import (
    DetectionModel,
    EmitterRates,
    PowerModel,
    ScanSpec,
    detected_signal_rate,
    rates_for_g2,
)
from .odmr import SpinSystem, SweepProtocol

__all__ = [
    "SimPreset",
    "OdmrPreset",
    "PRESET_NAMES",
    "sim_preset",
    "odmr_preset",
    "saturation_power_model",
    "scan_preset",
    "SATURATION_RATE_CPS",
    "SATURATION_POWER_MW",
    "SIGNAL_FRACTION",
    "FLUENCE_PER_CM2",
    "APERTURE_DIAMETER_NM",
    "APERTURE_TOL_NM",
    "MEAN_DEFECTS_PER_SITE",
    "ZERO_FIELD_SPLITTING_MHZ",
    "FITTED_RESONANCE_MHZ",
]

# saturation curve of the reference single defect
SATURATION_RATE_CPS = 7400.0
SATURATION_POWER_MW = 0.43
# measured signal fraction s/(s+b) of the reference defect
SIGNAL_FRACTION = 0.8

# implantation yield survey constants
FLUENCE_PER_CM2 = 2.6e11
APERTURE_DIAMETER_NM = 65.0
APERTURE_TOL_NM = 10.0
MEAN_DEFECTS_PER_SITE = 1.61

# spin constants: nominal zero-field splitting and the fitted resonance
ZERO_FIELD_SPLITTING_MHZ = 35.0
FITTED_RESONANCE_MHZ = 68.4

# g2 fit targets per excitation power: (tau1_ns, tau2_ns, shoulder)
_G2_TARGETS = {
    "paper-0.5mW": (0.5, 5.2, 89.1, 0.35),
    "paper-2mW": (2.0, 5.3, 36.2, 1.0),
}

# detected signal rate used by the g2 presets (not the physical 7.4 kcps;
# chosen so a 60 s run resolves the shoulder)
_G2_SIGNAL_CPS = 250_000.0

PRESET_NAMES = ("paper-0.5mW", "paper-2mW", "paper-saturation")


@dataclass(frozen=True)
class SimPreset:
    """A ready-to-run stream simulation configuration."""

    name: str
    power_mw: float
    rates: EmitterRates
    detection: DetectionModel
    duration_s: float
    tau1_ns: float | None = None
    tau2_ns: float | None = None
    shoulder: float | None = None
    rho: float | None = None


@dataclass(frozen=True)
class OdmrPreset:
    """Sweep configuration for the gated zero-field resonance measurement."""

    system: SpinSystem
    f_lo_mhz: float
    f_hi_mhz: float
    n_points: int
    linewidth_mhz: float
    peak_contrast: float
    rate_cps: float
    protocol: SweepProtocol


def _g2_preset(name: str) -> SimPreset:
    power, tau1, tau2, shoulder = _G2_TARGETS[name]
    rates = rates_for_g2(tau1, tau2, shoulder, power / SATURATION_POWER_MW)
    probe = DetectionModel(efficiency=1.0)
    emission_cps = detected_signal_rate(rates, probe)
    efficiency = _G2_SIGNAL_CPS / emission_cps
    background = _G2_SIGNAL_CPS * (1.0 - SIGNAL_FRACTION) / SIGNAL_FRACTION
    det = DetectionModel(efficiency=efficiency, background_rate=background)
    return SimPreset(
        name=name,
        power_mw=power,
        rates=rates,
        detection=det,
        duration_s=60.0,
        tau1_ns=tau1,
        tau2_ns=tau2,
        shoulder=shoulder,
        rho=SIGNAL_FRACTION,
    )


def saturation_power_model() -> tuple[PowerModel, float]:
    """(PowerModel, physical efficiency) hitting I_s = 7.4 kcps, P0 = 0.43 mW.

    The transition rates come from the 0.5 mW g2 solution; the pump
    coefficient follows from k_exc = pump * P at that power, and the
    collection efficiency is set so the detected saturated rate equals
    the reference 7.4 kcps.
    """
    base = _g2_preset("paper-0.5mW")
    rates = base.rates
    model = PowerModel(
        pump_per_mw=rates.k_exc / base.power_mw,
        k_em=rates.k_em,
        k_isc=rates.k_isc,
        k_des=rates.k_des,
    )
    saturated_emission = rates.k_em * rates.k_des / (rates.k_des + rates.k_isc) * 1e9
    efficiency = SATURATION_RATE_CPS / saturated_emission
    return model, efficiency


def sim_preset(name: str) -> SimPreset:
    """Look up a stream-simulation preset by name."""
    if name in _G2_TARGETS:
        return _g2_preset(name)
    if name == "paper-saturation":
        model, efficiency = saturation_power_model()
        power = 100.0 * SATURATION_POWER_MW  # deep saturation
        rates = model.rates_at(power)
        det = DetectionModel(efficiency=efficiency, background_rate=0.0)
        return SimPreset(
            name=name,
            power_mw=power,
            rates=rates,
            detection=det,
            duration_s=20.0,
            rho=1.0,
        )
    raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")


def odmr_preset() -> OdmrPreset:
    """Zero-field sweep reproducing the fitted 68.4 MHz resonance."""
    return OdmrPreset(
        system=SpinSystem(d_mhz=FITTED_RESONANCE_MHZ / 2.0),
        f_lo_mhz=40.0,
        f_hi_mhz=100.0,
        n_points=61,
        linewidth_mhz=8.0,
        peak_contrast=0.01,
        rate_cps=100_000.0,
        protocol=SweepProtocol(gate_ms=2.8, repetitions=20000, scans=6),
    )


def scan_preset() -> ScanSpec:
    """8x8 site array at 2 um pitch in a 16 um field, peak SNR about 4:1."""
    background = 50.0
    psf_sigma = 0.2
    pixel = 0.125
    # peak pixel = rate * pixel^2 / (2 pi sigma^2) = 4 * background
    rate = 4.0 * background * 2.0 * math.pi * psf_sigma**2 / pixel**2
    return ScanSpec(
        extent_um=16.0,
        pixel_um=pixel,
        spacing_um=2.0,
        psf_sigma_um=psf_sigma,
        site_rates=rate,
        background=background,
    )
