"""Spin-3/2 ground-state physics and synthetic ODMR sweeps.

The spin Hamiltonian is H = D * Sz^2 + gyromag * B . S with D in MHz,
B in gauss, and gyromag = (g * mu_B / h) = 1.3996245 MHz/G per unit g
(2.80 MHz/G at g = 2.00).  At zero field the four levels form two
Kramers doublets |+-1/2> and |+-3/2> split by 2D, so a single magnetic
resonance appears at 2D.

The sweep simulator follows a gated on/off acquisition: at each
microwave frequency the photon counts are accumulated over many gate
repetitions with the drive alternately on and off, and the contrast is
(sum(off) - sum(on)) / sum(on), positive where the drive dims the
emission.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FitResult, RngSpec
from .numfit import fit_nlls, lorentzian_model

__all__ = [
    "GYROMAG_MHZ_PER_G_UNIT_G",
    "SpinSystem",
    "SweepProtocol",
    "OdmrSweep",
    "spin_matrices",
    "eigenenergies",
    "transition_frequencies",
    "simulate_odmr",
    "odmr_contrast",
    "fit_odmr",
    "write_sweep",
    "read_sweep",
]

# Bohr magneton over Planck constant in MHz per gauss, per unit g-factor.
GYROMAG_MHZ_PER_G_UNIT_G = 1.3996245

# transitions below this frequency (MHz) are unobservable and dropped
_MIN_TRANSITION_MHZ = 1e-6


@dataclass(frozen=True)
class SpinSystem:
    """S = 3/2 system: zero-field splitting D (MHz), g-factor, field B (gauss)."""

    d_mhz: float
    g_factor: float = 2.00
    b_gauss: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def gyromag_mhz_per_g(self) -> float:
        return GYROMAG_MHZ_PER_G_UNIT_G * self.g_factor

    def hamiltonian(self) -> np.ndarray:
        sx, sy, sz = spin_matrices()
        bx, by, bz = self.b_gauss
        ham = self.d_mhz * (sz @ sz) + self.gyromag_mhz_per_g * (bx * sx + by * sy + bz * sz)
        return 0.5 * (ham + ham.conj().T)  # enforce hermiticity exactly


@dataclass(frozen=True)
class SweepProtocol:
    """Gated on/off acquisition parameters."""

    gate_ms: float = 2.8
    repetitions: int = 20000
    scans: int = 6

    def __post_init__(self):
        if self.gate_ms <= 0 or self.repetitions < 1 or self.scans < 1:
            raise ValueError("protocol values must be positive")


@dataclass(frozen=True)
class OdmrSweep:
    """One ODMR sweep: frequency grid, contrast, and accumulated raw counts."""

    freqs_mhz: np.ndarray
    contrast: np.ndarray
    counts_on: np.ndarray
    counts_off: np.ndarray
    protocol: SweepProtocol = field(default_factory=SweepProtocol)

    def __post_init__(self):
        freqs = np.ascontiguousarray(self.freqs_mhz, dtype=float)
        contrast = np.ascontiguousarray(self.contrast, dtype=float)
        on = np.ascontiguousarray(self.counts_on, dtype=np.int64)
        off = np.ascontiguousarray(self.counts_off, dtype=np.int64)
        if not (freqs.shape == contrast.shape == on.shape == off.shape):
            raise ValueError("sweep arrays must have equal length")
        if np.any(on < 0) or np.any(off < 0):
            raise ValueError("counts must be >= 0")
        for arr in (freqs, contrast, on, off):
            arr.setflags(write=False)
        object.__setattr__(self, "freqs_mhz", freqs)
        object.__setattr__(self, "contrast", contrast)
        object.__setattr__(self, "counts_on", on)
        object.__setattr__(self, "counts_off", off)


def spin_matrices() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Sx, Sy, Sz) for S = 3/2 in the m = (3/2, 1/2, -1/2, -3/2) basis."""
    m = np.array([1.5, 0.5, -0.5, -1.5])
    sz = np.diag(m).astype(complex)
    # <m+1|S+|m> = sqrt(S(S+1) - m(m+1)), nonzero on the superdiagonal
    raise_elems = np.sqrt(1.5 * 2.5 - m[1:] * (m[1:] + 1.0))
    s_plus = np.zeros((4, 4), dtype=complex)
    for k in range(3):
        s_plus[k, k + 1] = raise_elems[k]
    s_minus = s_plus.conj().T
    sx = 0.5 * (s_plus + s_minus)
    sy = -0.5j * (s_plus - s_minus)
    return sx, sy, sz


def eigenenergies(sys: SpinSystem) -> np.ndarray:
    """The four level energies in MHz, ascending."""
    return np.linalg.eigvalsh(sys.hamiltonian())


def transition_frequencies(sys: SpinSystem) -> np.ndarray:
    """Magnetic-dipole (delta m = +/-1) transition frequencies, MHz, ascending.

    For B along z the levels stay |m> eigenstates and the closed form is
    {gyromag*Bz, 2D - gyromag*Bz, 2D + gyromag*Bz}; the general case
    diagonalizes H and keeps level pairs with a nonzero transverse
    matrix element.  Zero-frequency lines (degenerate pairs) are
    unobservable and dropped; duplicates are merged.
    """
    ham = sys.hamiltonian()
    energies, states = np.linalg.eigh(ham)
    sx, sy, _ = spin_matrices()
    freqs: list[float] = []
    couplings = np.abs(states.conj().T @ sx @ states) ** 2 + np.abs(
        states.conj().T @ sy @ states
    ) ** 2
    scale = float(np.max(couplings)) or 1.0
    for i in range(4):
        for j in range(i + 1, 4):
            if couplings[i, j] / scale < 1e-9:
                continue
            f = float(energies[j] - energies[i])
            if f > _MIN_TRANSITION_MHZ:
                freqs.append(f)
    freqs.sort()
    merged: list[float] = []
    for f in freqs:
        if merged and abs(f - merged[-1]) < 1e-6:
            continue
        merged.append(f)
    return np.array(merged)


def _resonance_dip(freqs: np.ndarray, centers: np.ndarray, width: float, peak: float) -> np.ndarray:
    """Fractional PL suppression at each sweep frequency."""
    dip = np.zeros_like(freqs)
    half_sq = (width / 2.0) ** 2
    for center in centers:
        dip += peak * half_sq / ((freqs - center) ** 2 + half_sq)
    return np.clip(dip, 0.0, 0.999999)


def simulate_odmr(
    sys: SpinSystem,
    f_lo_mhz: float,
    f_hi_mhz: float,
    n_points: int,
    linewidth_mhz: float,
    peak_contrast: float,
    rate_cps: float,
    protocol: SweepProtocol,
    rng: RngSpec,
) -> OdmrSweep:
    """Simulate a gated continuous-wave ODMR sweep.

    Every resonance of ``sys`` appears as a Lorentzian dip of fractional
    depth ``peak_contrast`` and FWHM ``linewidth_mhz``.  Counts per point
    are Poisson with mean rate*gate accumulated over repetitions and
    scans, drawn separately for the on and off gates.
    """
    if f_lo_mhz >= f_hi_mhz:
        raise ValueError("need f_lo < f_hi")
    if n_points < 2:
        raise ValueError("need at least 2 sweep points")
    if not 0.0 <= peak_contrast < 1.0:
        raise ValueError("peak_contrast must be in [0, 1)")
    if rate_cps <= 0:
        raise ValueError("rate_cps must be > 0")
    freqs = np.linspace(f_lo_mhz, f_hi_mhz, n_points)
    centers = transition_frequencies(sys)
    dip = _resonance_dip(freqs, centers, linewidth_mhz, peak_contrast)
    gate_s = protocol.gate_ms / 1000.0
    mean_off = rate_cps * gate_s * protocol.repetitions
    gen = rng.generator()
    counts_on = np.zeros(n_points, dtype=np.int64)
    counts_off = np.zeros(n_points, dtype=np.int64)
    for _ in range(protocol.scans):
        counts_on += gen.poisson(mean_off * (1.0 - dip))
        counts_off += gen.poisson(mean_off, n_points)
    contrast = odmr_contrast(counts_on, counts_off)
    return OdmrSweep(freqs, contrast, counts_on, counts_off, protocol)


def odmr_contrast(counts_on, counts_off) -> np.ndarray:
    """Per-point contrast (sum_off - sum_on) / sum_on; NaN where on is zero."""
    on = np.asarray(counts_on, dtype=float)
    off = np.asarray(counts_off, dtype=float)
    if on.shape != off.shape:
        raise ValueError("counts_on and counts_off must have equal shape")
    if np.any(on < 0) or np.any(off < 0):
        raise ValueError("counts must be >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        contrast = np.where(on > 0, (off - on) / on, np.nan)
    return contrast


def fit_odmr(sweep: OdmrSweep) -> FitResult:
    """Lorentzian fit of the contrast spectrum.

    Initialization: center at the contrast maximum, width a tenth of the
    sweep span, offset at the median contrast.  Points with undefined
    contrast (zero on-counts) are excluded.
    """
    valid = np.isfinite(sweep.contrast)
    freqs = sweep.freqs_mhz[valid]
    contrast = sweep.contrast[valid]
    if freqs.size < 8:
        raise ValueError("need at least 8 valid sweep points to fit")
    span = float(freqs[-1] - freqs[0])
    offset0 = float(np.median(contrast))
    center0 = float(freqs[int(np.argmax(contrast))])
    amp0 = float(np.max(contrast) - offset0)
    p0 = [max(amp0, 1e-6), center0, span / 10.0, offset0]
    return fit_nlls(lorentzian_model(), p0, freqs, contrast)


def write_sweep(sweep: OdmrSweep, path: str | Path) -> None:
    """Sweep CSV: freq_mhz, contrast, counts_on, counts_off per row."""
    with open(path, "w", newline="") as fh:
        fh.write("freq_mhz,contrast,counts_on,counts_off\n")
        for f, c, on, off in zip(
            sweep.freqs_mhz, sweep.contrast, sweep.counts_on, sweep.counts_off
        ):
            fh.write(f"{float(f)!r},{float(c)!r},{int(on)},{int(off)}\n")


def read_sweep(path: str | Path, protocol: SweepProtocol | None = None) -> OdmrSweep:
    freqs: list[float] = []
    contrast: list[float] = []
    on: list[int] = []
    off: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["freq_mhz", "contrast", "counts_on", "counts_off"]
        if header is None or [h.strip() for h in header] != expected:
            raise ValueError(f"{path}:1: expected header {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                freqs.append(float(row[0]))
                contrast.append(float(row[1]))
                on.append(int(row[2]))
                off.append(int(row[3]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sweep row {row!r}") from exc
    return OdmrSweep(
        np.array(freqs),
        np.array(contrast),
        np.array(on, dtype=np.int64),
        np.array(off, dtype=np.int64),
        protocol or SweepProtocol(),
    )
