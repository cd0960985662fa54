"""Kinetic Monte Carlo photon streams from a three-level emitter.

The emitter is a ground state g, a radiating excited state e, and a
metastable shelving state s, with four transition rates (all in 1/ns):

    g --k_exc--> e        optical pumping, proportional to power
    e --k_em --> g        radiative decay (emits a photon)
    e --k_isc--> s        intersystem crossing into the shelf
    s --k_des--> g        shelf relaxation

Detection is an independent Bernoulli thinning of the emitted photons
(probability ``efficiency``), a 50/50-style splitter routes each
detected photon to one of two channels, and uncorrelated Poisson
background is superimposed per channel.

This module also carries the deterministic rate-equation oracle for
g2(tau) and a synthetic confocal scan generator, so every stochastic
output here can be checked against an independent calculation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PS_PER_SECOND, RngSpec, TimeTagStream, sorted_stream

__all__ = [
    "EmitterRates",
    "DetectionModel",
    "ScanSpec",
    "Occupations",
    "CycleSample",
    "PowerModel",
    "steady_state",
    "g2_oracle",
    "g2_parameters",
    "rates_for_g2",
    "simulate_stream",
    "poisson_stream",
    "sample_cycles",
    "detected_signal_rate",
    "signal_fraction",
    "synth_scan",
]


@dataclass(frozen=True)
class EmitterRates:
    """Transition rates of the three-level chain, in 1/ns."""

    k_exc: float
    k_em: float
    k_isc: float = 0.0
    k_des: float = 0.0

    def __post_init__(self):
        for name in ("k_exc", "k_em", "k_isc", "k_des"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def generator_matrix(self) -> np.ndarray:
        """Master-equation generator M with dp/dt = M p, p = (p_g, p_e, p_s)."""
        x, m, i, d = self.k_exc, self.k_em, self.k_isc, self.k_des
        return np.array(
            [
                [-x, m, d],
                [x, -(m + i), 0.0],
                [0.0, i, -d],
            ]
        )


@dataclass(frozen=True)
class DetectionModel:
    """Photon collection: efficiency, channel split, and Poisson background."""

    efficiency: float
    background_rate: float = 0.0  # counts/s summed over both channels
    split: float = 0.5  # probability a detected photon lands on channel 0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be in [0, 1]")
        if not 0.0 <= self.split <= 1.0:
            raise ValueError("split must be in [0, 1]")
        if self.background_rate < 0:
            raise ValueError("background_rate must be >= 0")


@dataclass(frozen=True)
class Occupations:
    """Steady-state level occupations; ``absorbing`` warns of a dead-end shelf."""

    p_g: float
    p_e: float
    p_s: float
    absorbing: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.p_g, self.p_e, self.p_s])


def steady_state(rates: EmitterRates) -> Occupations:
    """Null space of the three-state master equation, normalized to 1.

    With ``k_isc > 0`` and ``k_des = 0`` the shelf is absorbing; the
    steady state (0, 0, 1) is returned with the ``absorbing`` flag set.
    """
    if rates.k_exc == 0.0:
        # Emitter never leaves the ground state; the e/s rows are
        # unreachable and may make the linear system singular.
        return Occupations(1.0, 0.0, 0.0)
    if rates.k_isc == 0.0:
        # Disconnected shelf leaves a two-dimensional null space; the
        # physical branch (shelf unreachable from g) has p_s = 0.
        p_e = rates.k_exc / (rates.k_exc + rates.k_em)
        return Occupations(1.0 - p_e, p_e, 0.0)
    absorbing = rates.k_des == 0.0
    gen = rates.generator_matrix()
    system = np.vstack([gen[:2], np.ones(3)])
    rhs = np.array([0.0, 0.0, 1.0])
    try:
        occ = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"steady state undefined for rates {rates}") from exc
    occ = np.clip(occ, 0.0, None)
    occ = occ / occ.sum()
    return Occupations(float(occ[0]), float(occ[1]), float(occ[2]), absorbing)


def _relaxation_modes(rates: EmitterRates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigen-decomposition of the generator, with p(0) = ground state."""
    gen = rates.generator_matrix()
    eigvals, eigvecs = np.linalg.eig(gen)
    coeffs = np.linalg.solve(eigvecs, np.array([1.0, 0.0, 0.0]))
    return eigvals, eigvecs, coeffs


def g2_oracle(rates: EmitterRates, taus_ns) -> np.ndarray:
    """g2(tau) = p_e(tau | ground at 0) / p_e(infinity) from the master equation.

    Exact antibunching g2(0) = 0 holds by construction.  Delays may be
    negative; the function is even in tau.
    """
    if rates.k_exc <= 0 or rates.k_em <= 0:
        raise ValueError("g2 oracle needs k_exc > 0 and k_em > 0")
    occ = steady_state(rates)
    if occ.p_e <= 0:
        raise ValueError("no steady-state emission (absorbing shelf); g2 undefined")
    taus = np.abs(np.asarray(taus_ns, dtype=float))
    eigvals, eigvecs, coeffs = _relaxation_modes(rates)
    p_e = (eigvecs[1] * coeffs) @ np.exp(np.outer(eigvals, taus))
    g2 = np.real_if_close(p_e / occ.p_e, tol=1e6)
    return np.asarray(g2, dtype=float)


def g2_parameters(rates: EmitterRates) -> tuple[float, float, float]:
    """(tau1_ns, tau2_ns, shoulder) of g2 = 1 - (1+a) e^{-|t|/tau1} + a e^{-|t|/tau2}.

    tau1/tau2 are the inverse nonzero relaxation rates of the chain and
    the shoulder amplitude follows from the initial slope dp_e/dt(0) =
    k_exc.  Requires a non-degenerate pair of relaxation modes.
    """
    occ = steady_state(rates)
    if occ.p_e <= 0:
        raise ValueError("no steady-state emission; g2 parameters undefined")
    eigvals = np.linalg.eigvals(rates.generator_matrix())
    decay = np.sort(-np.real(eigvals))[1:]  # drop the zero mode
    lam_slow, lam_fast = float(decay[0]), float(decay[1])
    if lam_slow <= 0 or abs(lam_fast - lam_slow) < 1e-12 * lam_fast:
        raise ValueError("relaxation modes degenerate; two-exponential form undefined")
    shoulder = (rates.k_exc / occ.p_e - lam_fast) / (lam_fast - lam_slow)
    return 1.0 / lam_fast, 1.0 / lam_slow, float(shoulder)


def rates_for_g2(
    tau1_ns: float,
    tau2_ns: float,
    shoulder: float,
    pump_ratio: float,
) -> EmitterRates:
    """Invert (tau1, tau2, a) plus a pump anchor into four transition rates.

    The two relaxation rates fix the sum and product of the generator's
    nonzero eigenvalues, the shoulder amplitude fixes k_des through
    k_exc / p_e_inf = lam1 lam2 / k_des, and ``pump_ratio`` = P/P0 (the
    excitation power in units of the saturation power) resolves the
    remaining freedom so that the rate set is consistent with a
    saturation curve I(P) = I_s / (1 + P0/P) at that operating point.
    """
    if not 0 < tau1_ns < tau2_ns:
        raise ValueError("need 0 < tau1 < tau2")
    if shoulder < 0:
        raise ValueError("shoulder amplitude must be >= 0")
    if pump_ratio <= 0:
        raise ValueError("pump_ratio must be > 0")
    lam1, lam2 = 1.0 / tau1_ns, 1.0 / tau2_ns
    total = lam1 + lam2
    product = lam1 * lam2
    k_des = product / (lam1 + shoulder * (lam1 - lam2))
    rest = total - k_des
    cross = product - k_des * rest  # equals k_exc * k_isc
    if cross < 0:
        raise ValueError("infeasible (tau1, tau2, shoulder) combination")
    k_exc = (k_des * pump_ratio * rest - cross) / (k_des * (pump_ratio + 1.0))
    if k_exc <= 0:
        raise ValueError("pump_ratio too small for this shoulder amplitude")
    k_isc = cross / k_exc
    k_em = rest - k_exc - k_isc
    if k_em <= 0:
        raise ValueError("no positive radiative rate satisfies these constraints")
    return EmitterRates(k_exc, k_em, k_isc, k_des)


@dataclass(frozen=True)
class PowerModel:
    """Power-to-rates map: k_exc = pump_per_mw * P, other rates fixed.

    ``k_des_per_mw`` optionally adds a linear power dependence to the
    shelf relaxation; with it enabled the slow g2 timescale shortens as
    the power grows, qualitatively matching what strongly pumped
    emitters show, but the saturation closed form below no longer
    applies.
    """

    pump_per_mw: float
    k_em: float
    k_isc: float
    k_des: float
    k_des_per_mw: float = 0.0

    def rates_at(self, power_mw: float) -> EmitterRates:
        if power_mw < 0:
            raise ValueError("power must be >= 0")
        return EmitterRates(
            self.pump_per_mw * power_mw,
            self.k_em,
            self.k_isc,
            self.k_des + self.k_des_per_mw * power_mw,
        )

    def saturation_params(self, efficiency: float) -> tuple[float, float]:
        """(I_s in cps, P0 in mW) of the detected rate I(P) = I_s / (1 + P0/P)."""
        if self.k_des_per_mw != 0.0:
            raise ValueError("closed-form saturation needs a power-independent k_des")
        if self.k_isc > 0 and self.k_des == 0:
            raise ValueError("absorbing shelf has no saturation curve")
        branch = self.k_des / (self.k_des + self.k_isc) if self.k_isc > 0 else 1.0
        i_s = efficiency * self.k_em * branch * 1e9
        if self.k_isc > 0:
            p0 = self.k_des * (self.k_em + self.k_isc) / (
                (self.k_isc + self.k_des) * self.pump_per_mw
            )
        else:
            p0 = self.k_em / self.pump_per_mw
        return i_s, p0


def detected_signal_rate(rates: EmitterRates, det: DetectionModel) -> float:
    """Analytic detected signal rate (both channels, counts/s)."""
    occ = steady_state(rates)
    return det.efficiency * rates.k_em * occ.p_e * 1e9


def signal_fraction(rates: EmitterRates, det: DetectionModel) -> float:
    """rho = s / (s + b): detected signal over total detected rate."""
    s = detected_signal_rate(rates, det)
    total = s + det.background_rate
    if total <= 0:
        raise ValueError("no detected counts at all; signal fraction undefined")
    return s / total


# ---------------------------------------------------------------------------
# Stochastic sampling.
#
# The chain only ever runs the cycle g -> e -> (g | s -> g), so a batch
# of cycles is fully described by four independent draws per cycle:
# the g dwell, the e dwell, the branch taken out of e, and (for shelved
# cycles) the s dwell.  That makes exact Gillespie sampling vectorizable
# without an event loop.
#
# For long acquisitions there is a stronger shortcut: every radiative
# decay returns the emitter to g and detection is an independent
# Bernoulli trial, so detected photons form a renewal process.  One
# inter-detection interval is the sum over K = M + NB cycles, where
# M ~ Geometric(efficiency) counts emissions until one is detected and
# NB ~ NegativeBinomial(M, k_em/(k_em+k_isc)) counts shelved cycles in
# between.  The dwell total over K cycles is Erlang, so the interval is
#
#     Erlang(K, k_exc) + Erlang(K, k_em + k_isc) + Erlang(NB, k_des),
#
# sampled at a cost proportional to the number of *detected* photons
# instead of the number of state transitions.  The distribution is
# identical to event-by-event simulation; tests verify this against the
# cycle sampler with a Kolmogorov-Smirnov check.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CycleSample:
    """A batch of g -> e -> (g | s -> g) cycles with their dwell times (ns)."""

    g_dwell: np.ndarray
    e_dwell: np.ndarray
    shelved: np.ndarray
    s_dwell: np.ndarray  # zero for radiative cycles

    def cycle_totals(self) -> np.ndarray:
        return self.g_dwell + self.e_dwell + self.s_dwell

    def emission_times(self) -> np.ndarray:
        """Photon emission times: the e -> g hop of each radiative cycle."""
        starts = np.cumsum(self.cycle_totals())
        starts = starts - self.cycle_totals()
        radiative = ~self.shelved
        return (starts + self.g_dwell + self.e_dwell)[radiative]

    def occupation_fractions(self) -> np.ndarray:
        total = float(np.sum(self.cycle_totals()))
        return np.array(
            [
                np.sum(self.g_dwell) / total,
                np.sum(self.e_dwell) / total,
                np.sum(self.s_dwell) / total,
            ]
        )


def sample_cycles(rates: EmitterRates, n_cycles: int, rng: np.random.Generator) -> CycleSample:
    """Exact Gillespie sampling of ``n_cycles`` excitation cycles."""
    if rates.k_exc <= 0 or rates.k_em <= 0:
        raise ValueError("cycle sampling needs k_exc > 0 and k_em > 0")
    k_e_total = rates.k_em + rates.k_isc
    p_rad = rates.k_em / k_e_total
    g_dwell = rng.exponential(1.0 / rates.k_exc, n_cycles)
    e_dwell = rng.exponential(1.0 / k_e_total, n_cycles)
    shelved = rng.random(n_cycles) >= p_rad
    shelf_scale = 1.0 / rates.k_des if rates.k_des > 0 else np.inf
    raw_s = rng.exponential(1.0, n_cycles) * shelf_scale
    s_dwell = np.where(shelved, raw_s, 0.0)
    return CycleSample(g_dwell, e_dwell, shelved, s_dwell)


def _renewal_intervals(
    rates: EmitterRates, efficiency: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n i.i.d. intervals between detected photons, in ns."""
    k_e_total = rates.k_em + rates.k_isc
    p_rad = rates.k_em / k_e_total
    emissions = rng.geometric(efficiency, n)
    if p_rad < 1.0:
        shelved = rng.negative_binomial(emissions, p_rad)
    else:
        shelved = np.zeros(n, dtype=np.int64)
    cycles = emissions + shelved
    intervals = rng.gamma(cycles, 1.0 / rates.k_exc)
    intervals += rng.gamma(cycles, 1.0 / k_e_total)
    if rates.k_isc > 0.0:
        if rates.k_des > 0.0:
            intervals += rng.gamma(shelved, 1.0 / rates.k_des)
        else:
            # absorbing shelf: the first shelving event ends the stream
            intervals = np.where(shelved > 0, np.inf, intervals)
    return intervals


def _detected_times_ns(
    rates: EmitterRates, efficiency: float, duration_ns: float, rng: np.random.Generator
) -> np.ndarray:
    """Detected-photon times in (0, duration_ns), renewal sampling."""
    if efficiency <= 0 or rates.k_exc <= 0 or rates.k_em <= 0:
        return np.empty(0)
    occ = steady_state(rates)
    rate_per_ns = efficiency * rates.k_em * occ.p_e
    chunks: list[np.ndarray] = []
    t = 0.0
    while True:
        remaining = duration_ns - t
        n = int(remaining * rate_per_ns * 1.05) + 64 if rate_per_ns > 0 else 1024
        n = min(max(n, 1024), 4_000_000)
        times = t + np.cumsum(_renewal_intervals(rates, efficiency, n, rng))
        inside = times < duration_ns
        if inside.all():
            chunks.append(times)
            t = float(times[-1])
            continue
        chunks.append(times[inside])
        break
    return np.concatenate(chunks) if chunks else np.empty(0)


def poisson_stream(
    rate_cps: float,
    duration_s: float,
    rng: RngSpec,
    channel: int = 0,
    label: str = "poisson",
) -> TimeTagStream:
    """Homogeneous Poisson tag stream on a single channel."""
    if duration_s <= 0:
        raise ValueError("duration must be > 0")
    if rate_cps < 0:
        raise ValueError("rate must be >= 0")
    gen = rng.generator()
    duration_ps = int(round(duration_s * PS_PER_SECOND))
    n = int(gen.poisson(rate_cps * duration_s))
    times = np.sort(gen.integers(0, duration_ps, n, dtype=np.int64))
    meta = {"label": label, "seed": rng.seed, "stream_id": rng.stream_id, "power_mw": None}
    return TimeTagStream(np.full(n, channel, dtype=np.uint8), times, duration_ps, meta)


def simulate_stream(
    rates: EmitterRates,
    det: DetectionModel,
    duration_s: float,
    rng: RngSpec,
    meta: dict | None = None,
    method: str = "renewal",
) -> tuple[TimeTagStream, TimeTagStream]:
    """Simulate one HBT acquisition; returns the (channel 0, channel 1) streams.

    ``method="renewal"`` (default) samples detected photons directly at
    cost proportional to the detected count; ``method="cycles"`` runs
    the cycle-batched Gillespie sampler over every state transition and
    is only practical for short or slow streams.  Both draw from the
    same distribution.
    """
    if duration_s <= 0:
        raise ValueError("duration must be > 0")
    gen = rng.generator()
    duration_ns = duration_s * 1e9
    duration_ps = int(round(duration_s * PS_PER_SECOND))

    if rates.k_exc > 0 and rates.k_em > 0 and det.efficiency > 0:
        if method == "renewal":
            sig_ns = _detected_times_ns(rates, det.efficiency, duration_ns, gen)
        elif method == "cycles":
            sig_ns = _detected_times_cycles(rates, det.efficiency, duration_ns, gen)
        else:
            raise ValueError(f"unknown method {method!r}")
    else:
        sig_ns = np.empty(0)
    sig_ps = np.rint(sig_ns * 1000.0).astype(np.int64)
    np.clip(sig_ps, 0, duration_ps, out=sig_ps)
    to_ch0 = gen.random(sig_ps.size) < det.split

    base_meta = {
        "seed": rng.seed,
        "stream_id": rng.stream_id,
        "power_mw": None,
        "label": "emitter",
    }
    if meta:
        base_meta.update(meta)

    streams = []
    for channel, share in ((0, det.split), (1, 1.0 - det.split)):
        signal = sig_ps[to_ch0] if channel == 0 else sig_ps[~to_ch0]
        n_bg = int(gen.poisson(det.background_rate * share * duration_s))
        bg = gen.integers(0, duration_ps, n_bg, dtype=np.int64)
        times = np.concatenate([signal, bg])
        channels = np.full(times.size, channel, dtype=np.uint8)
        ch_meta = dict(base_meta)
        ch_meta["label"] = f"{base_meta['label']}/ch{channel}"
        streams.append(sorted_stream(channels, times, duration_ps, ch_meta))
    return streams[0], streams[1]


def _detected_times_cycles(
    rates: EmitterRates, efficiency: float, duration_ns: float, rng: np.random.Generator
) -> np.ndarray:
    """Reference path: emission times from explicit cycles, then thinning."""
    k_e_total = rates.k_em + rates.k_isc
    p_rad = rates.k_em / k_e_total
    mean_cycle = 1.0 / rates.k_exc + 1.0 / k_e_total
    if rates.k_des > 0:
        mean_cycle += (1.0 - p_rad) / rates.k_des
    elif rates.k_isc > 0:
        mean_cycle = np.inf
    detected: list[np.ndarray] = []
    t = 0.0
    while True:
        remaining = duration_ns - t
        n = 4096 if not np.isfinite(mean_cycle) else int(remaining / mean_cycle * 1.05) + 64
        n = min(max(n, 1024), 4_000_000)
        batch = sample_cycles(rates, n, rng)
        emission = t + batch.emission_times()
        kept = emission[rng.random(emission.size) < efficiency]
        t += float(np.sum(batch.cycle_totals()))
        if t >= duration_ns or not np.isfinite(t):
            detected.append(kept[kept < duration_ns])
            break
        detected.append(kept)
    return np.concatenate(detected) if detected else np.empty(0)


# ---------------------------------------------------------------------------
# Synthetic confocal scans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanSpec:
    """Geometry and brightness of a synthetic confocal map of a site array.

    Sites sit on an n x n square lattice (n = extent/spacing rounded
    down) centered in the field of view, optionally rotated about the
    image center and shifted by ``offset_um``.  ``site_rates`` is either
    one expected photon count per site or an array of length n*n
    (row-major over lattice indices); ``background`` is the expected
    count per pixel.
    """

    extent_um: float
    pixel_um: float
    spacing_um: float
    psf_sigma_um: float
    site_rates: float | np.ndarray
    background: float
    rotation_deg: float = 0.0
    offset_um: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.extent_um <= 0:
            raise ValueError("extent_um must be > 0")
        if self.pixel_um <= 0:
            raise ValueError("pixel_um must be > 0")
        if self.spacing_um <= 0:
            raise ValueError("spacing_um must be > 0")
        if self.psf_sigma_um <= 0:
            raise ValueError("psf_sigma_um must be > 0")
        if self.background < 0:
            raise ValueError("background must be >= 0")

    @property
    def grid_n(self) -> int:
        return int(self.extent_um / self.spacing_um)

    def site_positions(self) -> np.ndarray:
        """(n*n, 2) site coordinates in um, row-major over (i, j)."""
        n = self.grid_n
        offsets = (np.arange(n) - (n - 1) / 2.0) * self.spacing_um
        xx, yy = np.meshgrid(offsets, offsets, indexing="ij")
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        theta = np.deg2rad(self.rotation_deg)
        rot = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        pts = pts @ rot.T
        center = self.extent_um / 2.0
        return pts + np.array([center + self.offset_um[0], center + self.offset_um[1]])

    def rates_array(self) -> np.ndarray:
        n_sites = self.grid_n**2
        rates = np.asarray(self.site_rates, dtype=float)
        if rates.ndim == 0:
            rates = np.full(n_sites, float(rates))
        if rates.size != n_sites:
            raise ValueError(f"site_rates must be scalar or length {n_sites}")
        if np.any(rates < 0):
            raise ValueError("site rates must be >= 0")
        return rates


def synth_scan(spec: ScanSpec, rng: RngSpec) -> np.ndarray:
    """Poisson-draw a confocal image: background plus Gaussian spots.

    The expected image is ``background + sum_sites rate * G(psf_sigma)``
    with each spot's Gaussian normalized so its pixel sum equals the
    site rate; every pixel is then drawn Poisson.  Returns an (ny, nx)
    int array with row index = y.
    """
    positions = spec.site_positions()
    if np.any(positions < 0) or np.any(positions > spec.extent_um):
        raise ValueError("site positions must lie inside the scan extent")
    n_px = int(round(spec.extent_um / spec.pixel_um))
    centers = (np.arange(n_px) + 0.5) * spec.pixel_um
    expected = np.full((n_px, n_px), float(spec.background))
    rates = spec.rates_array()
    norm = spec.pixel_um**2 / (2.0 * np.pi * spec.psf_sigma_um**2)
    for (x0, y0), rate in zip(positions, rates):
        if rate == 0:
            continue
        gx = np.exp(-0.5 * ((centers - x0) / spec.psf_sigma_um) ** 2)
        gy = np.exp(-0.5 * ((centers - y0) / spec.psf_sigma_um) ** 2)
        expected += rate * norm * np.outer(gy, gx)
    gen = rng.generator()
    return gen.poisson(expected).astype(np.int64)
