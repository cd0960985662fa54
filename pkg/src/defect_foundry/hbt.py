"""Coincidence histogram construction, background correction, and g2 fitting.

The correlator computes the full cross-correlation (every channel-0 /
channel-1 pair inside the delay window, not start-stop) and normalizes
by rate0 * rate1 * bin_width * duration, so uncorrelated streams give
N(tau) = 1.  Pair enumeration walks a sliding window over the sorted
tag arrays, which keeps the cost at O(n * pairs-per-tag) instead of
O(n^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CorrelationHistogram, FitResult, TimeTagStream
from .numfit import ModelSpec, fit_nlls

__all__ = [
    "G2Fit",
    "DEFAULT_BIN_PS",
    "DEFAULT_WINDOW_PS",
    "g2_model",
    "correlate",
    "background_correct",
    "fit_g2",
    "estimate_emitter_count",
]

DEFAULT_BIN_PS = 1_000
DEFAULT_WINDOW_PS = 500_000

# g2(0) threshold above which photon statistics stop distinguishing n from
# n+1 and the intensity ratio takes over (midpoint of 1-1/3 and 1-1/4).
G2_COUNT_THRESHOLD = 0.75
# Sites dimmer than half a single-emitter reference are counted as empty.
EMPTY_SITE_FRACTION = 0.5

_PAIR_CHUNK = 2_000_000


@dataclass(frozen=True)
class G2Fit:
    """Fitted three-level g2 parameters for one correlation histogram."""

    a: float
    tau1_ns: float
    tau2_ns: float
    g2_zero: float  # model value at tau=0 after correction: 1-(1+a)+a = 0
    rho: float
    measured_zero: float  # corrected value of the tau=0 bin, for classification
    tau2_identifiable: bool
    fit: FitResult

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")


def g2_model() -> ModelSpec:
    """Three-level shape g2(t) = 1 - (1+a) exp(-|t|/tau1) + a exp(-|t|/tau2).

    Times are in ns.  Parameters {a, tau1, tau2}; the model value at
    t = 0 is identically zero.
    """

    def evaluate(params: np.ndarray, t: np.ndarray) -> np.ndarray:
        a, tau1, tau2 = params
        at = np.abs(t)
        return 1.0 - (1.0 + a) * np.exp(-at / tau1) + a * np.exp(-at / tau2)

    def jacobian(params: np.ndarray, t: np.ndarray) -> np.ndarray:
        a, tau1, tau2 = params
        at = np.abs(t)
        e1 = np.exp(-at / tau1)
        e2 = np.exp(-at / tau2)
        jac = np.empty((len(t), 3))
        jac[:, 0] = e2 - e1
        jac[:, 1] = -(1.0 + a) * e1 * at / tau1**2
        jac[:, 2] = a * e2 * at / tau2**2
        return jac

    return ModelSpec(
        name="g2_three_level",
        param_names=("a", "tau1", "tau2"),
        eval=evaluate,
        bounds=((0.0, None), (1e-3, None), (1e-3, None)),
        jac=jacobian,
    )


def correlate(
    ch0: TimeTagStream,
    ch1: TimeTagStream,
    bin_width_ps: int = DEFAULT_BIN_PS,
    window_ps: int = DEFAULT_WINDOW_PS,
) -> CorrelationHistogram:
    """Cross-correlation histogram of delays tau = t1 - t0 in [-window, window].

    Delay binning rounds to the nearest bin center with ties broken away
    from zero, which makes the histogram exactly mirror-symmetric under
    channel exchange.
    """
    if ch0.duration_ps != ch1.duration_ps:
        raise ValueError("streams must share one acquisition duration")
    if bin_width_ps <= 0:
        raise ValueError("bin_width_ps must be > 0")
    if window_ps < bin_width_ps:
        raise ValueError("window_ps must be >= bin_width_ps")
    t0 = ch0.channel_times(0)
    t1 = ch1.channel_times(1)
    if t0.size == 0 or t1.size == 0:
        raise ValueError("both channels need at least one tag to normalize")

    n_half = int(window_ps // bin_width_ps)
    n_bins = 2 * n_half + 1
    # half-open reach in ps so every pair with |k| <= n_half is included
    reach = n_half * bin_width_ps + (bin_width_ps + 1) // 2
    counts = np.zeros(n_bins, dtype=np.int64)

    lo = np.searchsorted(t1, t0 - reach, side="left")
    hi = np.searchsorted(t1, t0 + reach, side="right")
    sizes = hi - lo
    boundaries = np.concatenate([[0], np.cumsum(sizes)])

    start = 0
    while start < t0.size:
        stop = int(np.searchsorted(boundaries, boundaries[start] + _PAIR_CHUNK, side="right")) - 1
        stop = min(max(stop, start + 1), t0.size)
        chunk_sizes = sizes[start:stop]
        n_pairs = int(chunk_sizes.sum())
        if n_pairs:
            left = np.repeat(t0[start:stop], chunk_sizes)
            offsets = np.arange(n_pairs) - np.repeat(
                boundaries[start:stop] - boundaries[start], chunk_sizes
            )
            right = t1[np.repeat(lo[start:stop], chunk_sizes) + offsets]
            tau = right - left
            k = np.sign(tau) * ((2 * np.abs(tau) + bin_width_ps) // (2 * bin_width_ps))
            k = k[np.abs(k) <= n_half].astype(np.int64)
            counts += np.bincount(k + n_half, minlength=n_bins)
        start = stop

    duration_s = ch0.duration_ps / 1e12
    rate0 = t0.size / duration_s
    rate1 = t1.size / duration_s
    norm = rate0 * rate1 * (bin_width_ps / 1e12) * duration_s
    taus = (np.arange(n_bins) - n_half) * bin_width_ps
    return CorrelationHistogram(
        bin_width_ps=int(bin_width_ps),
        window_ps=int(n_half * bin_width_ps),
        taus_ps=taus.astype(np.int64),
        values=counts / norm,
        raw_pairs=counts.astype(np.float64),
        norm_factor=float(norm),
    )


def background_correct(hist: CorrelationHistogram, rho: float) -> CorrelationHistogram:
    """Remove uncorrelated background: g2 = (N - (1 - rho^2)) / rho^2.

    ``rho`` is the signal fraction s/(s+b) measured from count rates.
    The map is exactly invertible for rho > 0; corrected bins can dip
    slightly below zero where the true g2 is near zero and shot noise
    dominates.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must be in (0, 1]")
    floor = 1.0 - rho * rho
    return CorrelationHistogram(
        bin_width_ps=hist.bin_width_ps,
        window_ps=hist.window_ps,
        taus_ps=hist.taus_ps,
        values=(hist.values - floor) / (rho * rho),
        raw_pairs=hist.raw_pairs,
        norm_factor=hist.norm_factor,
    )


def _initial_guess(taus_ns: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Heuristic (a, tau1, tau2) start from a corrected histogram."""
    # fold the two delay signs together for a cleaner profile
    order = np.argsort(np.abs(taus_ns), kind="stable")
    folded_t = np.abs(taus_ns)[order]
    folded_g = g2[order]
    # shoulder amplitude from a lightly smoothed maximum
    kernel = np.ones(5) / 5.0
    smooth = np.convolve(folded_g, kernel, mode="same") if folded_g.size >= 5 else folded_g
    a0 = min(max(float(np.max(smooth) - 1.0), 0.0), 50.0)

    crossing = folded_t[-1] / 10.0
    above = np.nonzero(folded_g >= 0.5)[0]
    if above.size:
        crossing = max(float(folded_t[above[0]]), float(folded_t[1] - folded_t[0]), 1e-3)
    # g2 crosses 0.5 where (1+a) exp(-t/tau1) = 0.5 + a (shoulder term ~ 1 there)
    tau1_0 = crossing / math.log((1.0 + a0) / (0.5 + a0))

    tau2_0 = max(folded_t[-1] / 5.0, 2.0 * tau1_0)
    tail = (folded_t > 3.0 * tau1_0) & (folded_g > 1.0 + 0.05 * a0)
    if a0 > 0.02 and np.count_nonzero(tail) >= 8:
        slope = np.polyfit(folded_t[tail], np.log(folded_g[tail] - 1.0), 1)[0]
        if slope < 0:
            tau2_0 = min(max(-1.0 / slope, 2.0 * tau1_0), 10.0 * folded_t[-1])
    return np.array([a0, tau1_0, tau2_0])


def fit_g2(hist: CorrelationHistogram, rho: float) -> G2Fit:
    """Background-correct a histogram and fit the three-level g2 model.

    The histogram should span several times the slow timescale for the
    shoulder to be identifiable; when the fitted shoulder is consistent
    with zero the ``tau2_identifiable`` flag is cleared and tau2 is
    reported as-is but should not be interpreted.
    """
    corrected = background_correct(hist, rho)
    taus_ns = corrected.taus_ps / 1000.0
    values = corrected.values
    p0 = _initial_guess(taus_ns, values)
    result = fit_nlls(g2_model(), p0, taus_ns, values)
    a = result.params["a"]
    tau2_err = result.stderr["tau2"]
    identifiable = a > 0.02 and (tau2_err == 0.0 or tau2_err < result.params["tau2"])
    return G2Fit(
        a=a,
        tau1_ns=result.params["tau1"],
        tau2_ns=result.params["tau2"],
        g2_zero=0.0,
        rho=rho,
        measured_zero=corrected.zero_bin(),
        tau2_identifiable=identifiable,
        fit=result,
    )


def estimate_emitter_count(
    measured_g2_zero: float | None,
    site_intensity: float,
    single_ref_intensity: float,
) -> int:
    """Emitter count for one site from its g2(0) and brightness.

    Rules, in order: sites below half the single-emitter reference are
    empty; a usable g2(0) <= 0.75 gives n = round(1/(1 - g2(0))), taken
    at face value only for n <= 2; otherwise the intensity ratio decides
    (g2 saturates for n >= 3).  A g2(0) >= 1 falls back to the intensity
    rule.  Only the ratio of the two intensities matters.
    """
    if single_ref_intensity <= 0:
        raise ValueError("single_ref_intensity must be > 0")
    ratio = site_intensity / single_ref_intensity
    if ratio < EMPTY_SITE_FRACTION:
        return 0
    n_int = int(math.floor(ratio + 0.5))
    if measured_g2_zero is None or measured_g2_zero >= 1.0 or measured_g2_zero > G2_COUNT_THRESHOLD:
        return max(n_int, 1)
    if measured_g2_zero < 0.0:
        measured_g2_zero = 0.0
    n_g2 = int(math.floor(1.0 / (1.0 - measured_g2_zero) + 0.5))
    if n_g2 <= 2:
        return max(n_g2, 1)
    return max(n_int, 1)
