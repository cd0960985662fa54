"""Shared domain types, unit conventions, RNG contract, and file formats.

Unit conventions used across the package:

* time tags and histogram delays: integer picoseconds (ps)
* excitation powers: milliwatts (mW)
* count rates: counts per second (cps)
* frequencies: megahertz (MHz)

Keeping tag times as integers avoids any float drift in correlation
binning; conversions to physical units happen only at analysis
boundaries.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TimeTag",
    "TimeTagStream",
    "CorrelationHistogram",
    "FitResult",
    "RngSpec",
    "merge_streams",
    "count_rate",
    "write_stream",
    "read_stream",
    "write_histogram",
    "read_histogram",
    "max_threads",
]

PS_PER_SECOND = 1_000_000_000_000

THREADS_ENV_VAR = "DEFECT_FOUNDRY_THREADS"


@dataclass(frozen=True)
class TimeTag:
    """A single detector click: channel index (0 or 1) and time in ps."""

    channel: int
    t: int

    def __post_init__(self):
        if self.channel not in (0, 1):
            raise ValueError(f"channel must be 0 or 1, got {self.channel}")
        if self.t < 0:
            raise ValueError(f"tag time must be >= 0, got {self.t}")


@dataclass(frozen=True)
class TimeTagStream:
    """Ordered photon detection record for a two-detector acquisition.

    ``times_ps`` is sorted non-decreasing; ties between channels are
    broken by channel index so a stream has a single canonical ordering.
    ``meta`` carries the acquisition descriptor (power_mw, seed,
    stream_id, label) and is serialized to the JSON sidecar.
    """

    channels: np.ndarray
    times_ps: np.ndarray
    duration_ps: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        times = np.ascontiguousarray(self.times_ps, dtype=np.int64)
        if channels.shape != times.shape or channels.ndim != 1:
            raise ValueError("channels and times_ps must be 1-d arrays of equal length")
        if self.duration_ps <= 0:
            raise ValueError(f"duration_ps must be > 0, got {self.duration_ps}")
        if times.size:
            if times[0] < 0:
                raise ValueError("tag times must be >= 0")
            if times[-1] > self.duration_ps:
                raise ValueError("tag times must not exceed duration_ps")
            if np.any(np.diff(times) < 0):
                raise ValueError("tags must be sorted by time")
            if np.any(channels > 1):
                raise ValueError("channels must be 0 or 1")
        channels.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "times_ps", times)

    def __len__(self) -> int:
        return int(self.times_ps.size)

    @property
    def tags(self) -> list[TimeTag]:
        return [TimeTag(int(c), int(t)) for c, t in zip(self.channels, self.times_ps)]

    def channel_times(self, channel: int) -> np.ndarray:
        """Times (ps) of all tags on one channel."""
        return self.times_ps[self.channels == channel]

    def select_channel(self, channel: int) -> "TimeTagStream":
        keep = self.channels == channel
        return TimeTagStream(
            self.channels[keep], self.times_ps[keep], self.duration_ps, dict(self.meta)
        )


def sorted_stream(channels, times_ps, duration_ps: int, meta: dict | None = None) -> TimeTagStream:
    """Build a stream from unordered tags, sorting by (time, channel)."""
    channels = np.asarray(channels, dtype=np.uint8)
    times = np.asarray(times_ps, dtype=np.int64)
    order = np.lexsort((channels, times))
    return TimeTagStream(channels[order], times[order], duration_ps, meta or {})


@dataclass(frozen=True)
class CorrelationHistogram:
    """Normalized coincidence histogram N(tau) over delays in [-window, +window].

    ``taus_ps`` are bin centers k*bin_width_ps for k in [-K..K]; the bin
    count is always odd so a bin centered at tau=0 exists.  ``values``
    holds N(tau) normalized such that uncorrelated streams average to 1;
    ``raw_pairs`` holds the unnormalized per-bin pair counts and
    ``norm_factor`` the scalar divisor used.
    """

    bin_width_ps: int
    window_ps: int
    taus_ps: np.ndarray
    values: np.ndarray
    raw_pairs: np.ndarray
    norm_factor: float

    def __post_init__(self):
        taus = np.ascontiguousarray(self.taus_ps, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        raw = np.ascontiguousarray(self.raw_pairs, dtype=np.float64)
        if not (taus.shape == values.shape == raw.shape) or taus.ndim != 1:
            raise ValueError("taus_ps, values and raw_pairs must be 1-d arrays of equal length")
        if taus.size % 2 != 1:
            raise ValueError("histogram must have an odd number of bins (tau=0 bin)")
        if self.bin_width_ps <= 0:
            raise ValueError("bin_width_ps must be > 0")
        if self.norm_factor <= 0:
            raise ValueError("norm_factor must be > 0")
        for arr in (taus, values, raw):
            arr.setflags(write=False)
        object.__setattr__(self, "taus_ps", taus)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "raw_pairs", raw)

    @property
    def n_bins(self) -> int:
        return int(self.taus_ps.size)

    def zero_bin(self) -> float:
        """Value of the bin centered at tau = 0."""
        return float(self.values[self.n_bins // 2])


@dataclass(frozen=True)
class FitResult:
    """Outcome of a nonlinear least-squares fit."""

    params: dict[str, float]
    stderr: dict[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    message: str = ""

    def __post_init__(self):
        if any(v < 0 for v in self.stderr.values()):
            raise ValueError("standard errors must be >= 0")
        if self.converged and self.iterations < 1:
            raise ValueError("a converged fit reports at least one iteration")

    def __getitem__(self, name: str) -> float:
        return self.params[name]


@dataclass(frozen=True)
class RngSpec:
    """Deterministic RNG handle: counter-based Philox keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs reproduce identical draws on every
    platform.  Modules take substreams via ``substream`` so independent
    pipeline stages never share a bit generator.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, offset: int) -> "RngSpec":
        return RngSpec(self.seed, self.stream_id + offset)


def merge_streams(a: TimeTagStream, b: TimeTagStream) -> TimeTagStream:
    """Sorted union of two streams sharing one acquisition window."""
    if a.duration_ps != b.duration_ps:
        raise ValueError(
            f"cannot merge streams of different durations ({a.duration_ps} != {b.duration_ps})"
        )
    channels = np.concatenate([a.channels, b.channels])
    times = np.concatenate([a.times_ps, b.times_ps])
    meta = {"label": "merged"}
    if a.meta.get("label") or b.meta.get("label"):
        meta["label"] = f"{a.meta.get('label', '?')}+{b.meta.get('label', '?')}"
    return sorted_stream(channels, times, a.duration_ps, meta)


def count_rate(s: TimeTagStream) -> float:
    """Total tag count divided by duration, in counts/s."""
    # duration_ps > 0 is a container invariant
    return len(s) * PS_PER_SECOND / s.duration_ps


def max_threads() -> int:
    """Parallelism cap: DEFECT_FOUNDRY_THREADS if set, else the CPU count."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is not None:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# File formats
#
# Time-tag streams: CSV with header "channel,t_ps", one tag per row, plus a
# JSON sidecar "<name>.json" holding {duration_ps, power_mw, seed, stream_id,
# label}.  Histograms: CSV with header "tau_ps,N_norm,raw_pairs".
# ---------------------------------------------------------------------------

_SIDECAR_KEYS = ("duration_ps", "power_mw", "seed", "stream_id", "label")


def _sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".json")


def write_stream(stream: TimeTagStream, csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        fh.write("channel,t_ps\n")
        np.savetxt(
            fh,
            np.column_stack([stream.channels.astype(np.int64), stream.times_ps]),
            fmt="%d",
            delimiter=",",
        )
    sidecar = {"duration_ps": stream.duration_ps}
    for key in _SIDECAR_KEYS[1:]:
        sidecar[key] = stream.meta.get(key)
    with open(_sidecar_path(csv_path), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_stream(csv_path: str | Path) -> TimeTagStream:
    """Read a time-tag CSV plus sidecar; malformed rows report their line number."""
    csv_path = Path(csv_path)
    sidecar_path = _sidecar_path(csv_path)
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar_path}")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    if "duration_ps" not in sidecar:
        raise ValueError(f"{sidecar_path}: sidecar missing duration_ps")
    channels: list[int] = []
    times: list[int] = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["channel", "t_ps"]:
            raise ValueError(f"{csv_path}:1: expected header 'channel,t_ps'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                channels.append(int(row[0]))
                times.append(int(row[1]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{csv_path}:{lineno}: malformed tag row {row!r}") from exc
    meta = {k: sidecar.get(k) for k in _SIDECAR_KEYS[1:]}
    return TimeTagStream(
        np.array(channels, dtype=np.uint8),
        np.array(times, dtype=np.int64),
        int(sidecar["duration_ps"]),
        meta,
    )


def write_histogram(hist: CorrelationHistogram, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("tau_ps,N_norm,raw_pairs\n")
        for tau, value, raw in zip(hist.taus_ps, hist.values, hist.raw_pairs):
            fh.write(f"{int(tau)},{float(value)!r},{int(raw)}\n")


def read_histogram(path: str | Path) -> CorrelationHistogram:
    taus: list[int] = []
    values: list[float] = []
    raws: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["tau_ps", "N_norm", "raw_pairs"]:
            raise ValueError(f"{path}:1: expected header 'tau_ps,N_norm,raw_pairs'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                taus.append(int(row[0]))
                values.append(float(row[1]))
                raws.append(float(row[2]))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed histogram row {row!r}") from exc
    taus_arr = np.array(taus, dtype=np.int64)
    if taus_arr.size < 2:
        raise ValueError(f"{path}: histogram needs at least 2 bins")
    bin_width = int(taus_arr[1] - taus_arr[0])
    window = int(taus_arr[-1])
    raw_arr = np.array(raws)
    value_arr = np.array(values)
    # Recover the normalization scalar (exact for raw histograms, where
    # every value is raw/norm; approximate after background correction).
    total_value = float(np.sum(value_arr))
    norm = float(np.sum(raw_arr)) / total_value if total_value > 0 else 1.0
    return CorrelationHistogram(bin_width, window, taus_arr, value_arr, raw_arr, norm)
