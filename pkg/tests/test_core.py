import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defect_foundry import core
from defect_foundry.core import RngSpec, TimeTag, TimeTagStream, count_rate, merge_streams
from defect_foundry.emitter_sim import poisson_stream

PS = core.PS_PER_SECOND


def make_stream(channels, times, duration_ps=PS):
    return TimeTagStream(
        np.asarray(channels, dtype=np.uint8), np.asarray(times, dtype=np.int64), duration_ps
    )


def empty_stream(duration_ps=PS):
    return make_stream([], [], duration_ps)


class TestContainers:
    def test_timetag_validation(self):
        TimeTag(0, 5)
        with pytest.raises(ValueError):
            TimeTag(2, 5)
        with pytest.raises(ValueError):
            TimeTag(0, -1)

    def test_stream_requires_sorted_times(self):
        with pytest.raises(ValueError):
            make_stream([0, 0], [10, 5])

    def test_stream_rejects_tags_beyond_duration(self):
        with pytest.raises(ValueError):
            make_stream([0], [PS + 1])

    def test_stream_rejects_bad_channel(self):
        with pytest.raises(ValueError):
            make_stream([3], [5])

    def test_stream_rejects_nonpositive_duration(self):
        with pytest.raises(ValueError):
            make_stream([], [], 0)

    def test_streams_are_immutable(self):
        s = make_stream([0, 1], [1, 2])
        with pytest.raises(ValueError):
            s.times_ps[0] = 7

    def test_histogram_needs_odd_bins(self):
        with pytest.raises(ValueError):
            core.CorrelationHistogram(
                1000, 1000, np.array([-1000, 0]), np.zeros(2), np.zeros(2), 1.0
            )

    def test_fitresult_invariants(self):
        with pytest.raises(ValueError):
            core.FitResult({"a": 1.0}, {"a": -0.1}, 0.0, True, 3)
        with pytest.raises(ValueError):
            core.FitResult({"a": 1.0}, {"a": 0.1}, 0.0, True, 0)


class TestMerge:
    def test_empty_plus_empty_is_empty(self):
        merged = merge_streams(empty_stream(), empty_stream())
        assert len(merged) == 0

    def test_two_element_sort(self):
        a = make_stream([0], [5])
        b = make_stream([1], [3])
        merged = merge_streams(a, b)
        assert merged.times_ps.tolist() == [3, 5]
        assert merged.channels.tolist() == [1, 0]

    def test_duration_mismatch_rejected(self):
        with pytest.raises(ValueError):
            merge_streams(empty_stream(PS), empty_stream(2 * PS))

    def test_merged_poisson_rate(self):
        # two 1 s streams at 1 kcps merge to 2 kcps within 3 sigma
        a = poisson_stream(1000.0, 1.0, RngSpec(71, 0), channel=0)
        b = poisson_stream(1000.0, 1.0, RngSpec(71, 1), channel=1)
        merged = merge_streams(a, b)
        assert abs(count_rate(merged) - 2000.0) <= 3.0 * math.sqrt(2000.0)

    def test_tie_break_by_channel(self):
        a = make_stream([1], [5])
        b = make_stream([0], [5])
        merged = merge_streams(a, b)
        assert merged.channels.tolist() == [0, 1]


@st.composite
def tag_lists(draw):
    n = draw(st.integers(0, 30))
    times = draw(st.lists(st.integers(0, 10_000), min_size=n, max_size=n))
    chans = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    return chans, times


def _multiset(stream):
    return sorted(zip(stream.times_ps.tolist(), stream.channels.tolist()))


@given(tag_lists(), tag_lists())
def test_merge_commutative(ab, cd):
    sa = core.sorted_stream(np.array(ab[0], dtype=np.uint8), ab[1], 20_000)
    sb = core.sorted_stream(np.array(cd[0], dtype=np.uint8), cd[1], 20_000)
    assert _multiset(merge_streams(sa, sb)) == _multiset(merge_streams(sb, sa))


@given(tag_lists(), tag_lists(), tag_lists())
def test_merge_associative(ab, cd, ef):
    streams = [
        core.sorted_stream(np.array(x[0], dtype=np.uint8), x[1], 20_000)
        for x in (ab, cd, ef)
    ]
    left = merge_streams(merge_streams(streams[0], streams[1]), streams[2])
    right = merge_streams(streams[0], merge_streams(streams[1], streams[2]))
    assert _multiset(left) == _multiset(right)


class TestCountRate:
    def test_zero_tags(self):
        assert count_rate(empty_stream()) == 0.0

    def test_simple_arithmetic(self):
        times = np.linspace(0, PS - 1, 7000).astype(np.int64)
        s = make_stream(np.zeros(7000), np.sort(times))
        assert count_rate(s) == pytest.approx(7000.0)

    def test_zero_duration_rejected(self):
        with pytest.raises(ValueError):
            make_stream([], [], 0)


class TestRng:
    def test_identical_spec_reproduces(self):
        a = RngSpec(123, 4).generator().random(100)
        b = RngSpec(123, 4).generator().random(100)
        assert np.array_equal(a, b)

    def test_substreams_differ(self):
        a = RngSpec(123, 0).generator().random(100)
        b = RngSpec(123, 1).generator().random(100)
        assert not np.array_equal(a, b)

    def test_substream_offsets(self):
        assert RngSpec(9, 2).substream(3) == RngSpec(9, 5)


class TestStreamIO:
    def test_round_trip_bit_for_bit(self, tmp_path, rng):
        n = 500
        times = np.sort(rng.integers(0, PS, n))
        chans = rng.integers(0, 2, n).astype(np.uint8)
        meta = {"power_mw": 0.5, "seed": 7, "stream_id": 1, "label": "trip"}
        s = TimeTagStream(chans, times, PS, meta)
        core.write_stream(s, tmp_path / "s.csv")
        back = core.read_stream(tmp_path / "s.csv")
        assert np.array_equal(back.times_ps, s.times_ps)
        assert np.array_equal(back.channels, s.channels)
        assert back.duration_ps == s.duration_ps
        assert back.meta == meta

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("channel,t_ps\n0,10\n1,oops\n")
        (tmp_path / "bad.json").write_text('{"duration_ps": 100}')
        with pytest.raises(ValueError, match="bad.csv:3"):
            core.read_stream(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("channel,t_ps\n")
        with pytest.raises(FileNotFoundError):
            core.read_stream(path)

    def test_histogram_round_trip(self, tmp_path):
        taus = np.array([-2000, -1000, 0, 1000, 2000], dtype=np.int64)
        raw = np.array([4.0, 6.0, 1.0, 5.0, 3.0])
        hist = core.CorrelationHistogram(1000, 2000, taus, raw / 4.75, raw, 4.75)
        core.write_histogram(hist, tmp_path / "h.csv")
        back = core.read_histogram(tmp_path / "h.csv")
        assert np.array_equal(back.taus_ps, hist.taus_ps)
        assert np.array_equal(back.values, hist.values)
        assert np.array_equal(back.raw_pairs, hist.raw_pairs)
        assert back.norm_factor == pytest.approx(4.75)


class TestThreads:
    def test_env_var_caps(self, monkeypatch):
        monkeypatch.setenv(core.THREADS_ENV_VAR, "3")
        assert core.max_threads() == 3

    def test_invalid_env_var(self, monkeypatch):
        monkeypatch.setenv(core.THREADS_ENV_VAR, "zero")
        with pytest.raises(ValueError):
            core.max_threads()
        monkeypatch.setenv(core.THREADS_ENV_VAR, "0")
        with pytest.raises(ValueError):
            core.max_threads()

    def test_default_is_positive(self, monkeypatch):
        monkeypatch.delenv(core.THREADS_ENV_VAR, raising=False)
        assert core.max_threads() >= 1
