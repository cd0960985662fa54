import math

import numpy as np
import pytest
from scipy import stats as sps

from defect_foundry.core import RngSpec
from defect_foundry.emitter_sim import ScanSpec, synth_scan
from defect_foundry.scanstats import (
    SiteRecord,
    depth_stats,
    detect_spots,
    fit_saturation,
    ions_per_aperture,
    ions_per_aperture_interval,
    lateral_uncertainty,
    photostability,
    read_depth_profile,
    read_image_csv,
    read_pgm16,
    read_site_table,
    register_grid,
    write_image_csv,
    write_pgm16,
    write_site_table,
    yield_report,
)


def saturation_curve(powers, i_s=7400.0, p0=0.43):
    powers = np.asarray(powers, dtype=float)
    return np.column_stack([powers, i_s / (1.0 + p0 / powers)])


class TestFitSaturation:
    def test_exact_recovery(self):
        pts = saturation_curve([0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56, 5.12])
        fit = fit_saturation(pts)
        assert fit.i_s == pytest.approx(7400.0, rel=1e-6)
        assert fit.p0 == pytest.approx(0.43, rel=1e-6)

    def test_half_saturation_identity(self):
        pts = saturation_curve(np.geomspace(0.05, 5.0, 9))
        fit = fit_saturation(pts)
        assert fit.rate_at(fit.p0) == pytest.approx(fit.i_s / 2.0, rel=1e-12)

    def test_order_invariance(self):
        pts = saturation_curve(np.geomspace(0.05, 5.0, 9))
        fit_a = fit_saturation(pts)
        fit_b = fit_saturation(pts[::-1])
        assert fit_a.i_s == pytest.approx(fit_b.i_s, rel=1e-8)
        assert fit_a.p0 == pytest.approx(fit_b.p0, rel=1e-8)

    def test_too_few_powers(self):
        with pytest.raises(ValueError):
            fit_saturation(saturation_curve([0.1, 0.1, 0.1]))


def grid_spec(rotation_deg=0.0, rate=None, background=50.0):
    spec_rate = rate
    if spec_rate is None:
        # peak pixel approximately 4x background
        spec_rate = 4.0 * background * 2.0 * math.pi * 0.2**2 / 0.125**2
    return ScanSpec(
        extent_um=16.0,
        pixel_um=0.125,
        spacing_um=2.0,
        psf_sigma_um=0.2,
        site_rates=spec_rate,
        background=background,
        rotation_deg=rotation_deg,
    )


class TestDetectSpots:
    def test_flat_background_no_spots(self):
        gen = RngSpec(201).generator()
        image = gen.poisson(50.0, (128, 128))
        assert detect_spots(image, min_sep_px=5, snr_threshold=5.0) == []

    def test_single_low_snr_spot(self):
        # peak to background about 4:1
        spec = ScanSpec(8.0, 0.125, 8.0, 0.2, site_rates=3217.0, background=50.0)
        image = synth_scan(spec, RngSpec(202))
        spots = detect_spots(image)
        assert len(spots) == 1
        (cx, cy), intensity = spots[0]
        assert abs(cx - 31.5) <= 1.0 and abs(cy - 31.5) <= 1.0
        assert intensity > 0

    def test_full_grid_recall(self):
        image = synth_scan(grid_spec(), RngSpec(203))
        spots = detect_spots(image)
        assert len(spots) >= 63

    def test_translation_equivariance(self):
        spec = ScanSpec(8.0, 0.125, 8.0, 0.2, site_rates=5000.0, background=30.0)
        image = synth_scan(spec, RngSpec(204))
        shifted = np.roll(image, (7, -5), axis=(0, 1))
        base = detect_spots(image)
        moved = detect_spots(shifted)
        assert len(base) == len(moved) == 1
        (bx, by), _ = base[0]
        (mx, my), _ = moved[0]
        assert mx == pytest.approx(bx - 5.0, abs=1e-9)
        assert my == pytest.approx(by + 7.0, abs=1e-9)

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            detect_spots(np.empty((0, 0)))


def spots_from_lattice(pitch, rotation_deg, n=8, origin=(1.3, 0.9), drop=()):
    theta = math.radians(rotation_deg)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    out = []
    for i in range(n):
        for j in range(n):
            if (i, j) in drop:
                continue
            pos = rot @ (pitch * np.array([i, j])) + origin
            out.append(((float(pos[0]), float(pos[1])), 100.0 + i + j))
    return out


class TestRegisterGrid:
    def test_exact_grid(self):
        transform, records = register_grid(spots_from_lattice(2.0, 0.0), 2.0)
        assert transform.residual_um == pytest.approx(0.0, abs=1e-9)
        assert transform.rotation_deg == pytest.approx(0.0, abs=1e-9)
        assert len(records) == 64

    def test_rotated_grid(self):
        transform, _ = register_grid(spots_from_lattice(2.0, 3.0), 2.0)
        assert transform.rotation_deg == pytest.approx(3.0, abs=0.1)

    def test_missing_spots_still_assign(self):
        drop = {(0, 0), (3, 4), (7, 7), (2, 6), (5, 1), (6, 3)}
        transform, records = register_grid(
            spots_from_lattice(2.0, 1.0, drop=drop), 2.0
        )
        occupied = {r.lattice_index for r in records if r.intensity > 0}
        empty = {r.lattice_index for r in records if r.intensity == 0}
        assert occupied == {
            (i, j) for i in range(8) for j in range(8) if (i, j) not in drop
        }
        assert empty == drop

    def test_residual_invariant_under_relabeling(self):
        spots = spots_from_lattice(2.0, 2.0)
        t_a, _ = register_grid(spots, 2.0)
        t_b, _ = register_grid(spots[::-1], 2.0)
        assert t_a.residual_um == pytest.approx(t_b.residual_um, abs=1e-9)

    def test_collinear_degenerate(self):
        spots = [((2.0 * k, 0.0), 10.0) for k in range(5)]
        transform, _ = register_grid(spots, 2.0)
        assert transform.degenerate
        assert transform.rotation_deg == 0.0

    def test_too_few_spots(self):
        with pytest.raises(ValueError):
            register_grid(spots_from_lattice(2.0, 0.0)[:2], 2.0)


class TestPhotostability:
    def test_poisson_trace_stable(self):
        gen = RngSpec(205).generator()
        trace = gen.poisson(500.0, 10_000)
        report = photostability(trace, bin_ms=100.0)
        assert abs(report["fano"] - 1.0) < 0.05
        assert not report["blinking_flag"]
        assert report["mean_rate"] == pytest.approx(5000.0, rel=0.01)

    def test_telegraph_trace_flags(self):
        # two-state emitter switching every 2 s, rate ratio 1:5, 100 ms bins
        gen = RngSpec(206).generator()
        bins = []
        for segment in range(30):
            mu = 200.0 if segment % 2 == 0 else 1000.0
            bins.extend(gen.poisson(mu, 20))
        report = photostability(np.array(bins), bin_ms=100.0)
        assert report["blinking_flag"]

    def test_short_trace_rejected(self):
        with pytest.raises(ValueError):
            photostability(np.ones(50), 100.0)


class TestIonsPerAperture:
    def test_reference_geometry(self):
        # independent arithmetic: fluence x pi r^2 in cm
        radius_cm = 65.0 / 2.0 * 1e-7
        want = 2.6e11 * math.pi * radius_cm**2
        got = ions_per_aperture(2.6e11, 65.0)
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(8.63, abs=0.05)

    def test_area_scaling(self):
        assert ions_per_aperture(1e11, 130.0) == pytest.approx(
            4.0 * ions_per_aperture(1e11, 65.0), rel=1e-12
        )

    def test_zero_fluence(self):
        assert ions_per_aperture(0.0, 65.0) == 0.0

    def test_interval_ordering(self):
        lo, mid, hi = ions_per_aperture_interval(2.6e11, 65.0, 10.0)
        assert lo < mid < hi
        assert lo == pytest.approx(ions_per_aperture(2.6e11, 55.0))
        assert hi == pytest.approx(ions_per_aperture(2.6e11, 75.0))

    def test_lateral_uncertainty_quadrature(self):
        assert lateral_uncertainty(65.0, 0.0) == pytest.approx(32.5)
        assert lateral_uncertainty(60.0, 40.0) == pytest.approx(50.0)


def sites_with_counts(counts):
    return [
        SiteRecord((k, 0), (0.0, 0.0), float(max(n, 0)), None, int(n))
        for k, n in enumerate(counts)
    ]


class TestYieldReport:
    def test_reference_constants(self):
        # 100 sites averaging 1.61 defects at 8.6 ions per aperture
        counts = [0] * 20 + [1] * 41 + [2] * 16 + [3] * 4 + [4] * 19
        assert len(counts) == 100 and np.mean(counts) == pytest.approx(1.61)
        report = yield_report(sites_with_counts(counts), 8.6)
        assert report.lambda_hat == pytest.approx(1.61)
        assert report.single_fraction == pytest.approx(0.41)
        assert report.conversion_yield == pytest.approx(0.187, abs=0.001)

    def test_all_singles(self):
        report = yield_report(sites_with_counts([1] * 7), 8.6)
        assert report.single_fraction == 1.0
        assert report.lambda_hat == 1.0

    def test_poisson_sample_matches_closed_form(self):
        gen = RngSpec(207).generator()
        counts = gen.poisson(1.61, 10_000)
        report = yield_report(sites_with_counts(counts), 8.63)
        p1 = 1.61 * math.exp(-1.61)
        sigma1 = math.sqrt(p1 * (1 - p1) / 10_000)
        assert abs(report.single_fraction - p1) < 3.0 * sigma1
        p1_trunc = p1 / (1.0 - math.exp(-1.61))
        n_nonzero = int(np.count_nonzero(counts))
        sigma2 = math.sqrt(p1_trunc * (1 - p1_trunc) / n_nonzero)
        assert abs(report.single_fraction_nonzero - p1_trunc) < 3.0 * sigma2
        assert abs(report.ztp_lambda_hat - 1.61) < 0.1

    def test_permutation_invariance(self):
        counts = [0, 1, 1, 2, 5, 1, 0, 3]
        a = yield_report(sites_with_counts(counts), 8.6)
        b = yield_report(sites_with_counts(counts[::-1]), 8.6)
        assert a.lambda_hat == b.lambda_hat
        assert a.single_fraction == b.single_fraction

    def test_conversion_scales_inversely(self):
        counts = [1, 2, 3, 0, 1]
        a = yield_report(sites_with_counts(counts), 4.0)
        b = yield_report(sites_with_counts(counts), 8.0)
        assert a.conversion_yield == pytest.approx(2.0 * b.conversion_yield, rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            yield_report([], 8.6)


class TestDepthStats:
    def test_delta_profile(self):
        table = [(42.0, 1.0), (80.0, 0.0)]
        stats = depth_stats(table)
        assert stats.mean_depth_nm == 42.0
        assert stats.straggle_nm == 0.0

    def test_uniform_profile(self):
        depths = np.arange(0.5, 100.0, 1.0)  # midpoints of [0, 100] in 1 nm cells
        table = np.column_stack([depths, np.ones_like(depths)])
        stats = depth_stats(table)
        assert stats.mean_depth_nm == pytest.approx(50.0, abs=1e-9)
        assert stats.straggle_nm == pytest.approx(100.0 / math.sqrt(12.0), abs=0.01)

    def test_truncated_gaussian_matches_closed_form(self):
        # profile mu=42, sigma=35 truncated at zero depth; oracle from
        # scipy's truncated normal moments
        depths = np.arange(0.5, 250.0, 1.0)
        weights = sps.norm.pdf(depths, 42.0, 35.0)
        stats = depth_stats(np.column_stack([depths, weights]))
        a = (0.0 - 42.0) / 35.0
        oracle = sps.truncnorm(a, np.inf, loc=42.0, scale=35.0)
        assert abs(stats.mean_depth_nm - oracle.mean()) < 0.5
        assert abs(stats.straggle_nm - oracle.std()) < 0.5

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            depth_stats([(1.0, 0.0), (2.0, 0.0)])

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            depth_stats([(42.0, 1.0)])


class TestFileFormats:
    def test_image_csv_round_trip(self, tmp_path, rng):
        image = rng.poisson(100.0, (32, 24))
        write_image_csv(image, tmp_path / "img.csv")
        assert np.array_equal(read_image_csv(tmp_path / "img.csv"), image)

    def test_pgm16_round_trip(self, tmp_path, rng):
        image = rng.poisson(300.0, (16, 20))
        write_pgm16(image, tmp_path / "img.pgm")
        assert np.array_equal(read_pgm16(tmp_path / "img.pgm"), image)

    def test_pgm16_range_check(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm16(np.array([[70000]]), tmp_path / "img.pgm")

    def test_site_table_round_trip(self, tmp_path):
        sites = [
            SiteRecord((0, 1), (1.5, 2.5), 120.0, 0.1, 1),
            SiteRecord((1, 1), (3.5, 2.5), 0.0, None, 0),
        ]
        write_site_table(sites, tmp_path / "sites.json")
        back = read_site_table(tmp_path / "sites.json")
        assert back == sites

    def test_depth_profile_reports_line(self, tmp_path):
        path = tmp_path / "depth.csv"
        path.write_text("depth_nm,weight\n10,0.5\nbad,row\n")
        with pytest.raises(ValueError, match="depth.csv:3"):
            read_depth_profile(path)
