import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defect_foundry import numfit
from defect_foundry.core import RngSpec
from defect_foundry.hbt import g2_model
from defect_foundry.numfit import (
    ModelSpec,
    finite_diff_jacobian,
    fit_nlls,
    lorentzian_model,
    poisson_histogram_model,
    poisson_mle,
    ztp_conditional_mean,
    ztp_mle,
)
from defect_foundry.scanstats import saturation_model


def linear_model():
    return ModelSpec("line", ("a",), lambda p, x: p[0] * x)


class TestFitNlls:
    def test_exact_line(self):
        result = fit_nlls(linear_model(), [1.0], [1.0, 2.0], [2.0, 4.0])
        assert result.converged
        assert result.params["a"] == pytest.approx(2.0, abs=1e-12)
        assert result.residual_norm == pytest.approx(0.0, abs=1e-20)
        assert result.iterations >= 1

    def test_lorentzian_center_recovery(self):
        # forward-generate a clean line at 68.4 MHz, fit from a shifted start
        model = lorentzian_model()
        truth = np.array([0.01, 68.4, 8.0, 0.001])
        xs = np.linspace(40.0, 100.0, 121)
        ys = model.eval(truth, xs)
        result = fit_nlls(model, [0.008, 66.0, 10.0, 0.0], xs, ys)
        assert result.converged
        assert abs(result.params["f0"] - 68.4) < 1e-6

    def test_g2_parameter_recovery(self):
        model = g2_model()
        truth = np.array([0.5, 5.2, 89.1])
        taus = np.linspace(-500.0, 500.0, 2001)
        ys = model.eval(truth, taus)
        result = fit_nlls(model, truth * 1.15, taus, ys)
        assert result.converged
        for name, want in zip(model.param_names, truth):
            assert abs(result.params[name] / want - 1.0) < 1e-6

    @pytest.mark.parametrize(
        "model_factory,truth",
        [
            (lorentzian_model, np.array([0.01, 68.4, 8.0, 0.002])),
            (saturation_model, np.array([7400.0, 0.43])),
            (g2_model, np.array([0.5, 5.2, 89.1])),
        ],
    )
    def test_noiseless_recovery_from_perturbed_starts(self, model_factory, truth):
        # All parameters start up to 20% off.  The Lorentzian center is a
        # location parameter, so its 20% is taken on the linewidth scale;
        # a 20%-of-68-MHz shift leaves the convergence basin of any local
        # fitter (global search is out of scope).
        model = model_factory()
        if model.name == "saturation":
            xs = np.geomspace(0.04, 6.0, 24)
        elif model.name == "lorentzian":
            xs = np.linspace(40.0, 100.0, 181)
        else:
            xs = np.linspace(-450.0, 450.0, 1801)
        ys = model.eval(truth, xs)
        gen = RngSpec(5150).generator()
        for _ in range(10):
            u = 0.2 * (2.0 * gen.random(truth.size) - 1.0)
            start = truth * (1.0 + u)
            if model.name == "lorentzian":
                start[1] = truth[1] + u[1] * truth[2]
            result = fit_nlls(model, start, xs, ys)
            assert result.converged
            for name, want in zip(model.param_names, truth):
                assert abs(result.params[name] / want - 1.0) < 1e-6, model.name

    def test_unidentifiable_parameter_gets_zero_stderr(self):
        # second parameter never enters the model: singular JtJ handled via pinv
        model = ModelSpec("degenerate", ("a", "ghost"), lambda p, x: p[0] * x)
        result = fit_nlls(model, [1.0, 1.0], [1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
        assert result.params["a"] == pytest.approx(2.0, abs=1e-10)
        assert result.stderr["ghost"] == 0.0

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_nan_at_start_rejected(self):
        model = ModelSpec("bad", ("a",), lambda p, x: np.log(x - p[0]))
        with pytest.raises(ValueError, match="not finite"):
            fit_nlls(model, [5.0], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0])

    def test_bounds_projection(self):
        model = ModelSpec(
            "bounded", ("a",), lambda p, x: p[0] * x, bounds=((0.0, 1.5),)
        )
        result = fit_nlls(model, [1.0], [1.0, 2.0], [4.0, 8.0])
        assert result.params["a"] == pytest.approx(1.5)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            fit_nlls(lorentzian_model(), [1, 68, 8, 0], [1.0, 2.0], [0.0, 0.0])

    def test_weights_change_optimum(self):
        model = linear_model()
        xs = np.array([1.0, 1.0])
        ys = np.array([1.0, 3.0])
        unweighted = fit_nlls(model, [1.0], xs, ys)
        weighted = fit_nlls(model, [1.0], xs, ys, sigmas=[1.0, 100.0])
        assert unweighted.params["a"] == pytest.approx(2.0, abs=1e-9)
        assert weighted.params["a"] == pytest.approx(1.0, abs=1e-3)


class TestJacobian:
    @pytest.mark.parametrize(
        "model_factory,params",
        [
            (lorentzian_model, np.array([0.011, 68.4, 8.0, 0.002])),
            (saturation_model, np.array([7400.0, 0.43])),
            (g2_model, np.array([0.5, 5.2, 89.1])),
        ],
    )
    def test_finite_diff_matches_analytic(self, model_factory, params):
        model = model_factory()
        gen = RngSpec(777).generator()
        xs = {
            "lorentzian": 40.0 + 60.0 * gen.random(40),
            "saturation": 0.05 + 6.0 * gen.random(40),
            "g2_three_level": -400.0 + 800.0 * gen.random(40),
        }[model.name]
        numeric = finite_diff_jacobian(model, params, xs)
        analytic = model.jac(params, xs)
        # 1e-5 relative, with a per-column absolute floor: central
        # differences carry an eps/h noise floor that dominates entries
        # whose true derivative has underflowed (far exponential tails)
        col_scale = np.abs(analytic).max(axis=0, keepdims=True)
        assert np.all(
            np.abs(numeric - analytic) <= 1e-5 * (np.abs(analytic) + col_scale)
        )


class TestPoissonMle:
    def test_constant_sample(self):
        fit = poisson_mle([2, 2, 2, 2])
        assert fit.lambda_hat == 2.0
        assert not fit.truncated

    def test_all_zero_degenerate(self):
        fit = poisson_mle([0, 0, 0])
        assert fit.lambda_hat == 0.0
        assert fit.degenerate

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            poisson_mle([])

    def test_seeded_draws_recover_mean(self):
        gen = RngSpec(161).generator()
        counts = gen.poisson(1.61, 100_000)
        fit = poisson_mle(counts)
        assert fit.stderr == pytest.approx(math.sqrt(fit.lambda_hat / 100_000))
        assert abs(fit.lambda_hat - 1.61) <= 3.0 * math.sqrt(1.61 / 100_000)

    @given(st.lists(st.integers(0, 40), min_size=1, max_size=200))
    def test_mle_is_sample_mean(self, counts):
        assert poisson_mle(counts).lambda_hat == pytest.approx(np.mean(counts))


class TestZtp:
    def test_forward_mean_value(self):
        # lambda = 1.61 -> conditional mean 1.61 / (1 - e^-1.61)
        want = 1.61 / (1.0 - math.exp(-1.61))
        assert want == pytest.approx(2.0122, abs=1e-4)
        assert ztp_conditional_mean(1.61) == pytest.approx(want, abs=1e-12)

    def test_newton_inverts_forward(self):
        lam = numfit.ztp_lambda_from_mean(ztp_conditional_mean(1.61))
        assert abs(lam - 1.61) < 1e-9

    @given(st.floats(0.1, 50.0))
    def test_inverse_identity_on_lambda_range(self, lam):
        back = numfit.ztp_lambda_from_mean(ztp_conditional_mean(lam))
        assert abs(back - lam) < 1e-9 * max(1.0, lam)

    def test_large_mean_truncation_negligible(self):
        fit = ztp_mle([49, 51, 50, 50])
        assert abs(fit.lambda_hat - 50.0) < 1e-9
        assert fit.truncated

    def test_mean_one_rejected(self):
        with pytest.raises(ValueError, match="<= 1"):
            ztp_mle([1, 1, 1])

    def test_noninteger_rejected(self):
        with pytest.raises(ValueError):
            ztp_mle([1.5, 2.0])

    def test_seeded_truncated_sample(self):
        gen = RngSpec(4040).generator()
        draws = gen.poisson(1.61, 50_000)
        fit = ztp_mle(draws[draws > 0])
        assert abs(fit.lambda_hat - 1.61) <= 3.0 * fit.stderr


class TestLorentzianModel:
    def test_peak_value(self):
        model = lorentzian_model()
        p = np.array([0.02, 68.4, 8.0, 0.001])
        assert model.eval(p, np.array([68.4]))[0] == pytest.approx(0.021)

    def test_half_width(self):
        model = lorentzian_model()
        p = np.array([0.02, 68.4, 8.0, 0.001])
        ys = model.eval(p, np.array([68.4 - 4.0, 68.4 + 4.0]))
        assert np.allclose(ys, 0.001 + 0.01)

    def test_zero_amplitude_constant(self):
        model = lorentzian_model()
        p = np.array([0.0, 68.4, 8.0, 0.37])
        xs = np.linspace(0.0, 200.0, 17)
        assert np.allclose(model.eval(p, xs), 0.37)


class TestPoissonHistogramModel:
    def test_least_squares_path_matches_mle(self):
        # the bar-height fit is exposed as an alternative to the MLE
        gen = RngSpec(99).generator()
        counts = gen.poisson(1.61, 20_000)
        ks = np.arange(0, counts.max() + 1)
        heights = np.bincount(counts).astype(float)
        model = poisson_histogram_model()
        result = fit_nlls(model, [1.0, counts.size], ks.astype(float), heights)
        assert result.converged
        mle = poisson_mle(counts)
        assert result.params["lam"] == pytest.approx(mle.lambda_hat, rel=0.05)
