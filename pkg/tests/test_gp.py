import numpy as np
import pytest

from elate.errors import FitFailureError, ParameterError, PoleError
from elate.estimators import ExpectationDatum, RegressionDataset
from elate.gp import (
    FitConfig,
    GpModel,
    KernelParams,
    RationalMean,
    assemble_system,
    condition,
    elate_estimate,
    fit,
    kernel_eval,
    log_marginal_likelihood,
    posterior_predict,
    prior_model,
    rational_mean_eval,
    save_model_summary,
)


def make_dataset(ts, ys, yvars, gys=None, gvars=None, horizon_index=None):
    data = []
    for i, t in enumerate(ts):
        data.append(
            ExpectationDatum(
                t=float(t),
                g_hat=float(ys[i]),
                g_var=float(yvars[i]),
                g_prime_hat=None if gys is None else float(gys[i]),
                g_prime_var=None if gvars is None else float(gvars[i]),
            )
        )
    h = len(data) if horizon_index is None else horizon_index
    return RegressionDataset(data=tuple(data), horizon_index=h)


class TestKernelEval:
    def test_diagonal_value(self):
        k = KernelParams(amplitude=1.7, lengthscale=0.4)
        assert kernel_eval(k, 0.3, 0.3) == pytest.approx(1.7 ** 2)

    def test_first_derivative_vanishes_on_diagonal(self):
        k = KernelParams(amplitude=1.0, lengthscale=0.7)
        assert kernel_eval(k, 0.5, 0.5, (True, False)) == 0.0

    def test_mixed_derivative_hand_value(self):
        k = KernelParams(amplitude=1.0, lengthscale=1.0)
        assert kernel_eval(k, 1.0, 0.0, (True, True)) == pytest.approx(
            -2.0 * np.exp(-1.0)
        )

    def test_derivatives_match_finite_differences(self):
        # spec property: max abs error < 1e-6 over 100 random points
        rng = np.random.default_rng(0)
        k = KernelParams(amplitude=1.3, lengthscale=0.6)
        # 1e-4 balances truncation against roundoff in the mixed difference
        eps = 1e-4
        worst = 0.0
        for _ in range(100):
            t, s = rng.uniform(0, 1, 2)
            d1_fd = (kernel_eval(k, t + eps, s) - kernel_eval(k, t - eps, s)) / (2 * eps)
            d2_fd = (kernel_eval(k, t, s + eps) - kernel_eval(k, t, s - eps)) / (2 * eps)
            d12_fd = (
                kernel_eval(k, t + eps, s + eps)
                - kernel_eval(k, t + eps, s - eps)
                - kernel_eval(k, t - eps, s + eps)
                + kernel_eval(k, t - eps, s - eps)
            ) / (4 * eps ** 2)
            worst = max(
                worst,
                abs(kernel_eval(k, t, s, (True, False)) - d1_fd),
                abs(kernel_eval(k, t, s, (False, True)) - d2_fd),
                abs(kernel_eval(k, t, s, (True, True)) - d12_fd),
            )
        assert worst < 1e-6

    def test_parameter_validation(self):
        with pytest.raises(ParameterError):
            KernelParams(amplitude=0.0, lengthscale=1.0)
        with pytest.raises(ParameterError):
            KernelParams(amplitude=1.0, lengthscale=-2.0)


class TestRationalMean:
    def test_constant(self):
        mean = RationalMean(numerator=(3.5,))
        v, d = rational_mean_eval(mean, 0.7)
        assert v == 3.5 and d == 0.0

    def test_posterior_mean_curve(self):
        # 2t/(1+t): value 1 and slope 1/2 at t=1
        mean = RationalMean(numerator=(0.0, 2.0), denominator=(1.0,))
        v, d = rational_mean_eval(mean, 1.0)
        assert v == pytest.approx(1.0)
        assert d == pytest.approx(0.5)

    def test_pole_raises(self):
        mean = RationalMean(numerator=(1.0,), denominator=(-2.0,))
        with pytest.raises(PoleError):
            rational_mean_eval(mean, 0.5)

    def test_vectorised(self):
        mean = RationalMean(numerator=(0.0, 2.0), denominator=(1.0,))
        ts = np.linspace(0, 1, 11)
        v, d = rational_mean_eval(mean, ts)
        np.testing.assert_allclose(v, 2 * ts / (1 + ts))
        np.testing.assert_allclose(d, 2 / (1 + ts) ** 2)


class TestAssembleSystem:
    def test_single_function_datum(self):
        ds = make_dataset([0.5], [3.0], [0.25])
        k = KernelParams(amplitude=2.0, lengthscale=1.0)
        mean = RationalMean(numerator=(0.0,))
        gram, resid, noise = assemble_system(mean, k, ds.data)
        assert gram.shape == (1, 1)
        assert gram[0, 0] == pytest.approx(4.0)
        assert resid[0] == 3.0
        assert noise[0] == 0.25

    def test_gradient_block_shape(self):
        ds = make_dataset([0.2, 0.8], [1.0, 2.0], [0.1, 0.1], [0.5, 0.5], [0.01, 0.01])
        k = KernelParams(amplitude=1.0, lengthscale=0.5)
        mean = RationalMean(numerator=(0.0,))
        gram, resid, noise = assemble_system(mean, k, ds.data)
        assert gram.shape == (4, 4)
        # diagonal of the derivative block is d1 d2 k at zero lag = 2/l^2
        assert gram[2, 2] == pytest.approx(2.0 / 0.25)
        assert noise.tolist() == [0.1, 0.1, 0.01, 0.01]

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        ts = np.sort(rng.uniform(0, 1, 5))
        ds = make_dataset(ts, rng.normal(size=5), rng.uniform(0.01, 0.1, 5),
                          rng.normal(size=5), rng.uniform(0.01, 0.1, 5))
        k = KernelParams(amplitude=1.4, lengthscale=0.3)
        mean = RationalMean(numerator=(0.1, 0.2), denominator=(0.3,))
        gram, _, _ = assemble_system(mean, k, ds.data)
        assert np.max(np.abs(gram - gram.T)) < 1e-14

    def test_mixed_gradient_presence_uses_function_blocks(self):
        d0 = ExpectationDatum(t=0.1, g_hat=1.0, g_var=0.1, g_prime_hat=0.2, g_prime_var=0.1)
        d1 = ExpectationDatum(t=0.5, g_hat=1.5, g_var=0.1)
        k = KernelParams(amplitude=1.0, lengthscale=0.5)
        mean = RationalMean(numerator=(0.0,))
        gram, resid, noise = assemble_system(mean, k, (d0, d1))
        assert gram.shape == (2, 2)


class TestPosteriorPredict:
    def test_noise_free_interpolation_single_datum(self):
        ds = make_dataset([0.5], [3.0], [0.0])
        model = condition(RationalMean(numerator=(0.0,)), KernelParams(1.0, 0.5), ds)
        m, v = posterior_predict(model, 0.5)
        assert m == pytest.approx(3.0, abs=1e-8)
        assert v == pytest.approx(0.0, abs=1e-8)

    def test_prior_when_no_data(self):
        model = prior_model(RationalMean(numerator=(1.5,)), KernelParams(2.0, 0.5))
        m, v = posterior_predict(model, 0.3)
        assert m == 1.5
        assert v == pytest.approx(4.0)

    def test_far_from_data_returns_prior_variance(self):
        ds = make_dataset([0.0], [1.0], [0.0])
        model = condition(RationalMean(numerator=(0.0,)), KernelParams(1.0, 0.05), ds)
        _, v = posterior_predict(model, 1.0)
        assert v == pytest.approx(1.0, abs=1e-6)

    def test_noise_free_function_and_gradient_interpolation(self):
        # spec property: interpolate values to 1e-8 and derivatives to 1e-6
        curve = lambda t: np.sin(3 * t) + 0.5 * t
        dcurve = lambda t: 3 * np.cos(3 * t) + 0.5
        ts = np.linspace(0.05, 0.95, 6)
        ds = make_dataset(ts, curve(ts), np.zeros(6), dcurve(ts), np.zeros(6))
        model = condition(RationalMean(numerator=(0.0,)), KernelParams(2.0, 0.5), ds)
        m, _ = posterior_predict(model, ts)
        assert np.max(np.abs(m - curve(ts))) < 1e-8
        dm, _ = posterior_predict(model, ts, derivative=True)
        assert np.max(np.abs(dm - dcurve(ts))) < 1e-6

    def test_variance_decreases_with_noise(self):
        # posterior variance at t=1 is nonincreasing when a datum's noise shrinks
        ts = [0.2, 0.5, 0.9]
        ys = [1.0, 1.5, 1.8]
        base = [0.1, 0.1, 0.1]
        k = KernelParams(1.0, 0.5)
        mean = RationalMean(numerator=(0.0,))
        _, v_base = posterior_predict(condition(mean, k, make_dataset(ts, ys, base)), 1.0)
        tighter = [0.1, 0.1, 0.01]
        _, v_tight = posterior_predict(condition(mean, k, make_dataset(ts, ys, tighter)), 1.0)
        assert v_tight <= v_base + 1e-12


class TestLogMarginalLikelihood:
    def test_single_datum_closed_form(self):
        ds = make_dataset([0.3], [2.0], [0.5])
        k = KernelParams(amplitude=1.5, lengthscale=0.7)
        mean = RationalMean(numerator=(0.0,))
        lml = log_marginal_likelihood(mean, k, ds.data)
        total_var = 1.5 ** 2 + 0.5
        assert lml == pytest.approx(-0.5 * np.log(total_var) - 4.0 / (2 * total_var))

    def test_zero_residual_leaves_logdet_only(self):
        ds = make_dataset([0.2, 0.8], [0.0, 0.0], [0.1, 0.2])
        k = KernelParams(amplitude=1.0, lengthscale=0.5)
        mean = RationalMean(numerator=(0.0,))
        gram, _, noise = assemble_system(mean, k, ds.data)
        expected = -0.5 * np.linalg.slogdet(gram + np.diag(noise))[1]
        assert log_marginal_likelihood(mean, k, ds.data) == pytest.approx(expected)

    def test_fit_term_shrinks_with_noise(self):
        ds1 = make_dataset([0.2, 0.8], [1.0, -1.0], [0.1, 0.1])
        ds2 = make_dataset([0.2, 0.8], [1.0, -1.0], [0.2, 0.2])
        k = KernelParams(amplitude=1.0, lengthscale=0.5)
        mean = RationalMean(numerator=(0.0,))

        def fit_term(ds):
            gram, resid, noise = assemble_system(mean, k, ds.data)
            return resid @ np.linalg.solve(gram + np.diag(noise), resid)

        assert fit_term(ds2) < fit_term(ds1)

    def test_matches_brute_force_gaussian_density(self):
        # spec property: agree with explicit determinant + inverse on <= 8x8
        rng = np.random.default_rng(2)
        for trial in range(5):
            n = rng.integers(2, 5)
            ts = np.sort(rng.uniform(0, 1, n))
            ds = make_dataset(
                ts,
                rng.normal(size=n),
                rng.uniform(0.05, 0.2, n),
                rng.normal(size=n),
                rng.uniform(0.05, 0.2, n),
            )
            k = KernelParams(amplitude=1.2, lengthscale=0.6)
            mean = RationalMean(numerator=(0.3, -0.2), denominator=(0.1,))
            gram, resid, noise = assemble_system(mean, k, ds.data)
            a = gram + np.diag(noise)
            brute = -0.5 * np.log(np.linalg.det(a)) - 0.5 * resid @ np.linalg.inv(a) @ resid
            assert log_marginal_likelihood(mean, k, ds.data) == pytest.approx(
                brute, abs=1e-8
            )


class TestFit:
    def test_recovers_rational_generator(self):
        # data generated exactly from a (1,1) rational function, tiny noise
        truth = RationalMean(numerator=(0.5, 2.0), denominator=(1.0,))
        ts = np.linspace(0.0, 1.0, 9)
        ys, _ = rational_mean_eval(truth, ts)
        ds = make_dataset(ts, ys, np.full(9, 1e-12))
        model = fit(ds)
        grid = np.linspace(0, 1, 101)
        pred, _ = posterior_predict(model, grid)
        target, _ = rational_mean_eval(truth, grid)
        assert np.max(np.abs(pred - target)) < 1e-3

    def test_constant_data(self):
        ts = np.linspace(0, 1, 7)
        ds = make_dataset(ts, np.full(7, 5.0), np.full(7, 1e-10))
        model = fit(ds)
        for t in (0.0, 0.33, 1.0):
            m, _ = posterior_predict(model, t)
            assert m == pytest.approx(5.0, abs=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        ts = np.linspace(0, 1, 8)
        ys = 2 * ts / (1 + ts) + rng.normal(0, 0.01, 8)
        ds = make_dataset(ts, ys, np.full(8, 1e-4))
        m1 = fit(ds)
        m2 = fit(ds)
        assert m1.mean == m2.mean
        assert m1.kernel == m2.kernel
        assert m1.objective == m2.objective

    def test_too_few_points(self):
        ds = make_dataset([0.1, 0.5], [1.0, 2.0], [0.1, 0.1])
        with pytest.raises(ParameterError):
            fit(ds)

    def test_rejects_sign_changing_denominators(self):
        # force every candidate into a pole: orders with only denominators
        # and an objective surface that cannot escape the sign change
        ts = np.linspace(0, 1, 5)
        ds = make_dataset(ts, np.ones(5), np.full(5, 0.01))
        cfg = FitConfig(orders=((0, 1),), max_iter=0)

        # craft data so the LS init lands on a sign-changing denominator:
        # y = 1/(1 - 2t) has a pole at t = 0.5
        with np.errstate(divide="ignore"):
            ys = 1.0 / (1.0 - 2.0 * np.array([0.0, 0.2, 0.4, 0.6, 0.8]))
        ds_pole = make_dataset([0.0, 0.2, 0.4, 0.6, 0.8], ys, np.full(5, 1e-8))
        with pytest.raises(FitFailureError):
            fit(ds_pole, cfg)

    def test_gaussian_location_curve_with_gradients(self):
        # synthetic heteroscedastic data around the conjugate-model curve
        rng = np.random.default_rng(5)
        ts = np.linspace(0, 1, 10)
        curve = 2 * ts / (1 + ts)
        dcurve = 2 / (1 + ts) ** 2
        yv = np.full(10, 1e-4)
        gv = np.full(10, 1e-3)
        ds = make_dataset(
            ts,
            curve + rng.normal(0, 1e-2, 10),
            yv,
            dcurve + rng.normal(0, np.sqrt(1e-3), 10),
            gv,
        )
        model = fit(ds)
        m, v = posterior_predict(model, 1.0)
        assert abs(m - 1.0) < 3 * np.sqrt(v) + 0.02


class TestElateEstimate:
    @pytest.fixture(scope="class")
    def gauss_run(self):
        from elate.models import gaussian_location_model
        from elate.smc import SmcConfig, run_waste_free_smc

        # several observations give an informative likelihood and a ladder
        # with enough temperatures for extrapolation tests
        data = [2.0, 1.6, 2.4, 1.9, 2.1, 2.3, 1.8, 2.2]
        model, oracle = gaussian_location_model(0.0, 1.0, 1.0, data)
        cfg = SmcConfig(M=50, P=100, ladder=("adaptive", 0.8), seed=11)
        return run_waste_free_smc(model, cfg), oracle

    def test_smoothing_close_to_truth(self, gauss_run):
        run, oracle = gauss_run
        truth = oracle.g_exact("coordinate", 1.0)
        point, var = elate_estimate(run, lambda x: x[:, 0], source="smc", horizon=1.0)
        assert abs(point - truth) < 3 * np.sqrt(var) + 0.02

    def test_extrapolation_has_larger_variance(self, gauss_run):
        run, _ = gauss_run
        f = lambda x: x[:, 0]
        _, var_smooth = elate_estimate(run, f, horizon=1.0)
        _, var_extrap = elate_estimate(run, f, horizon=0.6)
        assert var_extrap > var_smooth

    def test_model_summary_dump(self, gauss_run, tmp_path):
        from elate.estimators import build_dataset

        run, _ = gauss_run
        ds = build_dataset(run, lambda x: x[:, 0], source="smc")
        model = fit(ds)
        path = tmp_path / "model.txt"
        save_model_summary(model, path)
        text = path.read_text()
        assert "orders_r" in text and "predict_mean_at_1" in text
