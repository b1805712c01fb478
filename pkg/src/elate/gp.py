"""Gaussian-process regression over inverse temperature.

The regression model is a GP with a rational prior mean (ratio of low-order
polynomials, the shape taken by tempered moments of conjugate Gaussian
models) and a squared-exponential covariance

    k(t, t') = amplitude^2 * exp(-(t - t')^2 / lengthscale^2),

whose sample paths are analytic, matching the regularity of the curves being
fitted.  Training data are heteroscedastic: every observation of the curve
and (optionally) of its derivative carries its own noise variance, taken
from the sampler's variance estimates.  Derivative observations enter
through the kernel's partial derivatives, giving a joint Gram matrix with
function and derivative blocks.

Hyperparameters (rational-mean coefficients, amplitude, lengthscale) and the
polynomial orders are selected jointly by maximising the marginal likelihood
penalised against denominator poles on [0, 1]; candidates whose fitted
denominator changes sign on [0, 1] are rejected outright.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    ConditioningError,
    FitFailureError,
    ParameterError,
    PoleError,
)
from .estimators import RegressionDataset, build_dataset

__all__ = [
    "KernelParams",
    "RationalMean",
    "FitConfig",
    "GpModel",
    "kernel_eval",
    "rational_mean_eval",
    "assemble_system",
    "log_marginal_likelihood",
    "posterior_predict",
    "condition",
    "prior_model",
    "fit",
    "elate_estimate",
    "save_model_summary",
]

_POLE_TOL = 1e-12


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel parameters, both strictly positive."""

    amplitude: float
    lengthscale: float

    def __post_init__(self):
        if self.amplitude <= 0 or self.lengthscale <= 0:
            raise ParameterError("kernel parameters must be positive")


@dataclass(frozen=True)
class RationalMean:
    """Rational prior mean with numerator a_0..a_r and denominator 1 + b_1 t + ...

    The leading denominator coefficient is fixed to one, removing the scale
    gauge of the parametrisation.
    """

    numerator: Tuple[float, ...]
    denominator: Tuple[float, ...] = ()

    @property
    def orders(self):
        return len(self.numerator) - 1, len(self.denominator)

    def denominator_values(self, t):
        t = np.asarray(t, float)
        q = np.ones_like(t)
        for j, b in enumerate(self.denominator, start=1):
            q = q + b * t ** j
        return q


def kernel_eval(params, t, t2, derivative_flags=(False, False)):
    """Kernel or kernel-derivative value between t and t2.

    ``derivative_flags`` = (d1, d2) requests differentiation with respect to
    the first and/or second argument; broadcasting over array inputs.
    """
    lam2 = params.amplitude ** 2
    ell2 = params.lengthscale ** 2
    u = np.asarray(t, float) - np.asarray(t2, float)
    e = lam2 * np.exp(-(u ** 2) / ell2)
    d1, d2 = derivative_flags
    if not d1 and not d2:
        return e
    if d1 and not d2:
        return -2.0 * u / ell2 * e
    if d2 and not d1:
        return 2.0 * u / ell2 * e
    return (2.0 / ell2 - 4.0 * u ** 2 / ell2 ** 2) * e


def _horner_with_derivative(coeffs, t):
    """Polynomial value and derivative at t for ascending coefficients."""
    v = np.zeros_like(t)
    d = np.zeros_like(t)
    for c in coeffs[::-1]:
        d = d * t + v
        v = v * t + c
    return v, d


def rational_mean_eval(mean, t):
    """(value, derivative) of the rational mean at t (scalar or array).

    Raises a pole error when the denominator magnitude falls below 1e-12
    anywhere in the evaluation.
    """
    t = np.asarray(t, float)
    p, dp = _horner_with_derivative(tuple(mean.numerator), t)
    q, dq = _horner_with_derivative((1.0,) + tuple(mean.denominator), t)
    if np.any(np.abs(q) < _POLE_TOL):
        raise PoleError("rational mean denominator vanishes at evaluation point")
    value = p / q
    deriv = (dp * q - p * dq) / q ** 2
    return value, deriv


def _slice_arrays(dataset_slice):
    ts = np.array([d.t for d in dataset_slice])
    y = np.array([d.g_hat for d in dataset_slice])
    noise = np.array([d.g_var for d in dataset_slice])
    use_grad = all(d.has_gradient for d in dataset_slice)
    if use_grad:
        y = np.concatenate([y, [d.g_prime_hat for d in dataset_slice]])
        noise = np.concatenate([noise, [d.g_prime_var for d in dataset_slice]])
    return ts, y, noise, use_grad


def _joint_gram(kernel, ts, use_grad):
    ell2 = kernel.lengthscale ** 2
    u = ts[:, None] - ts[None, :]
    e = kernel.amplitude ** 2 * np.exp(-(u ** 2) / ell2)
    if not use_grad:
        return e
    h = ts.size
    k12 = 2.0 * u / ell2 * e
    out = np.empty((2 * h, 2 * h))
    out[:h, :h] = e
    out[:h, h:] = k12
    out[h:, :h] = -k12
    out[h:, h:] = (2.0 / ell2 - 4.0 * u ** 2 / ell2 ** 2) * e
    return out


def _assemble_arrays(mean, kernel, ts, y, noise, use_grad):
    gram = _joint_gram(kernel, ts, use_grad)
    m, dm = rational_mean_eval(mean, ts)
    prior = np.concatenate([m, dm]) if use_grad else m
    resid = y - prior
    if not (
        np.isfinite(gram).all() and np.isfinite(resid).all() and np.isfinite(noise).all()
    ):
        raise ParameterError("non-finite entries in assembled system")
    return gram, resid, noise


def assemble_system(mean, kernel, dataset_slice):
    """(joint Gram, residual y - mean, noise diagonal) for a data slice.

    Function blocks come first, derivative blocks second.  If any datum lacks
    gradients the system is assembled from function blocks only.
    """
    if len(dataset_slice) == 0:
        raise ParameterError("empty data slice")
    ts, y, noise, use_grad = _slice_arrays(dataset_slice)
    return _assemble_arrays(mean, kernel, ts, y, noise, use_grad)


def _factorize(gram, noise):
    """Cholesky of gram + diag(noise), escalating jitter relative to trace."""
    a = gram + np.diag(noise)
    tr = float(a.diagonal().sum())
    scale = tr if tr > 0 else 1.0
    eye = np.eye(a.shape[0])
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            return cho_factor(a + jitter * scale * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("Gram matrix not positive definite after jitter escalation")


def _lml_core(mean, kernel, ts, y, noise, use_grad):
    gram, resid, noise = _assemble_arrays(mean, kernel, ts, y, noise, use_grad)
    factor = _factorize(gram, noise)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quad = float(resid @ cho_solve(factor, resid))
    return -0.5 * logdet - 0.5 * quad


def log_marginal_likelihood(mean, kernel, dataset_slice):
    """Gaussian log marginal likelihood up to an additive constant."""
    ts, y, noise, use_grad = _slice_arrays(dataset_slice)
    return _lml_core(mean, kernel, ts, y, noise, use_grad)


@dataclass(frozen=True)
class GpModel:
    """Fitted regression model with its cached factorisation."""

    mean: RationalMean
    kernel: KernelParams
    dataset: RegressionDataset
    train_ts: np.ndarray
    use_gradients: bool
    objective: float
    _factor: Tuple = None
    _alpha: np.ndarray = None

    @property
    def orders(self):
        return self.mean.orders

    def solve(self, v):
        return cho_solve(self._factor, v)

    def cross_vector(self, t, derivative=False):
        """Covariance vector between a query (or its derivative) and the data."""
        t = np.asarray(t, float)
        q1 = kernel_eval(self.kernel, t[..., None], self.train_ts, (derivative, False))
        if not self.use_gradients:
            return q1
        q2 = kernel_eval(self.kernel, t[..., None], self.train_ts, (derivative, True))
        return np.concatenate([q1, q2], axis=-1)


def condition(mean, kernel, dataset, objective=float("nan")):
    """GP conditioned on the dataset's in-horizon slice with fixed parameters."""
    train_slice = dataset.in_horizon()
    if len(train_slice) == 0:
        return prior_model(mean, kernel, dataset)
    ts, _, _, use_grad = _slice_arrays(train_slice)
    gram, resid, noise = assemble_system(mean, kernel, train_slice)
    factor = _factorize(gram, noise)
    alpha = cho_solve(factor, resid)
    return GpModel(
        mean=mean,
        kernel=kernel,
        dataset=dataset,
        train_ts=ts,
        use_gradients=use_grad,
        objective=objective,
        _factor=factor,
        _alpha=alpha,
    )


def prior_model(mean, kernel, dataset=None):
    """Unconditioned GP; predictions return the prior mean and variance."""
    dataset = dataset if dataset is not None else RegressionDataset(data=(), horizon_index=0)
    return GpModel(
        mean=mean,
        kernel=kernel,
        dataset=dataset,
        train_ts=np.array([]),
        use_gradients=False,
        objective=float("nan"),
    )


def posterior_predict(model, t, derivative=False):
    """(posterior mean, posterior variance) at query points t.

    With ``derivative=True`` the prediction targets the curve's derivative.
    Variances are clamped at zero against round-off.
    """
    t = np.asarray(t, float)
    scalar = t.ndim == 0
    tq = np.atleast_1d(t)
    m, dm = rational_mean_eval(model.mean, tq)
    prior_mean = dm if derivative else m
    if derivative:
        prior_var = kernel_eval(model.kernel, tq, tq, (True, True))
    else:
        prior_var = kernel_eval(model.kernel, tq, tq)
    if model.train_ts.size == 0:
        out_mean, out_var = prior_mean, prior_var
    else:
        q = model.cross_vector(tq, derivative=derivative)
        out_mean = prior_mean + q @ model._alpha
        out_var = np.maximum(prior_var - np.sum(q * model.solve(q.T).T, axis=-1), 0.0)
    if scalar:
        return float(out_mean[0]), float(out_var[0])
    return out_mean, out_var


# ---------------------------------------------------------------------------
# Fitting


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameter search settings.

    ``orders`` enumerates the (numerator, denominator) degree candidates;
    the penalty discourages denominator zeros on [0, 1] through the integral
    of the inverse squared denominator.
    """

    orders: Tuple[Tuple[int, int], ...] = ((1, 1), (1, 2), (2, 1), (2, 2))
    pole_penalty_coef: float = 1e-4
    penalty_intervals: int = 256
    sign_check_points: int = 512
    init_lengthscale: float = 0.5
    # lengthscales beyond the domain width are unidentifiable (the marginal
    # likelihood is flat in that direction) and degenerate: with an exact
    # t=0 observation they propagate near-zero variance across all of [0,1]
    max_lengthscale: float = 2.0
    ls_rounds: int = 20
    max_iter: int = 500
    fd_step: float = 1e-6


def _simpson_uniform(values, h):
    n = values.shape[0] - 1
    return (h / 3.0) * (
        values[0] + values[-1] + 4.0 * values[1:-1:2].sum() + 2.0 * values[2:-1:2].sum()
    )


def _penalty_from_denominator(q, h):
    with np.errstate(divide="ignore", over="ignore"):
        vals = 1.0 / q ** 2
    if not np.isfinite(vals).all():
        return np.inf
    return float(_simpson_uniform(vals, h))


def _pole_penalty(mean, config):
    ts = np.linspace(0.0, 1.0, config.penalty_intervals + 1)
    return _penalty_from_denominator(mean.denominator_values(ts), ts[1] - ts[0])


def _weighted_ls_init(ts, ys, weights, r, s, rounds):
    """Alternating weighted least squares for the rational mean coefficients."""
    sw = np.sqrt(weights)
    b = np.zeros(s)
    a = np.zeros(r + 1)
    tpow = np.vander(ts, r + 1, increasing=True)
    tpow_den = np.vander(ts, s + 1, increasing=True)[:, 1:] if s else None
    for _ in range(rounds):
        q = 1.0 + (tpow_den @ b if s else 0.0)
        q = np.where(np.abs(q) < 1e-8, 1e-8, q)
        design = tpow / q[:, None]
        a, *_ = np.linalg.lstsq(design * sw[:, None], ys * sw, rcond=None)
        if not s:
            break
        p = tpow @ a
        target = p - ys
        design_b = ys[:, None] * tpow_den
        b, *_ = np.linalg.lstsq(design_b * sw[:, None], target * sw, rcond=None)
    return a, b


def _denominator_sign_ok(mean, n_points):
    q = mean.denominator_values(np.linspace(0.0, 1.0, n_points))
    return bool(np.all(q > 0) or np.all(q < 0))


def _objective_factory(ts, y, noise, use_grad, r, s, config):
    grid = np.linspace(0.0, 1.0, config.penalty_intervals + 1)
    grid_step = grid[1] - grid[0]
    # denominator values on the penalty grid are 1 + grid_powers @ b
    grid_powers = np.vander(grid, s + 1, increasing=True)[:, 1:] if s else None

    def objective(x):
        # fence the log-hyperparameters; beyond e^(+-15) the kernel is
        # numerically degenerate and exp() would under/overflow
        if abs(x[-2]) > 15.0 or abs(x[-1]) > 15.0:
            return -np.inf
        a = tuple(x[: r + 1])
        b = x[r + 1 : r + 1 + s]
        mean = RationalMean(numerator=a, denominator=tuple(b))
        kernel = KernelParams(amplitude=math.exp(x[-2]), lengthscale=math.exp(x[-1]))
        if s:
            penalty = _penalty_from_denominator(1.0 + grid_powers @ b, grid_step)
            if not np.isfinite(penalty):
                return -np.inf
        else:
            penalty = 1.0  # integral of the unit denominator
        try:
            lml = _lml_core(mean, kernel, ts, y, noise, use_grad)
        except (PoleError, ConditioningError, ParameterError):
            return -np.inf
        if not np.isfinite(lml):
            return -np.inf
        return lml - config.pole_penalty_coef * penalty

    return objective


def _ascend(objective, x0, config, log_amp_lo=-15.0, log_ls_hi=15.0):
    """Maximise the objective by quasi-Newton ascent.

    Gradients are central finite differences; the two trailing log-space
    kernel parameters are box-bounded to keep exp() well-defined.  Plain
    steepest ascent stalls badly on this objective (the marginal likelihood
    is far more sensitive to the kernel parameters than to the mean
    coefficients), so the line-search is driven by L-BFGS curvature updates.
    """
    from scipy.optimize import minimize

    x0 = np.asarray(x0, float)

    def neg(x):
        v = objective(x)
        return -v if np.isfinite(v) else 1e10

    bounds = [(None, None)] * (x0.size - 2) + [(log_amp_lo, 15.0), (-15.0, log_ls_hi)]
    res = minimize(
        neg,
        x0,
        method="L-BFGS-B",
        jac="3-point",
        bounds=bounds,
        options={
            "maxiter": config.max_iter,
            "ftol": 1e-12,
            "gtol": 1e-8,
            "eps": config.fd_step,
        },
    )
    x_best, f_best = res.x, -res.fun
    f0 = objective(x0)
    if np.isfinite(f0) and f0 > f_best:
        return x0, f0
    return x_best, f_best


def fit(dataset, config=None):
    """Select orders and hyperparameters by penalised marginal likelihood.

    For each candidate order pair the rational-mean coefficients are
    initialised by alternating weighted least squares on the function values,
    the kernel amplitude by the residual spread, and the penalised marginal
    likelihood is maximised by finite-difference gradient ascent.  Candidates
    whose fitted denominator changes sign on [0, 1] are discarded; if all
    candidates are discarded a fit failure is raised.
    """
    config = config or FitConfig()
    train_slice = dataset.in_horizon()
    if len(train_slice) < 3:
        raise ParameterError("need at least 3 in-horizon observations")
    ts, y_all, noise_all, use_grad = _slice_arrays(train_slice)
    ys = y_all[: ts.size]
    noise = noise_all[: ts.size]
    weights = 1.0 / np.maximum(noise, 1e-12)
    # The amplitude is floored at the typical observation noise: when the
    # rational mean family contains the underlying curve, the marginal
    # likelihood drives the amplitude to zero and the plug-in predictive
    # variance collapses, claiming more certainty than the noisy data carry.
    amp_lo = max(math.sqrt(float(np.median(noise))), 1e-8)
    log_amp_lo = math.log(amp_lo)
    gys = y_all[ts.size :] if use_grad else None

    best = None
    for r, s in config.orders:
        a, b = _weighted_ls_init(ts, ys, weights, r, s, config.ls_rounds)
        mean0 = RationalMean(numerator=tuple(a), denominator=tuple(b))
        try:
            m0, dm0 = rational_mean_eval(mean0, ts)
            resid = ys - m0
            if use_grad:
                # residuals of the full observation vector; function-only
                # residuals can vanish identically when the mean has enough
                # coefficients to interpolate, which would start the kernel
                # amplitude dead and strand the optimiser there
                resid = np.concatenate([resid, gys - dm0])
        except PoleError:
            resid = ys - ys.mean()
        amp0 = max(float(np.std(resid)), amp_lo)
        x0 = np.concatenate(
            [a, b, [math.log(amp0), math.log(config.init_lengthscale)]]
        )
        objective = _objective_factory(ts, y_all, noise_all, use_grad, r, s, config)
        x_opt, f_opt = _ascend(
            objective,
            x0,
            config,
            log_amp_lo=log_amp_lo,
            log_ls_hi=math.log(config.max_lengthscale),
        )
        if not np.isfinite(f_opt):
            continue
        mean = RationalMean(
            numerator=tuple(x_opt[: r + 1]),
            denominator=tuple(x_opt[r + 1 : r + 1 + s]),
        )
        if not _denominator_sign_ok(mean, config.sign_check_points):
            continue
        kernel = KernelParams(
            amplitude=math.exp(x_opt[-2]), lengthscale=math.exp(x_opt[-1])
        )
        if best is None or f_opt > best[0]:
            best = (f_opt, mean, kernel)
    if best is None:
        raise FitFailureError("all rational-mean candidates were rejected")
    f_opt, mean, kernel = best
    return condition(mean, kernel, dataset, objective=f_opt)


def elate_estimate(
    run,
    f,
    source="smc",
    horizon=1.0,
    with_gradients=True,
    B=100,
    rng=None,
    fit_config=None,
):
    """Posterior-expectation estimate by regression over inverse temperature.

    Builds the per-temperature dataset from the run, fits the GP, and
    returns the predictive (mean, variance) at t = 1.
    """
    dataset = build_dataset(
        run, f, source=source, horizon=horizon, with_gradients=with_gradients,
        B=B, rng=rng,
    )
    model = fit(dataset, fit_config)
    return posterior_predict(model, 1.0)


def save_model_summary(model, path):
    """Dump the fitted model parameters and its t=1 prediction to text."""
    pred_mean, pred_var = posterior_predict(model, 1.0)
    r, s = model.orders
    lines = [
        f"orders_r = {r}",
        f"orders_s = {s}",
        "numerator = " + " ".join(f"{c:.17g}" for c in model.mean.numerator),
        "denominator = " + " ".join(f"{c:.17g}" for c in model.mean.denominator),
        f"amplitude = {model.kernel.amplitude:.17g}",
        f"lengthscale = {model.kernel.lengthscale:.17g}",
        f"horizon_index = {model.dataset.horizon_index}",
        f"n_data = {len(model.dataset)}",
        f"objective = {model.objective:.17g}",
        f"predict_mean_at_1 = {pred_mean:.17g}",
        f"predict_sd_at_1 = {math.sqrt(pred_var):.17g}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
