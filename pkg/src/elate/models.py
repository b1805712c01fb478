"""Tempered-posterior target models.

A target model bundles the prior (density and exact sampler), the
log-likelihood and the support of a Bayesian inference problem.  The tempered
family interpolates between prior (t=0) and posterior (t=1) by raising the
likelihood to the power t.

All densities are vectorised: ``log_prior`` and ``log_lik`` accept a single
point of shape ``(d,)`` or a batch of shape ``(n, d)`` and return a scalar or
a length-n array accordingly.  ``sample_prior(rng, n)`` returns an ``(n, d)``
array of exact prior draws.

Four ready-made models are provided:

* :func:`gaussian_location_model` -- conjugate 1-d Gaussian, fully tractable;
* :func:`gaussian_mixture_model` -- 2-d nine-component mixture likelihood
  under a wide Gaussian prior, with a closed-form posterior;
* :func:`mrna_model` -- 4-parameter transfection dynamics with uniform
  priors and synthetic data;
* :func:`logistic_model` -- Bayesian logistic regression with standardised
  predictors (use :func:`load_label_csv` for sonar-style files).

The first two also return an :class:`OracleSpec` with exact (or
high-accuracy quadrature) tempered expectations and normalising constants,
used as ground truth in tests and experiment tables.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_expit, logsumexp
from scipy.stats import norm

from .errors import DataError, ParameterError

__all__ = [
    "Box",
    "TargetModel",
    "OracleSpec",
    "gaussian_location_model",
    "gaussian_mixture_model",
    "mrna_model",
    "mrna_mean",
    "logistic_model",
    "load_label_csv",
    "log_tempered_unnormalized",
    "build_model",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box support; ``lower``/``upper`` have shape ``(d,)``."""

    lower: np.ndarray
    upper: np.ndarray

    def contains(self, x):
        x = np.asarray(x, float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


@dataclass(frozen=True)
class TargetModel:
    """Prior, likelihood and support defining a tempered family.

    Attributes
    ----------
    dim: int
        Dimension d of the parameter space.
    log_prior: callable
        Log prior density; -inf outside the support.
    sample_prior: callable ``(rng, n) -> (n, d) array``
        Exact prior sampler; draws always lie inside the support.
    log_lik: callable
        Log-likelihood, finite on the support.
    support: Box or None
        None means unbounded support.
    model_id: str
        Stable identifier used in run metadata and result tables.
    params: dict
        Constructor parameters, for persistence.
    """

    dim: int
    log_prior: Callable
    sample_prior: Callable
    log_lik: Callable
    support: Optional[Box]
    model_id: str = "custom"
    params: dict = field(default_factory=dict)

    def in_support(self, x):
        if self.support is None:
            x = np.asarray(x, float)
            return np.ones(x.shape[:-1], dtype=bool)
        return self.support.contains(x)


@dataclass(frozen=True)
class OracleSpec:
    """Ground-truth access for a model, when available.

    ``g_exact(f_id, t)`` returns the exact tempered expectation of the test
    function named by ``f_id`` (e.g. ``"coordinate"``, ``"coordinate_squared"``);
    ``log_z_exact(t)`` the exact log normalising constant.  ``kind`` is one of
    ``"closed_form"``, ``"grid_quadrature"`` or ``"none"``.
    """

    kind: str = "none"
    g_exact: Optional[Callable] = None
    log_z_exact: Optional[Callable] = None


def _as_batch(x):
    """View x as (n, d); also report whether the input was a single point."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _unbatch(values, single):
    return float(values[0]) if single else values


# ---------------------------------------------------------------------------
# Gaussian location model


def gaussian_location_model(mu0, sigma0, sigma, data):
    """Conjugate Gaussian model: iid N(x, sigma^2) data, N(mu0, sigma0^2) prior.

    Every tempered distribution is Gaussian, so tempered moments and
    normalising constants are available in closed form and the returned
    oracle serves as exact ground truth.

    Parameters
    ----------
    mu0, sigma0: float
        Prior mean and standard deviation (sigma0 > 0).
    sigma: float
        Known observation noise standard deviation (> 0).
    data: sequence of float
        Observations y_1..y_n, nonempty.

    Returns
    -------
    (TargetModel, OracleSpec)
    """
    if sigma0 <= 0 or sigma <= 0:
        raise ParameterError("sigma0 and sigma must be positive")
    data = np.asarray(data, float)
    if data.size == 0:
        raise ParameterError("data must be nonempty")
    n, ybar = data.size, float(data.mean())
    ss = float(np.sum((data - ybar) ** 2))

    def log_prior(x):
        xb, single = _as_batch(x)
        return _unbatch(norm.logpdf(xb[:, 0], mu0, sigma0), single)

    def sample_prior(rng, size=1):
        return rng.normal(mu0, sigma0, size=(size, 1))

    def log_lik(x):
        xb, single = _as_batch(x)
        ll = np.sum(norm.logpdf(data[None, :], xb[:, [0]], sigma), axis=1)
        return _unbatch(ll, single)

    def posterior_params(t):
        prec = sigma0 ** -2 + t * n * sigma ** -2
        var_t = 1.0 / prec
        mu_t = var_t * (mu0 / sigma0 ** 2 + t * n * ybar / sigma ** 2)
        return mu_t, var_t

    def g_exact(f_id, t):
        mu_t, var_t = posterior_params(t)
        name, idx = _parse_f_id(f_id)
        if idx not in (None, 0):
            raise ParameterError("model is one-dimensional")
        if name == "coordinate":
            return mu_t
        if name == "coordinate_squared":
            return mu_t ** 2 + var_t
        raise ParameterError(f"no closed form for test function {f_id!r}")

    def log_z_exact(t):
        if t == 0:
            return 0.0
        # Complete the square in t*loglik; the x-integral is a Gaussian
        # convolution with the prior.
        out = -0.5 * t * n * np.log(2 * np.pi * sigma ** 2)
        out -= t * ss / (2 * sigma ** 2)
        out += 0.5 * np.log(2 * np.pi * sigma ** 2 / (n * t))
        out += norm.logpdf(ybar, mu0, np.sqrt(sigma0 ** 2 + sigma ** 2 / (n * t)))
        return float(out)

    model = TargetModel(
        dim=1,
        log_prior=log_prior,
        sample_prior=sample_prior,
        log_lik=log_lik,
        support=None,
        model_id="gaussian_location",
        params={"mu0": mu0, "sigma0": sigma0, "sigma": sigma, "data": data.tolist()},
    )
    oracle = OracleSpec(kind="closed_form", g_exact=g_exact, log_z_exact=log_z_exact)
    return model, oracle


# ---------------------------------------------------------------------------
# Gaussian mixture model

_MIX_PRIOR_VAR = 10.0
_MIX_COMP_VAR = 0.5
_MIX_MEANS = np.array([(a, b) for a in (-4.0, 0.0, 4.0) for b in (-4.0, 0.0, 4.0)])


def gaussian_mixture_model(grid_size=400, grid_halfwidth=12.0):
    """2-d target with N(0, 10 I) prior and a nine-mode mixture likelihood.

    The likelihood is the unnormalised mixture sum_i N(x; mu_i, 0.5 I) with
    mu_i on the grid {-4, 0, 4}^2; tempered densities are invariant to the
    missing 1/9 constant.  The posterior is again a Gaussian mixture, so the
    oracle evaluates expectations of x1 and x1^2 in closed form at t in
    {0, 1} and by tensor-grid quadrature on [-12, 12]^2 in between.
    """
    d = 2

    def log_prior(x):
        xb, single = _as_batch(x)
        lp = -np.sum(xb ** 2, axis=1) / (2 * _MIX_PRIOR_VAR) - np.log(
            2 * np.pi * _MIX_PRIOR_VAR
        )
        return _unbatch(lp, single)

    def sample_prior(rng, size=1):
        return rng.normal(0.0, np.sqrt(_MIX_PRIOR_VAR), size=(size, d))

    def log_lik(x):
        xb, single = _as_batch(x)
        sq = np.sum((xb[:, None, :] - _MIX_MEANS[None, :, :]) ** 2, axis=2)
        ll = logsumexp(-sq / (2 * _MIX_COMP_VAR), axis=1)
        return _unbatch(ll, single)

    # Posterior mixture: component variance, shrunk means and weights follow
    # from completing the square against the prior.
    post_var = 1.0 / (1.0 / _MIX_PRIOR_VAR + 1.0 / _MIX_COMP_VAR)  # 10/21
    post_means = _MIX_MEANS * (post_var / _MIX_COMP_VAR)  # (20/21) mu_i
    w = np.exp(-np.sum(_MIX_MEANS ** 2, axis=1) / (2 * (_MIX_PRIOR_VAR + _MIX_COMP_VAR)))
    post_weights = w / w.sum()

    def _grid_quadrature(f_vals_fn, t, size):
        xs = np.linspace(-grid_halfwidth, grid_halfwidth, size)
        X1, X2 = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([X1.ravel(), X2.ravel()], axis=1)
        log_dens = log_prior(pts) + t * log_lik(pts)
        dens = np.exp(log_dens - log_dens.max())
        fv = f_vals_fn(pts)
        h = xs[1] - xs[0]
        num = np.sum(fv * dens) * h * h
        den = np.sum(dens) * h * h
        return num / den

    def g_exact(f_id, t, size=None):
        name, idx = _parse_f_id(f_id)
        idx = 0 if idx is None else idx
        if name == "coordinate":
            return 0.0  # target symmetric under sign flip of each coordinate
        if name != "coordinate_squared":
            raise ParameterError(f"no oracle for test function {f_id!r}")
        if t == 0:
            return _MIX_PRIOR_VAR
        if t == 1:
            return float(np.sum(post_weights * (post_var + post_means[:, idx] ** 2)))
        return float(
            _grid_quadrature(lambda p: p[:, idx] ** 2, t, size or grid_size)
        )

    model = TargetModel(
        dim=d,
        log_prior=log_prior,
        sample_prior=sample_prior,
        log_lik=log_lik,
        support=None,
        model_id="gaussian_mixture",
        params={},
    )
    oracle = OracleSpec(kind="grid_quadrature", g_exact=g_exact, log_z_exact=None)
    return model, oracle


# ---------------------------------------------------------------------------
# mRNA transfection model

_MRNA_TIMES = np.arange(1.0, 51.0)
_MRNA_TRUE_THETA = np.array([5.0, 0.1, 0.8, 2.0])
_MRNA_NOISE_SD = 1.0
_MRNA_TIE_TOL = 1e-8


def mrna_mean(theta, times):
    """Expression level at the given times under parameters (psi, delta, beta, t0).

    Zero before onset t0.  The delta=beta tie is a removable singularity and
    is evaluated through its analytic limit when |delta-beta| < 1e-8.
    """
    theta = np.asarray(theta, float)
    tb, single = (theta[None, :], True) if theta.ndim == 1 else (theta, False)
    times = np.atleast_1d(np.asarray(times, float))
    psi, delta, beta, t0 = (tb[:, [i]] for i in range(4))
    dt = times[None, :] - t0
    decay = np.exp(-beta * dt)
    diff = delta - beta
    tied = np.abs(diff) < _MRNA_TIE_TOL
    safe = np.where(tied, 1.0, diff)
    generic = psi / safe * (1.0 - np.exp(-safe * dt)) * decay
    limit = psi * dt * decay
    mu = np.where(tied, limit, generic)
    mu = np.where(dt < 0, 0.0, mu)
    return mu[0] if single else mu


def simulate_mrna_data(rng_seed):
    """Noisy observations at times 1..50 under the fixed true parameters."""
    rng = np.random.default_rng(rng_seed)
    mu = mrna_mean(_MRNA_TRUE_THETA, _MRNA_TIMES)
    return mu + rng.normal(0.0, _MRNA_NOISE_SD, size=_MRNA_TIMES.size)


def mrna_model(rng_seed=0, cauchy_prior=False):
    """Four-parameter transfection dynamics model with synthetic data.

    Parameters theta = (psi, delta, beta, t0) have uniform priors on
    (0,6) x (0,1) x (0,1) x (0,3) and a Gaussian observation model with unit
    noise.  Data are regenerated deterministically from ``rng_seed``.

    With ``cauchy_prior=True`` the model is reparametrised to log-parameters
    with heavy-tailed Cauchy priors; this variant exists to study failure
    behaviour and is excluded from the acceptance experiments.
    """
    data = simulate_mrna_data(rng_seed)
    const = -0.5 * data.size * np.log(2 * np.pi * _MRNA_NOISE_SD ** 2)

    def _log_lik_from_natural(theta_nat):
        mu = mrna_mean(theta_nat, _MRNA_TIMES)
        resid = data[None, :] - mu
        return const - 0.5 * np.sum(resid ** 2, axis=1) / _MRNA_NOISE_SD ** 2

    if not cauchy_prior:
        lower = np.zeros(4)
        upper = np.array([6.0, 1.0, 1.0, 3.0])
        log_vol = float(np.sum(np.log(upper - lower)))
        box = Box(lower, upper)

        def log_prior(x):
            xb, single = _as_batch(x)
            lp = np.where(box.contains(xb), -log_vol, -np.inf)
            return _unbatch(lp, single)

        def sample_prior(rng, size=1):
            return rng.uniform(lower, upper, size=(size, 4))

        def log_lik(x):
            xb, single = _as_batch(x)
            return _unbatch(_log_lik_from_natural(xb), single)

        return TargetModel(
            dim=4,
            log_prior=log_prior,
            sample_prior=sample_prior,
            log_lik=log_lik,
            support=box,
            model_id="mrna",
            params={"rng_seed": rng_seed},
        )

    # Heavy-tailed variant on log-parameters.
    loc = np.array([-2.0, 0.0, 0.0, -2.0])
    scale = np.array([1.0, 1.0, 1.0, 0.5])

    def log_prior(x):
        xb, single = _as_batch(x)
        z = (xb - loc) / scale
        lp = np.sum(-np.log(np.pi * scale) - np.log1p(z ** 2), axis=1)
        return _unbatch(lp, single)

    def sample_prior(rng, size=1):
        return loc + scale * rng.standard_cauchy(size=(size, 4))

    def log_lik(x):
        xb, single = _as_batch(x)
        return _unbatch(_log_lik_from_natural(np.exp(xb)), single)

    return TargetModel(
        dim=4,
        log_prior=log_prior,
        sample_prior=sample_prior,
        log_lik=log_lik,
        support=None,
        model_id="mrna_cauchy",
        params={"rng_seed": rng_seed, "cauchy_prior": True},
    )


# ---------------------------------------------------------------------------
# Logistic regression model

_LOGISTIC_INTERCEPT_SD = 20.0
_LOGISTIC_COEF_SD = 5.0


def logistic_model(features, labels):
    """Bayesian logistic regression with standardised predictors.

    Each predictor column is rescaled to mean 0 and standard deviation 0.5
    and an intercept column is prepended, so the parameter dimension is the
    number of feature columns plus one.  Priors are N(0, 20^2) on the
    intercept and N(0, 5^2) on each coefficient.

    Parameters
    ----------
    features: (n, p) array
        Raw predictor matrix, p >= 1.
    labels: length-n sequence of +-1
        Class labels.
    """
    features = np.asarray(features, float)
    if features.ndim != 2 or features.shape[1] < 1:
        raise DataError("features must be a matrix with at least one column")
    labels = np.asarray(labels, float)
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise DataError("labels must be in {-1, +1}")
    mean = features.mean(axis=0)
    sd = features.std(axis=0)
    if np.any(sd == 0):
        raise DataError("constant predictor column cannot be standardised")
    z = np.hstack([np.ones((features.shape[0], 1)), (features - mean) / sd * 0.5])
    d = z.shape[1]
    prior_sd = np.full(d, _LOGISTIC_COEF_SD)
    prior_sd[0] = _LOGISTIC_INTERCEPT_SD
    yz = labels[:, None] * z  # fold labels into the design once

    def log_prior(x):
        xb, single = _as_batch(x)
        lp = np.sum(norm.logpdf(xb, 0.0, prior_sd), axis=1)
        return _unbatch(lp, single)

    def sample_prior(rng, size=1):
        return rng.normal(0.0, prior_sd, size=(size, d))

    def log_lik(x):
        xb, single = _as_batch(x)
        ll = np.sum(log_expit(xb @ yz.T), axis=1)
        return _unbatch(ll, single)

    return TargetModel(
        dim=d,
        log_prior=log_prior,
        sample_prior=sample_prior,
        log_lik=log_lik,
        support=None,
        model_id="logistic",
        params={"n": int(features.shape[0]), "p": int(features.shape[1])},
    )


def load_label_csv(path, positive_label="M"):
    """Read a headerless CSV of numeric columns followed by one label column.

    Rows hold floats and a final single-character class label (sonar format:
    60 floats then R or M).  The positive label maps to +1, the other
    observed label to -1; more than two distinct labels is an error.

    Returns
    -------
    (features, labels): ((n, p) array, (n,) array of +-1)
    """
    rows, raw_labels = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(v) for v in parts[:-1]])
            except ValueError as exc:
                raise DataError(f"non-numeric predictor in {path}: {exc}") from exc
            raw_labels.append(parts[-1].strip())
    if not rows:
        raise DataError(f"no data rows in {path}")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"ragged rows in {path}")
    classes = sorted(set(raw_labels))
    if len(classes) > 2 or not classes:
        raise DataError(f"expected two label classes, found {classes}")
    labels = np.array([1.0 if lab == positive_label else -1.0 for lab in raw_labels])
    return np.asarray(rows, float), labels


# ---------------------------------------------------------------------------
# Tempered density and model registry


def log_tempered_unnormalized(model, t, x):
    """log p0(x) + t * loglik(x); -inf outside the support.

    ``t`` must lie in [0, 1].  Accepts a single point or an (n, d) batch.
    """
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"inverse temperature t={t} outside [0, 1]")
    xb, single = _as_batch(x)
    lp = np.atleast_1d(np.asarray(model.log_prior(xb), float))
    out = np.full(lp.shape, -np.inf)
    mask = np.isfinite(lp)
    if np.any(mask):
        ll = np.atleast_1d(np.asarray(model.log_lik(xb[mask]), float))
        out[mask] = lp[mask] + t * ll
    return _unbatch(out, single)


def _parse_f_id(f_id):
    """Split a test-function id like 'coordinate:1' into (name, index)."""
    if ":" in f_id:
        name, _, idx = f_id.partition(":")
        return name, int(idx)
    return f_id, None


def build_model(model_id, params=None):
    """Construct a registered model by id; returns (model, oracle_or_None)."""
    params = dict(params or {})
    if model_id == "gaussian_location":
        params.setdefault("mu0", 0.0)
        params.setdefault("sigma0", 1.0)
        params.setdefault("sigma", 1.0)
        params.setdefault("data", [2.0])
        return gaussian_location_model(**params)
    if model_id == "gaussian_mixture":
        return gaussian_mixture_model(**params)
    if model_id in ("mrna", "mrna_cauchy"):
        params.setdefault("rng_seed", 0)
        params.setdefault("cauchy_prior", model_id == "mrna_cauchy")
        return mrna_model(**params), None
    if model_id == "logistic":
        path = params.get("data_path")
        if path is None:
            raise ParameterError("logistic model requires data_path")
        features, labels = load_label_csv(path, params.get("positive_label", "M"))
        return logistic_model(features, labels), None
    raise ParameterError(f"unknown model id {model_id!r}")
