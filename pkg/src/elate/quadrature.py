"""Log marginal likelihood via thermodynamic integration.

The identity log Z_1 = integral over [0,1] of the tempered expectation of
the log-likelihood underlies all methods here.  Five estimators consume the
same SMC run:

* ``trapezoid`` / ``simpson`` -- classical quadrature of the per-temperature
  estimates on the (nonuniform) adaptive ladder;
* ``smc`` -- the sampler's own running normaliser estimate at t=1;
* ``elate_bq`` -- fit the derivative-augmented GP to the integrand estimates
  and integrate its posterior in closed form (Bayesian quadrature: the
  squared-exponential kernel admits exact mean-embedding integrals through
  the error function);
* ``elate_v2`` -- regress the cumulative log-normaliser estimates themselves
  on t (its derivative is the tempered expectation of the log-likelihood,
  supplying gradient data for free) and read the GP off at t=1.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ParameterError
from .estimators import (
    ExpectationDatum,
    RegressionDataset,
    log_z_bootstrap_variances,
    smc_function_datum,
    smc_gradient_datum,
)
from .gp import fit, posterior_predict, rational_mean_eval

__all__ = [
    "QuadratureResult",
    "trapezoid",
    "simpson_nonuniform",
    "bq_integrate",
    "ti_elate",
    "ti_elate_v2",
    "ti_baselines",
]

_T0_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class QuadratureResult:
    """One log-marginal-likelihood estimate.

    ``variance`` is present exactly for the GP-based methods (elate_bq,
    elate_v2); ``n_nodes`` counts the ladder temperatures consumed.
    """

    log_z1: float
    method: str
    n_nodes: int
    variance: Optional[float] = None

    def __post_init__(self):
        has_var = self.variance is not None
        if has_var != (self.method in ("elate_bq", "elate_v2")):
            raise ParameterError(
                f"variance must be present iff method is GP-based, got {self.method}"
            )


def _check_grid(ts, min_nodes):
    ts = np.asarray(ts, float)
    if ts.size < min_nodes:
        raise ParameterError(f"need at least {min_nodes} quadrature nodes")
    if ts[0] != 0.0 or ts[-1] != 1.0:
        raise ParameterError("quadrature grid must cover the endpoints 0 and 1")
    if np.any(np.diff(ts) <= 0):
        raise ParameterError("quadrature nodes must be strictly increasing")
    return ts


def trapezoid(ts, values):
    """Composite trapezoid rule on a nonuniform grid over [0, 1]."""
    ts = _check_grid(ts, 2)
    return float(np.trapezoid(np.asarray(values, float), ts))


def simpson_nonuniform(ts, values):
    """Composite Simpson rule on a nonuniform grid over [0, 1].

    Consecutive node triples are integrated exactly under the quadratic
    interpolant; a leftover final interval falls back to the trapezoid rule.
    Exact for quadratics whenever the triples tile the grid.
    """
    ts = _check_grid(ts, 3)
    fs = np.asarray(values, float)
    total = 0.0
    i = 0
    while i + 2 < ts.size:
        h0 = ts[i + 1] - ts[i]
        h1 = ts[i + 2] - ts[i + 1]
        hsum = h0 + h1
        total += (hsum / 6.0) * (
            (2.0 - h1 / h0) * fs[i]
            + hsum ** 2 / (h0 * h1) * fs[i + 1]
            + (2.0 - h0 / h1) * fs[i + 2]
        )
        i += 2
    if i + 1 < ts.size:
        total += 0.5 * (ts[i + 1] - ts[i]) * (fs[i] + fs[i + 1])
    return float(total)


# ---------------------------------------------------------------------------
# Bayesian quadrature

def _kernel_integral(kernel, s):
    """Integral over [0,1] of k(t, s) in t, elementwise in s."""
    lam2 = kernel.amplitude ** 2
    ell = kernel.lengthscale
    s = np.asarray(s, float)
    return lam2 * (math.sqrt(math.pi) * ell / 2.0) * (
        erf((1.0 - s) / ell) + erf(s / ell)
    )


def _kernel_integral_d2(kernel, s):
    """Integral over [0,1] of the s-derivative of k(t, s) in t."""
    lam2 = kernel.amplitude ** 2
    ell2 = kernel.lengthscale ** 2
    s = np.asarray(s, float)
    return lam2 * (np.exp(-(s ** 2) / ell2) - np.exp(-((1.0 - s) ** 2) / ell2))


def _kernel_double_integral(kernel):
    """Integral of k(t, t') over the unit square."""
    lam2 = kernel.amplitude ** 2
    ell = kernel.lengthscale
    return lam2 * (
        math.sqrt(math.pi) * ell * erf(1.0 / ell)
        + ell ** 2 * (math.exp(-1.0 / ell ** 2) - 1.0)
    )


def _mean_integral(mean, n_intervals=512):
    ts = np.linspace(0.0, 1.0, n_intervals + 1)
    vals, _ = rational_mean_eval(mean, ts)
    h = ts[1] - ts[0]
    return float(
        (h / 3.0)
        * (vals[0] + vals[-1] + 4.0 * vals[1:-1:2].sum() + 2.0 * vals[2:-1:2].sum())
    )


def bq_integrate(model):
    """(mean, variance) of the integral of the GP posterior over [0, 1].

    Kernel integrals are closed-form; the prior-mean integral is computed
    numerically because rational functions need not integrate in closed
    form.  The variance is clamped at zero against round-off.
    """
    prior_term = _mean_integral(model.mean)
    dd = _kernel_double_integral(model.kernel)
    if model.train_ts.size == 0:
        return prior_term, max(dd, 0.0)
    w = _kernel_integral(model.kernel, model.train_ts)
    if model.use_gradients:
        w = np.concatenate([w, _kernel_integral_d2(model.kernel, model.train_ts)])
    mean = prior_term + float(w @ model._alpha)
    var = dd - float(w @ model.solve(w))
    return mean, max(var, 0.0)


# ---------------------------------------------------------------------------
# ELATE thermodynamic integration

def _loglik_values(rec):
    return rec.log_lik_values.reshape(-1)


def _integrand_dataset(run):
    """Per-temperature estimates of the expected log-likelihood with gradients."""
    data = []
    for i, rec in enumerate(run.records):
        ll = _loglik_values(rec)
        f = lambda _, v=ll: v
        g, gv = smc_function_datum(run, i, f)
        gp, gpv = smc_gradient_datum(run, i, f)
        data.append(
            ExpectationDatum(
                t=float(rec.t), g_hat=g, g_var=gv, g_prime_hat=gp, g_prime_var=gpv
            )
        )
    return RegressionDataset(data=tuple(data), horizon_index=len(data))


def ti_elate(run, fit_config=None):
    """Bayesian-quadrature estimate of log Z_1 from the fitted integrand GP.

    Function data are the weighted estimates of the expected log-likelihood;
    gradient data are the weighted log-likelihood variances (the derivative
    of the integrand in t).
    """
    dataset = _integrand_dataset(run)
    model = fit(dataset, fit_config)
    mean, var = bq_integrate(model)
    return QuadratureResult(
        log_z1=mean, method="elate_bq", n_nodes=len(run.records), variance=var
    )


def ti_elate_v2(run, B=100, rng=None, fit_config=None):
    """GP extrapolation of the cumulative log-normaliser curve to t=1.

    Function data are the sampler's running log-normaliser estimates (their
    variances by chain-level bootstrap; the t=0 value is exactly zero and
    receives a tiny variance floor so the noise matrix stays positive
    definite).  Gradient data are the expected-log-likelihood estimates,
    since the curve's derivative in t is exactly that expectation.
    """
    variances = log_z_bootstrap_variances(run, B=B, rng=rng)
    data = []
    for i, rec in enumerate(run.records):
        ll = _loglik_values(rec)
        f = lambda _, v=ll: v
        gp, gpv = smc_function_datum(run, i, f)
        data.append(
            ExpectationDatum(
                t=float(rec.t),
                g_hat=float(rec.log_z),
                g_var=max(float(variances[i]), _T0_VARIANCE_FLOOR),
                g_prime_hat=gp,
                g_prime_var=max(gpv, _T0_VARIANCE_FLOOR),
            )
        )
    dataset = RegressionDataset(data=tuple(data), horizon_index=len(data))
    model = fit(dataset, fit_config)
    mean, var = posterior_predict(model, 1.0)
    return QuadratureResult(
        log_z1=mean, method="elate_v2", n_nodes=len(run.records), variance=var
    )


def ti_baselines(run):
    """Trapezoid, Simpson and raw-SMC estimates from one run."""
    ts = run.temperatures
    values = np.array(
        [smc_function_datum(run, i, lambda _, v=_loglik_values(r): v)[0]
         for i, r in enumerate(run.records)]
    )
    n = len(run.records)
    return {
        "trapezoid": QuadratureResult(trapezoid(ts, values), "trapezoid", n),
        "simpson": QuadratureResult(simpson_nonuniform(ts, values), "simpson", n),
        "smc": QuadratureResult(float(run.records[-1].log_z), "smc", n),
    }
