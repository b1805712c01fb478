"""Post-processing of SMC runs into regression data.

Each ladder temperature yields one observation for the regression over
inverse temperature: a point estimate of the tempered expectation, its
variance, and (optionally) an estimate of the derivative with its variance.
Two sources are supported:

* ``smc`` -- the weighted particle average with its single-run asymptotic
  variance, and the covariance-based derivative estimator
  Q[f*loglik] - Q[f] Q[loglik] with a delta-method variance;
* ``it`` -- importance tempering: for a target temperature t_k, every
  earlier stage provides a self-normalised importance-sampling estimate
  (stage-i particles are distributed according to the previous temperature,
  so the log-weights are (t_k - t_{i-1}) * loglik), and the stage estimates
  are combined with weights proportional to their effective sample sizes.
  Variances for the it source come from a chain-level bootstrap.
"""

import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import DegeneracyError, ParameterError

__all__ = [
    "ExpectationDatum",
    "RegressionDataset",
    "smc_function_datum",
    "smc_gradient_datum",
    "it_estimate",
    "it_stage_weights",
    "it_bootstrap_variance",
    "it_gradient_datum",
    "build_dataset",
    "log_z_bootstrap_variances",
    "save_dataset",
    "load_dataset",
]

DEFAULT_BOOTSTRAP = 100


@dataclass(frozen=True)
class ExpectationDatum:
    """One regression observation at inverse temperature t.

    Gradient fields are either both present or both absent; variances are
    finite and nonnegative.
    """

    t: float
    g_hat: float
    g_var: float
    g_prime_hat: Optional[float] = None
    g_prime_var: Optional[float] = None
    source: str = "smc"

    def __post_init__(self):
        if (self.g_prime_hat is None) != (self.g_prime_var is None):
            raise ParameterError("gradient value and variance must come together")
        variances = [self.g_var] + ([self.g_prime_var] if self.g_prime_var is not None else [])
        for v in variances:
            if not np.isfinite(v) or v < 0:
                raise ParameterError(f"invalid variance {v}")

    @property
    def has_gradient(self):
        return self.g_prime_hat is not None


@dataclass(frozen=True)
class RegressionDataset:
    """Observations sorted by t plus the training horizon.

    ``horizon_index`` h is the number of leading temperatures used for
    fitting: h < len(data) is extrapolation, h = len(data) smoothing.
    """

    data: Tuple[ExpectationDatum, ...]
    horizon_index: int

    def __post_init__(self):
        ts = [d.t for d in self.data]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ParameterError("temperatures must be strictly increasing")
        if not 0 <= self.horizon_index <= len(self.data):
            raise ParameterError("horizon index out of range")

    def in_horizon(self):
        return self.data[: self.horizon_index]

    def __len__(self):
        return len(self.data)


# ---------------------------------------------------------------------------
# Direct SMC data


def _check_index(run, i):
    if not 0 <= i < len(run.records):
        raise ParameterError(f"temperature index {i} out of range")


def smc_function_datum(run, i, f):
    """(point estimate, variance) of the tempered expectation at ladder index i."""
    from .smc import asymptotic_variance, weighted_estimate

    _check_index(run, i)
    rec = run.records[i]
    g_hat = weighted_estimate(rec, f)
    g_var = asymptotic_variance(rec, f) / run.config.N
    return g_hat, g_var


def smc_gradient_datum(run, i, f):
    """(point estimate, variance) of the derivative of the tempered expectation.

    Uses the covariance identity g' = E[f*loglik] - E[f] E[loglik] under the
    current tempered distribution, with each term estimated from the weighted
    particles, and a delta-method variance built from the three single-run
    asymptotic variances.
    """
    from .smc import asymptotic_variance, weighted_estimate

    _check_index(run, i)
    rec = run.records[i]
    ll_flat = rec.log_lik_values.reshape(-1)
    fv = np.asarray(f(rec.flat_particles()), float)
    if not np.all(np.isfinite(fv)):
        raise ParameterError("test function returned non-finite values")
    w = rec.weights
    q_f = float(w @ fv)
    q_l = float(w @ ll_flat)
    q_fl = float(w @ (fv * ll_flat))
    g_prime = q_fl - q_f * q_l

    # asymptotic_variance evaluates its function on the record's own
    # particles, so precomputed per-particle arrays can be passed through
    var_fl = asymptotic_variance(rec, lambda _: fv * ll_flat)
    var_l = asymptotic_variance(rec, lambda _: ll_flat)
    var_f = asymptotic_variance(rec, lambda _: fv)
    g_prime_var = (var_fl + q_f ** 2 * var_l + q_l ** 2 * var_f) / run.config.N
    return g_prime, g_prime_var


# ---------------------------------------------------------------------------
# Importance tempering


def _stage_prev_temperature(run, i):
    """Distributional temperature of the stage-i particle block."""
    return 0.0 if i == 0 else run.records[i - 1].t


def _stage_log_weights(ll, delta):
    """Max-shifted importance weights exp(delta * loglik) along the last axis."""
    lw = delta * ll
    return np.exp(lw - lw.max(axis=-1, keepdims=True))


def _combine_stages(stage_values, stage_lambdas):
    lam = np.stack(stage_lambdas, axis=-1)
    vals = np.stack(stage_values, axis=-1)
    lam = lam / lam.sum(axis=-1, keepdims=True)
    return (lam * vals).sum(axis=-1)


def it_stage_weights(run, k):
    """Normalized ESS-proportional combination weights of stages 0..k."""
    _check_index(run, k)
    t_k = run.records[k].t
    lams = []
    for i in range(k + 1):
        rec = run.records[i]
        delta = t_k - _stage_prev_temperature(run, i)
        lw = delta * rec.log_lik_values.reshape(-1)
        if not np.all(np.isfinite(lw)):
            lams.append(0.0)
            continue
        w = np.exp(lw - lw.max())
        lams.append(float(w.sum() ** 2 / (w @ w)))
    lams = np.asarray(lams)
    total = lams.sum()
    if total == 0:
        raise DegeneracyError("all importance-tempering stages degenerate")
    return lams / total


def it_estimate(run, f, k):
    """Importance-tempering estimate of the tempered expectation at index k.

    Combines the self-normalised estimates from all stages i <= k with
    weights proportional to each stage's effective sample size.  Stages whose
    weights degenerate entirely are dropped with a warning; if every stage is
    dropped a degeneracy error is raised.
    """
    _check_index(run, k)
    t_k = run.records[k].t
    values, lambdas = [], []
    for i in range(k + 1):
        rec = run.records[i]
        delta = t_k - _stage_prev_temperature(run, i)
        lw = delta * rec.log_lik_values.reshape(-1)
        if not np.all(np.isfinite(lw)):
            warnings.warn(f"importance-tempering stage {i} dropped (degenerate weights)")
            continue
        w = np.exp(lw - lw.max())
        fv = np.asarray(f(rec.flat_particles()), float)
        if not np.all(np.isfinite(fv)):
            raise ParameterError("test function returned non-finite values")
        values.append(float(w @ fv / w.sum()))
        lambdas.append(float(w.sum() ** 2 / (w @ w)))
    if not values:
        raise DegeneracyError("all importance-tempering stages degenerate")
    lam = np.asarray(lambdas)
    lam /= lam.sum()
    return float(lam @ np.asarray(values))


def _bootstrap_stage_arrays(run, k, fvals, B, rng):
    """Chain-resampled (B, N) log-lik and f-value arrays for stages 0..k."""
    stages = []
    for i in range(k + 1):
        rec = run.records[i]
        m = rec.shape[0]
        idx = rng.integers(0, m, size=(B, m))
        ll = rec.log_lik_values[idx].reshape(B, -1)
        fv = fvals[i].reshape(rec.shape)[idx].reshape(B, -1)
        delta = run.records[k].t - _stage_prev_temperature(run, i)
        stages.append((ll, fv, delta))
    return stages


def _record_fvals(run, k, f):
    fvals = []
    for rec in run.records[: k + 1]:
        fv = np.asarray(f(rec.flat_particles()), float)
        if not np.all(np.isfinite(fv)):
            raise ParameterError("test function returned non-finite values")
        fvals.append(fv)
    return fvals


def _default_rng(run, tag, k):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(run.config.seed, tag, k))
    )


def it_bootstrap_variance(run, f, k, B=DEFAULT_BOOTSTRAP, rng=None):
    """Bootstrap variance of the importance-tempering estimate at index k.

    Whole chains (blocks of P consecutive states) are resampled with
    replacement, independently for every stage, B times; the variance of the
    replicated estimates is returned.
    """
    if B < 2:
        raise ParameterError("need at least two bootstrap replicates")
    _check_index(run, k)
    rng = rng if rng is not None else _default_rng(run, 0xB00, k)
    fvals = _record_fvals(run, k, f)
    stages = _bootstrap_stage_arrays(run, k, fvals, B, rng)
    values, lambdas = [], []
    for ll, fv, delta in stages:
        w = _stage_log_weights(ll, delta)
        sw = w.sum(axis=-1)
        values.append((w * fv).sum(axis=-1) / sw)
        lambdas.append(sw ** 2 / (w * w).sum(axis=-1))
    reps = _combine_stages(values, lambdas)
    return float(np.var(reps, ddof=1))


def it_gradient_datum(run, f, k, B=DEFAULT_BOOTSTRAP, rng=None):
    """(point estimate, bootstrap variance) of the derivative from IT data.

    Applies the covariance identity with every inner expectation computed by
    importance tempering; the variance bootstraps the whole combination at
    chain level, sharing resampled chains across the three inner estimates
    within a replicate.
    """
    if B < 2:
        raise ParameterError("need at least two bootstrap replicates")
    _check_index(run, k)
    rng = rng if rng is not None else _default_rng(run, 0xD00, k)
    fvals = _record_fvals(run, k, f)
    point = _it_gradient_point(run, k, fvals)

    stages = _bootstrap_stage_arrays(run, k, fvals, B, rng)
    g_f, g_l, g_fl, lambdas = [], [], [], []
    for ll, fv, delta in stages:
        w = _stage_log_weights(ll, delta)
        sw = w.sum(axis=-1)
        g_f.append((w * fv).sum(axis=-1) / sw)
        g_l.append((w * ll).sum(axis=-1) / sw)
        g_fl.append((w * fv * ll).sum(axis=-1) / sw)
        lambdas.append(sw ** 2 / (w * w).sum(axis=-1))
    reps = (
        _combine_stages(g_fl, lambdas)
        - _combine_stages(g_f, lambdas) * _combine_stages(g_l, lambdas)
    )
    return point, float(np.var(reps, ddof=1))


def _it_gradient_point(run, k, fvals):
    t_k = run.records[k].t
    g_f, g_l, g_fl, lambdas = [], [], [], []
    for i in range(k + 1):
        rec = run.records[i]
        delta = t_k - _stage_prev_temperature(run, i)
        ll = rec.log_lik_values.reshape(-1)
        lw = delta * ll
        if not np.all(np.isfinite(lw)):
            warnings.warn(f"importance-tempering stage {i} dropped (degenerate weights)")
            continue
        w = np.exp(lw - lw.max())
        sw = w.sum()
        fv = fvals[i]
        g_f.append(float(w @ fv / sw))
        g_l.append(float(w @ ll / sw))
        g_fl.append(float(w @ (fv * ll) / sw))
        lambdas.append(float(sw ** 2 / (w @ w)))
    if not lambdas:
        raise DegeneracyError("all importance-tempering stages degenerate")
    lam = np.asarray(lambdas)
    lam /= lam.sum()
    return float(
        lam @ np.asarray(g_fl) - (lam @ np.asarray(g_f)) * (lam @ np.asarray(g_l))
    )


# ---------------------------------------------------------------------------
# Dataset assembly


def build_dataset(
    run,
    f,
    source="smc",
    horizon=1.0,
    with_gradients=True,
    B=DEFAULT_BOOTSTRAP,
    rng=None,
):
    """One observation per ladder temperature, with the training horizon set.

    ``horizon`` in (0, 1] controls how many leading temperatures count as
    training data: the horizon index is the number of temperatures <= horizon.
    """
    if source not in ("smc", "it"):
        raise ParameterError(f"unknown data source {source!r}")
    if not 0.0 < horizon <= 1.0:
        raise ParameterError("horizon must lie in (0, 1]")
    ts = run.temperatures
    h = int(np.sum(ts <= horizon))
    if h == 0:
        raise ParameterError("horizon selects no temperatures")
    if rng is None:
        rng = _default_rng(run, 0xDA7A, len(run.records))
    data = []
    for i, t in enumerate(ts):
        if source == "smc":
            g_hat, g_var = smc_function_datum(run, i, f)
            grad = smc_gradient_datum(run, i, f) if with_gradients else (None, None)
        else:
            g_hat = it_estimate(run, f, i)
            g_var = it_bootstrap_variance(run, f, i, B=B, rng=rng)
            grad = (
                it_gradient_datum(run, f, i, B=B, rng=rng)
                if with_gradients
                else (None, None)
            )
        data.append(
            ExpectationDatum(
                t=float(t),
                g_hat=g_hat,
                g_var=g_var,
                g_prime_hat=grad[0],
                g_prime_var=grad[1],
                source=source,
            )
        )
    return RegressionDataset(data=tuple(data), horizon_index=h)


def log_z_bootstrap_variances(run, B=DEFAULT_BOOTSTRAP, rng=None):
    """Chain-level bootstrap variances of the cumulative log normaliser.

    Returns one variance per ladder temperature (zero at t=0).  Chains are
    resampled independently within each temperature; each replicate rebuilds
    the whole cumulative sum of log-mean-weight increments.
    """
    if B < 2:
        raise ParameterError("need at least two bootstrap replicates")
    rng = rng if rng is not None else _default_rng(run, 0x106, len(run.records))
    n = len(run.records)
    incs = np.zeros((B, n))
    for i, rec in enumerate(run.records[1:], start=1):
        m, p = rec.shape
        lw = rec.log_weights_unnorm.reshape(m, p)
        idx = rng.integers(0, m, size=(B, m))
        incs[:, i] = logsumexp(lw[idx].reshape(B, m * p), axis=-1) - np.log(m * p)
    cum = np.cumsum(incs, axis=1)
    return np.var(cum, axis=0, ddof=1)


# ---------------------------------------------------------------------------
# CSV round trip

_CSV_HEADER = "t,g_hat,g_var,g_prime_hat,g_prime_var,source,in_horizon"


def _fmt(x):
    return "" if x is None else f"{x:.17g}"


def save_dataset(dataset, path):
    """Write the dataset CSV (17 significant digits, lossless round-trip)."""
    lines = [_CSV_HEADER]
    for i, d in enumerate(dataset.data):
        lines.append(
            ",".join(
                [
                    _fmt(d.t),
                    _fmt(d.g_hat),
                    _fmt(d.g_var),
                    _fmt(d.g_prime_hat),
                    _fmt(d.g_prime_var),
                    d.source,
                    str(int(i < dataset.horizon_index)),
                ]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    """Read a dataset CSV written by :func:`save_dataset`."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _CSV_HEADER:
        raise ParameterError(f"unrecognised dataset file {path}")
    data, h = [], 0
    for ln in lines[1:]:
        t, g_hat, g_var, gp, gpv, source, in_h = ln.split(",")
        data.append(
            ExpectationDatum(
                t=float(t),
                g_hat=float(g_hat),
                g_var=float(g_var),
                g_prime_hat=float(gp) if gp else None,
                g_prime_var=float(gpv) if gpv else None,
                source=source,
            )
        )
        h += int(in_h)
    return RegressionDataset(data=tuple(data), horizon_index=h)
