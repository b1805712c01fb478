"""Waste-free tempered sequential Monte Carlo.

The sampler maintains N = M*P particles.  At each temperature it resamples
M ancestors from the current weighted set, runs each ancestor through P-1
steps of a random-walk Metropolis kernel invariant for the *current*
tempered distribution, keeps every intermediate state (ancestor plus moves,
so M chains of length P), selects the next inverse temperature (adaptively
via an effective-sample-size rule, or from a fixed ladder), and reweights
with the likelihood raised to the temperature increment.  The running
normalising-constant estimate accumulates one log-mean-weight term per
temperature.

Because the N particles at a given temperature behave like M nearly
independent Markov chains of length P, single-run asymptotic variances of
the weighted estimators are available through standard MCMC machinery:
per-chain sample autocovariances combined by the initial monotone sequence
truncation rule (:func:`initial_monotone_variance`), applied to a weighted,
centred transform of the test function (:func:`asymptotic_variance`).

Reproducibility: all randomness derives from ``SmcConfig.seed``.  Stream
(seed, i, 0) drives resampling at temperature step i, and stream
(seed, i, m+1) drives chain m at that step, so rejuvenation is reproducible
regardless of execution order of the chains.
"""

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegeneracyError,
    ParameterError,
    RunawayLadderError,
)
from .models import TargetModel, build_model

__all__ = [
    "RwKernelConfig",
    "SmcConfig",
    "TemperatureRecord",
    "SmcRun",
    "ess",
    "solve_next_temperature",
    "multinomial_resample",
    "rw_metropolis_step",
    "run_waste_free_smc",
    "weighted_estimate",
    "chain_autocovariance",
    "initial_monotone_variance",
    "asymptotic_variance",
    "save_run",
    "load_run",
]

_MAX_TEMPERATURES = 10_000
_BISECT_TOL = 1e-10
_BISECT_MAX_ITER = 200


@dataclass(frozen=True)
class RwKernelConfig:
    """Random-walk proposal tuning.

    ``n_adapt_scale`` multiplies the Cholesky factor of the weighted particle
    covariance (default 2.38/sqrt(d)); ``cov_regularizer`` is an absolute
    diagonal jitter added on top of the relative 1e-9 * trace/d term.
    """

    n_adapt_scale: Optional[float] = None
    cov_regularizer: float = 0.0

    def __post_init__(self):
        if self.n_adapt_scale is not None and self.n_adapt_scale <= 0:
            raise ParameterError("proposal scale must be positive")
        if self.cov_regularizer < 0:
            raise ParameterError("cov_regularizer must be >= 0")


@dataclass(frozen=True)
class SmcConfig:
    """Inputs of one waste-free SMC run (N = M*P particles total).

    ``ladder`` is either ``("adaptive", ess_min)`` with ess_min in (0,1), or
    ``("fixed", temperatures)`` with a strictly increasing sequence starting
    at 0 and ending at 1.
    """

    M: int
    P: int
    ladder: Tuple = ("adaptive", 0.5)
    kernel: RwKernelConfig = field(default_factory=RwKernelConfig)
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ParameterError("M must be >= 1")
        if self.P < 2:
            raise ParameterError("P must be >= 2")
        kind = self.ladder[0]
        if kind == "adaptive":
            ess_min = self.ladder[1]
            if not 0.0 < ess_min < 1.0:
                raise ParameterError("adaptive ess_min must lie in (0, 1)")
        elif kind == "fixed":
            ts = np.asarray(self.ladder[1], float)
            if ts.size < 2 or ts[0] != 0.0 or ts[-1] != 1.0 or np.any(np.diff(ts) <= 0):
                raise ParameterError(
                    "fixed ladder must be strictly increasing from 0 to 1"
                )
        else:
            raise ParameterError(f"unknown ladder kind {kind!r}")

    @property
    def N(self):
        return self.M * self.P


@dataclass(frozen=True)
class TemperatureRecord:
    """Particle system at one inverse temperature.

    ``particles`` has shape (M, P, d), laid out by chain; flattening the
    first two axes gives the N particles in the order used by the flat
    weight arrays.  ``log_weights_unnorm`` holds the raw reweighting
    exponents (t_i - t_{i-1}) * loglik, and ``log_z`` the running estimate of
    the log normalising constant at this temperature.
    """

    t: float
    particles: np.ndarray
    log_lik_values: np.ndarray
    log_weights_unnorm: np.ndarray
    weights: np.ndarray
    log_z: float

    @property
    def shape(self):
        return self.particles.shape[:2]

    def flat_particles(self):
        m, p, d = self.particles.shape
        return self.particles.reshape(m * p, d)


@dataclass(frozen=True)
class SmcRun:
    """Complete output of one waste-free SMC execution."""

    records: Tuple[TemperatureRecord, ...]
    config: SmcConfig
    model: Optional[TargetModel] = None

    @property
    def temperatures(self):
        return np.array([r.t for r in self.records])

    @property
    def log_z(self):
        return self.records[-1].log_z


def ess(unnormalized_weights):
    """Effective sample size (sum w)^2 / sum w^2 of nonnegative weights."""
    w = np.asarray(unnormalized_weights, float)
    if w.size == 0 or np.any(np.isnan(w)):
        raise DegeneracyError("weights contain NaN or are empty")
    if np.any(w < 0) or np.any(np.isinf(w)):
        raise ParameterError("weights must be finite and >= 0")
    s = w.sum()
    if s == 0.0:
        raise DegeneracyError("all weights are zero")
    return float(s ** 2 / np.sum(w ** 2))


def _ess_of_log_weights(log_w):
    """ESS computed stably from log-weights via a max shift."""
    shifted = log_w - log_w.max()
    w = np.exp(shifted)
    return float(w.sum() ** 2 / np.sum(w ** 2))


def solve_next_temperature(log_lik_values, t_prev, ess_min):
    """Next inverse temperature by the minimum-ESS rule.

    Returns 1 when the ESS of the reweighting to t=1 already meets
    ess_min * N; otherwise bisects ESS(t)/N = ess_min on (t_prev, 1] to
    absolute tolerance 1e-10 in t.
    """
    ll = np.asarray(log_lik_values, float)
    if not np.all(np.isfinite(ll)):
        raise DegeneracyError("non-finite log-likelihood values")
    if t_prev >= 1.0:
        raise ParameterError("t_prev must be < 1")
    n = ll.size
    target = ess_min * n

    def ess_at(t):
        return _ess_of_log_weights((t - t_prev) * ll)

    if ess_at(1.0) >= target:
        return 1.0
    lo, hi = t_prev, 1.0
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if ess_at(mid) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo < _BISECT_TOL:
            break
    return 0.5 * (lo + hi)


def multinomial_resample(weights, M, rng):
    """Draw M iid categorical indices according to normalized weights."""
    w = np.asarray(weights, float)
    if abs(w.sum() - 1.0) > 1e-8:
        raise ParameterError("weights must be normalized to sum 1")
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(M))


def _log_tempered_batch(model, t, x):
    """(log_prior + t*loglik, loglik) on a batch, with -inf off support."""
    lp = np.atleast_1d(np.asarray(model.log_prior(x), float))
    ll = np.full(lp.shape, -np.inf)
    lt = np.full(lp.shape, -np.inf)
    mask = np.isfinite(lp)
    if np.any(mask):
        ll[mask] = np.asarray(model.log_lik(x[mask]), float)
        lt[mask] = lp[mask] + t * ll[mask]
    return lt, ll


def _mh_update(x, lt, ll, z, u, chol, model, t):
    """One vectorised Metropolis step for a block of chains.

    Proposals are x + chol @ z; moves to points with -inf tempered density
    (outside the support) are always rejected.  Returns updated state,
    tempered log-density and cached log-likelihood arrays.
    """
    prop = x + z @ chol.T
    lt_prop, ll_prop = _log_tempered_batch(model, t, prop)
    with np.errstate(invalid="ignore"):
        accept = np.log(u) < lt_prop - lt
    x = np.where(accept[:, None], prop, x)
    lt = np.where(accept, lt_prop, lt)
    ll = np.where(accept, ll_prop, ll)
    return x, lt, ll


def rw_metropolis_step(x, t, proposal_cov_chol, model, rng):
    """Single Metropolis-Hastings step with a symmetric Gaussian proposal.

    Targets the tempered density at inverse temperature t.  Returns the new
    state, which equals the input state on rejection.
    """
    x = np.asarray(x, float)
    chol = np.asarray(proposal_cov_chol, float)
    lt, ll = _log_tempered_batch(model, t, x[None, :])
    if not np.isfinite(lt[0]):
        raise ParameterError("current state has non-finite tempered density")
    z = rng.standard_normal((1, x.size))
    u = rng.random(1)
    x_new, _, _ = _mh_update(x[None, :], lt, ll, z, u, chol, model, t)
    return x_new[0]


def _weighted_cov(x, w):
    mean = w @ x
    centred = x - mean
    return (centred * w[:, None]).T @ centred


def _proposal_chol(particles, weights, d, kernel):
    cov = _weighted_cov(particles, weights)
    scale = kernel.n_adapt_scale if kernel.n_adapt_scale is not None else 2.38 / math.sqrt(d)
    jitter = kernel.cov_regularizer + 1e-9 * np.trace(cov) / d
    prop = scale ** 2 * cov + jitter * np.eye(d)
    for extra in (0.0, 1e-12, 1e-9, 1e-6):
        try:
            return np.linalg.cholesky(prop + extra * np.eye(d))
        except np.linalg.LinAlgError:
            continue
    raise DegeneracyError("proposal covariance is not positive definite")


def _chain_rng(seed, step, chain):
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, step, chain)))


def _normalized(log_w):
    shifted = log_w - log_w.max()
    w = np.exp(shifted)
    return w / w.sum()


def run_waste_free_smc(model, config):
    """Run the waste-free SMC sampler; returns the full per-temperature output.

    The initial record holds N exact prior draws at t=0 with equal weights
    and log_z = 0.  Each subsequent record holds the rejuvenated M x P chain
    block, its cached log-likelihood values, the reweighting exponents to the
    new temperature, normalized weights, and the accumulated log normalising
    constant.
    """
    M, P, d = config.M, config.P, model.dim
    N = config.N
    seed = config.seed
    adaptive = config.ladder[0] == "adaptive"
    fixed_ts = None if adaptive else np.asarray(config.ladder[1], float)

    rng0 = _chain_rng(seed, 0, 0)
    x0 = model.sample_prior(rng0, N)
    ll0 = np.asarray(model.log_lik(x0), float)
    if not np.all(np.isfinite(ll0)):
        raise DegeneracyError("log-likelihood not finite at prior draws")
    records = [
        TemperatureRecord(
            t=0.0,
            particles=x0.reshape(M, P, d),
            log_lik_values=ll0.reshape(M, P),
            log_weights_unnorm=np.zeros(N),
            weights=np.full(N, 1.0 / N),
            log_z=0.0,
        )
    ]

    i = 0
    while records[-1].t < 1.0:
        i += 1
        if i > _MAX_TEMPERATURES:
            raise RunawayLadderError(
                f"temperature ladder exceeded {_MAX_TEMPERATURES} steps"
            )
        prev = records[-1]
        t_prev = prev.t
        flat = prev.flat_particles()

        chol = _proposal_chol(flat, prev.weights, d, config.kernel)
        idx = multinomial_resample(prev.weights, M, _chain_rng(seed, i, 0))
        cur = flat[idx].copy()
        cur_ll = prev.log_lik_values.reshape(N)[idx].copy()
        cur_lt = np.asarray(model.log_prior(cur), float) + t_prev * cur_ll

        chains_x = np.empty((M, P, d))
        chains_ll = np.empty((M, P))
        chains_x[:, 0] = cur
        chains_ll[:, 0] = cur_ll

        # Per-chain streams, drawn up-front so the step loop can run
        # vectorised across chains.
        z = np.empty((M, P - 1, d))
        u = np.empty((M, P - 1))
        for m in range(M):
            crng = _chain_rng(seed, i, m + 1)
            z[m] = crng.standard_normal((P - 1, d))
            u[m] = crng.random(P - 1)

        for p in range(1, P):
            cur, cur_lt, cur_ll = _mh_update(
                cur, cur_lt, cur_ll, z[:, p - 1], u[:, p - 1], chol, model, t_prev
            )
            chains_x[:, p] = cur
            chains_ll[:, p] = cur_ll

        new_ll = chains_ll.reshape(N)
        if adaptive:
            t_new = solve_next_temperature(new_ll, t_prev, config.ladder[1])
        else:
            t_new = float(fixed_ts[i])
        log_w = (t_new - t_prev) * new_ll
        records.append(
            TemperatureRecord(
                t=t_new,
                particles=chains_x,
                log_lik_values=chains_ll,
                log_weights_unnorm=log_w,
                weights=_normalized(log_w),
                log_z=prev.log_z + float(logsumexp(log_w)) - math.log(N),
            )
        )

    return SmcRun(records=tuple(records), config=config, model=model)


def weighted_estimate(record, f):
    """Weighted particle average sum_j w_j f(x_j)."""
    fv = np.asarray(f(record.flat_particles()), float)
    if not np.all(np.isfinite(fv)):
        raise ParameterError("test function returned non-finite values")
    return float(record.weights @ fv)


def chain_autocovariance(values, q):
    """Order-q sample autocovariance averaged over chains.

    ``values`` has shape (M, P); the mean is the grand mean over all M*P
    entries and the normaliser is 1/(M*P) regardless of q.
    """
    v = np.asarray(values, float)
    if v.ndim != 2:
        raise ParameterError("values must be an (M, P) array")
    m, p = v.shape
    if not 0 <= q <= p - 1:
        raise ParameterError(f"lag q={q} outside [0, {p - 1}]")
    centred = v - v.mean()
    return float(np.sum(centred[:, : p - q] * centred[:, q:]) / (m * p))


def initial_monotone_variance(values):
    """Asymptotic variance by the initial monotone sequence truncation.

    Sums gamma_0 + 2 * sum_{q=1}^{L} gamma_q where L is the last lag for
    which the autocovariances stay positive and non-increasing; the result
    is clamped below at zero.
    """
    v = np.asarray(values, float)
    if v.ndim != 2 or v.shape[1] < 2:
        raise ParameterError("values must be an (M, P) array with P >= 2")
    centred = v - v.mean()
    m, p = v.shape
    gamma0 = float(np.sum(centred ** 2) / (m * p))
    total = gamma0
    prev = np.inf
    for q in range(1, p):
        gamma_q = float(np.sum(centred[:, : p - q] * centred[:, q:]) / (m * p))
        if gamma_q <= 0 or gamma_q > prev:
            break
        total += 2.0 * gamma_q
        prev = gamma_q
    return max(total, 0.0)


def asymptotic_variance(record, f):
    """Single-run asymptotic variance of the weighted estimator of f.

    Applies the initial monotone sequence estimator to the per-sample values
    Gtilde * (f - ghat), where Gtilde is the reweighting potential scaled to
    unit mean (identically 1 for the t=0 record).  The variance of the
    estimator itself is this quantity divided by N.
    """
    m, p = record.shape
    fv = np.asarray(f(record.flat_particles()), float)
    if not np.all(np.isfinite(fv)):
        raise ParameterError("test function returned non-finite values")
    g_hat = float(record.weights @ fv)
    g_tilde = record.weights * (m * p)
    vals = (g_tilde * (fv - g_hat)).reshape(m, p)
    return initial_monotone_variance(vals)


# ---------------------------------------------------------------------------
# Persistence

_FLOAT_FMT = "%.17g"


def save_run(run, directory):
    """Persist a run as metadata plus one CSV per temperature.

    CSV columns are chain, step, x1..xd, log_lik, log_weight_unnorm, written
    at 17 significant digits so the round-trip through :func:`load_run` is
    bit-exact.
    """
    os.makedirs(directory, exist_ok=True)
    cfg = run.config
    meta = {
        "model_id": run.model.model_id if run.model is not None else None,
        "model_params": run.model.params if run.model is not None else {},
        "seed": cfg.seed,
        "M": cfg.M,
        "P": cfg.P,
        "ladder_kind": cfg.ladder[0],
        "ladder_arg": (
            cfg.ladder[1]
            if cfg.ladder[0] == "adaptive"
            else [float(t) for t in cfg.ladder[1]]
        ),
        "kernel": {
            "n_adapt_scale": cfg.kernel.n_adapt_scale,
            "cov_regularizer": cfg.kernel.cov_regularizer,
        },
        "temperatures": [repr(float(r.t)) for r in run.records],
    }
    with open(os.path.join(directory, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    d = run.records[0].particles.shape[2]
    header = "chain,step," + ",".join(f"x{k + 1}" for k in range(d))
    header += ",log_lik,log_weight_unnorm"
    for i, rec in enumerate(run.records):
        m, p = rec.shape
        chain_col = np.repeat(np.arange(m), p)
        step_col = np.tile(np.arange(p), m)
        body = np.column_stack(
            [
                chain_col,
                step_col,
                rec.flat_particles(),
                rec.log_lik_values.reshape(m * p),
                rec.log_weights_unnorm,
            ]
        )
        fmt = ["%d", "%d"] + [_FLOAT_FMT] * (d + 2)
        np.savetxt(
            os.path.join(directory, f"temperature_{i:04d}.csv"),
            body,
            fmt=fmt,
            delimiter=",",
            header=header,
            comments="",
        )


def load_run(directory, model=None):
    """Rebuild a run saved by :func:`save_run`.

    Weights and log normalising constants are recomputed from the stored
    reweighting exponents through the same code path as the sampler, so a
    save/load round-trip reproduces them exactly.  When ``model`` is None the
    model is rebuilt from the stored id where possible.
    """
    with open(os.path.join(directory, "metadata.json")) as fh:
        meta = json.load(fh)
    if model is None and meta["model_id"] is not None:
        try:
            built = build_model(meta["model_id"], meta["model_params"])
            model = built[0] if isinstance(built, tuple) else built
        except ParameterError:
            model = None
    ladder = (
        ("adaptive", meta["ladder_arg"])
        if meta["ladder_kind"] == "adaptive"
        else ("fixed", tuple(meta["ladder_arg"]))
    )
    config = SmcConfig(
        M=meta["M"],
        P=meta["P"],
        ladder=ladder,
        kernel=RwKernelConfig(**meta["kernel"]),
        seed=meta["seed"],
    )
    m_chains, p_steps = config.M, config.P
    records = []
    log_z = 0.0
    for i, t_repr in enumerate(meta["temperatures"]):
        t = float(t_repr)
        body = np.loadtxt(
            os.path.join(directory, f"temperature_{i:04d}.csv"),
            delimiter=",",
            skiprows=1,
            ndmin=2,
        )
        d = body.shape[1] - 4
        particles = body[:, 2 : 2 + d].reshape(m_chains, p_steps, d)
        ll = body[:, 2 + d].reshape(m_chains, p_steps)
        log_w = body[:, 3 + d]
        if i == 0:
            weights = np.full(m_chains * p_steps, 1.0 / (m_chains * p_steps))
        else:
            weights = _normalized(log_w)
            log_z += float(logsumexp(log_w)) - math.log(m_chains * p_steps)
        records.append(
            TemperatureRecord(
                t=t,
                particles=particles,
                log_lik_values=ll,
                log_weights_unnorm=log_w,
                weights=weights,
                log_z=log_z,
            )
        )
    return SmcRun(records=tuple(records), config=config, model=model)
