"""Experiment harness: seeded runs, method comparison, result tables.

One experiment = one model, one sampler configuration, a set of
post-processing methods and a number of seeds.  Every seed produces a single
SMC run which is persisted and then shared by all requested methods, so the
comparison isolates post-processing quality from sampling noise.  Squared
errors against a gold standard (exact oracle where available, brute-force
SMC average otherwise) are aggregated into a table of mean MSE with
standard errors.

Per-seed sampler seeds derive from the experiment's master seed through
SplitMix64 (seed_i = splitmix64(master + (i+1) * 0x9E3779B97F4A7C15)), so
tables are reproducible without storing per-run seeds.
"""

import configparser
import csv
import hashlib
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ParameterError
from .estimators import build_dataset, it_bootstrap_variance, it_estimate
from .gp import fit, posterior_predict
from .models import build_model
from .quadrature import ti_baselines, ti_elate, ti_elate_v2
from .smc import (
    SmcConfig,
    asymptotic_variance,
    load_run,
    run_waste_free_smc,
    save_run,
    weighted_estimate,
)

__all__ = [
    "ExperimentConfig",
    "MseTable",
    "make_test_function",
    "mix_seed",
    "gold_standard",
    "run_experiment",
    "emit_plot_data",
    "load_config",
]

EXPECTATION_METHODS = ("smc", "e_smc", "it", "e_it")
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment end to end."""

    model_id: str
    model_params: dict = field(default_factory=dict)
    M: int = 50
    P: int = 100
    ess_min: float = 0.7
    methods: Tuple[str, ...] = ("smc", "e_smc")
    f_spec: str = "coordinate:0"
    n_seeds: int = 1
    horizon: float = 1.0
    with_gradients: bool = True
    seed: int = 0
    bootstrap: int = 100
    output_dir: str = "."
    gold_runs: int = 0
    gold_M: int = 200
    gold_P: int = 500

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ParameterError("n_seeds must be >= 1")
        for m in self.methods:
            if m not in EXPECTATION_METHODS + ("ti_all",):
                raise ParameterError(f"unknown method {m!r}")


@dataclass(frozen=True)
class MseTable:
    """Mean squared error with standard error, one row per method."""

    rows: dict  # method -> (mean_mse, se, n_success)
    config: ExperimentConfig
    gold: float

    def render(self):
        complete = {m: v for m, v in self.rows.items() if v[2] == self.config.n_seeds}
        best = min(complete, key=lambda m: complete[m][0]) if complete else None
        lines = [
            f"model={self.config.model_id} f={self.config.f_spec} "
            f"M={self.config.M} N={self.config.M * self.config.P} "
            f"ess_min={self.config.ess_min} seeds={self.config.n_seeds} "
            f"gold={self.gold:.6g}",
            "method,mse,se,n,best",
        ]
        for m, (mse, se, n) in self.rows.items():
            mark = "**" if m == best else ""
            flag = "" if n == self.config.n_seeds else " (incomplete)"
            lines.append(f"{m},{mse:.6e},{se:.6e},{n},{mark}{flag}")
        return "\n".join(lines)


def mix_seed(master, index):
    """SplitMix64 of the master seed advanced by (index+1) golden-ratio steps."""
    z = (master + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def make_test_function(f_spec, model):
    """Vectorised test function named by an f_spec string.

    Supported: ``coordinate[:i]``, ``coordinate_squared[:i]``,
    ``coordinate_sum``, ``sin_scaled:i:freq``, ``log_lik``.
    """
    parts = f_spec.split(":")
    name = parts[0]
    if name == "log_lik":
        return lambda x: np.asarray(model.log_lik(x), float)
    if name == "coordinate_sum":
        return lambda x: x.sum(axis=1)
    if name in ("coordinate", "coordinate_squared"):
        idx = int(parts[1]) if len(parts) > 1 else 0
        if not 0 <= idx < model.dim:
            raise ParameterError(f"coordinate {idx} out of range for d={model.dim}")
        if name == "coordinate":
            return lambda x: x[:, idx]
        return lambda x: x[:, idx] ** 2
    if name == "sin_scaled":
        if len(parts) != 3:
            raise ParameterError("sin_scaled needs coordinate and frequency")
        idx, freq = int(parts[1]), float(parts[2])
        if not 0 <= idx < model.dim:
            raise ParameterError(f"coordinate {idx} out of range for d={model.dim}")
        return lambda x: np.sin(freq * x[:, idx])
    raise ParameterError(f"unknown test function spec {f_spec!r}")


def gold_standard(model, oracle, f_spec, config):
    """(gold value, standard error or None) for the experiment's target.

    Returns the exact oracle value when one exists; otherwise averages
    ``gold_runs`` brute-force SMC runs at the enlarged (gold_M, gold_P)
    budget.  ``f_spec='log_z'`` targets the log normalising constant.
    """
    if oracle is not None:
        if f_spec == "log_z" and oracle.log_z_exact is not None:
            return float(oracle.log_z_exact(1.0)), None
        if f_spec != "log_z" and oracle.g_exact is not None:
            try:
                return float(oracle.g_exact(f_spec, 1.0)), None
            except ParameterError:
                pass
    if config.gold_runs < 1:
        raise ParameterError(
            "no oracle for this model/function and no brute-force budget configured"
        )
    values = []
    for j in range(config.gold_runs):
        cfg = SmcConfig(
            M=config.gold_M,
            P=config.gold_P,
            ladder=("adaptive", config.ess_min),
            seed=mix_seed(config.seed + 0x601D, j),
        )
        run = run_waste_free_smc(model, cfg)
        if f_spec == "log_z":
            values.append(run.records[-1].log_z)
        else:
            f = make_test_function(f_spec, model)
            values.append(weighted_estimate(run.records[-1], f))
    values = np.asarray(values)
    se = values.std(ddof=1) / np.sqrt(len(values)) if len(values) > 1 else 0.0
    return float(values.mean()), float(se)


def _run_hash(directory):
    """Stable digest of the persisted temperature files."""
    digest = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        if name.endswith(".csv"):
            with open(os.path.join(directory, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()[:16]


def _expectation_estimates(run, f, config, methods):
    """estimate/variance per requested expectation method on one run."""
    out = {}
    last = len(run.records) - 1
    if "smc" in methods:
        est = weighted_estimate(run.records[last], f)
        var = asymptotic_variance(run.records[last], f) / run.config.N
        out["smc"] = (est, var)
    if "it" in methods:
        est = it_estimate(run, f, last)
        var = it_bootstrap_variance(run, f, last, B=config.bootstrap)
        out["it"] = (est, var)
    for method, source in (("e_smc", "smc"), ("e_it", "it")):
        if method in methods:
            dataset = build_dataset(
                run,
                f,
                source=source,
                horizon=config.horizon,
                with_gradients=config.with_gradients,
                B=config.bootstrap,
            )
            model = fit(dataset)
            out[method] = posterior_predict(model, 1.0)
    return out


def run_experiment(config):
    """Run all seeds, persist runs and per-run rows, aggregate the MSE table.

    Returns (MseTable, ti_table_or_None).  Writes into config.output_dir:
    ``runs/seed_<i>/`` (persisted SMC output), ``results.csv`` (one row per
    method and seed), ``ti_results.csv`` when ti_all is requested, and
    ``mse_table.txt``.
    """
    built = build_model(config.model_id, config.model_params)
    model, oracle = built if isinstance(built, tuple) else (built, None)
    f = make_test_function(config.f_spec, model)

    expectation_methods = [m for m in config.methods if m in EXPECTATION_METHODS]
    want_ti = "ti_all" in config.methods
    gold, gold_se = gold_standard(model, oracle, config.f_spec, config)
    gold_z = None
    if want_ti:
        try:
            gold_z, _ = gold_standard(model, oracle, "log_z", config)
        except ParameterError:
            gold_z = None

    os.makedirs(config.output_dir, exist_ok=True)
    rows_path = os.path.join(config.output_dir, "results.csv")
    ti_path = os.path.join(config.output_dir, "ti_results.csv")
    errors = {m: [] for m in expectation_methods}
    ti_errors = {}
    with open(rows_path, "w", newline="") as rows_fh:
        writer = csv.writer(rows_fh)
        writer.writerow(
            ["seed_index", "seed", "run_hash", "method", "estimate", "variance",
             "squared_error", "elapsed_s"]
        )
        ti_fh = None
        if want_ti:
            ti_fh = open(ti_path, "w", newline="")
            ti_writer = csv.writer(ti_fh)
            ti_writer.writerow(
                ["method", "log_z1", "variance", "n_nodes", "seed", "model_id",
                 "ess_min"]
            )
        try:
            for i in range(config.n_seeds):
                seed = mix_seed(config.seed, i)
                smc_cfg = SmcConfig(
                    M=config.M,
                    P=config.P,
                    ladder=("adaptive", config.ess_min),
                    seed=seed,
                )
                t_start = time.time()
                run = run_waste_free_smc(model, smc_cfg)
                run_dir = os.path.join(config.output_dir, "runs", f"seed_{i:04d}")
                save_run(run, run_dir)
                digest = _run_hash(run_dir)
                # all methods consume the persisted run, not the in-memory one
                run = load_run(run_dir, model=model)

                try:
                    estimates = _expectation_estimates(
                        run, f, config, expectation_methods
                    )
                except Exception as exc:  # record per-seed failures, keep going
                    writer.writerow([i, seed, digest, "FAILED", "", "", "", repr(exc)])
                    continue
                elapsed = time.time() - t_start
                for method, (est, var) in estimates.items():
                    sq = (est - gold) ** 2
                    errors[method].append(sq)
                    writer.writerow(
                        [i, seed, digest, method, f"{est:.17g}", f"{var:.17g}",
                         f"{sq:.17g}", f"{elapsed:.3f}"]
                    )
                if want_ti:
                    results = dict(ti_baselines(run))
                    results["elate_bq"] = ti_elate(run)
                    results["elate_v2"] = ti_elate_v2(run, B=config.bootstrap)
                    for name, res in results.items():
                        ti_writer.writerow(
                            [res.method, f"{res.log_z1:.17g}",
                             "" if res.variance is None else f"{res.variance:.17g}",
                             res.n_nodes, seed, model.model_id, config.ess_min]
                        )
                        if gold_z is not None:
                            ti_errors.setdefault(name, []).append(
                                (res.log_z1 - gold_z) ** 2
                            )
        finally:
            if ti_fh is not None:
                ti_fh.close()

    rows = {}
    for method, sq in errors.items():
        if sq:
            arr = np.asarray(sq)
            se = arr.std(ddof=1) / np.sqrt(arr.size) if arr.size > 1 else 0.0
            rows[method] = (float(arr.mean()), float(se), int(arr.size))
    table = MseTable(rows=rows, config=config, gold=gold)
    with open(os.path.join(config.output_dir, "mse_table.txt"), "w") as fh:
        fh.write(table.render() + "\n")

    ti_table = None
    if want_ti and ti_errors:
        ti_rows = {}
        for method, sq in ti_errors.items():
            arr = np.asarray(sq)
            se = arr.std(ddof=1) / np.sqrt(arr.size) if arr.size > 1 else 0.0
            ti_rows[method] = (float(arr.mean()), float(se), int(arr.size))
        ti_table = MseTable(rows=ti_rows, config=config, gold=gold_z)
    return table, ti_table


def emit_plot_data(run, gp_model, f, out_prefix):
    """Write scatter and fitted-curve CSVs for plotting.

    ``<prefix>_data.csv`` holds the per-temperature estimates with 1.96-sigma
    half-widths, ``<prefix>_curve.csv`` a 201-point grid of the GP mean and
    95% band; gradient analogues are written when the dataset carries
    gradient observations.
    """
    dataset = gp_model.dataset
    with open(f"{out_prefix}_data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "g_hat", "half_width", "in_horizon"])
        for i, d in enumerate(dataset.data):
            writer.writerow(
                [f"{d.t:.17g}", f"{d.g_hat:.17g}",
                 f"{1.96 * np.sqrt(d.g_var):.17g}", int(i < dataset.horizon_index)]
            )
    grid = np.linspace(0.0, 1.0, 201)
    mean, var = posterior_predict(gp_model, grid)
    sd = np.sqrt(np.maximum(var, 0.0))
    with open(f"{out_prefix}_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mean", "lower", "upper"])
        for t, m, s in zip(grid, mean, sd):
            writer.writerow(
                [f"{t:.17g}", f"{m:.17g}", f"{m - 1.96 * s:.17g}",
                 f"{m + 1.96 * s:.17g}"]
            )
    if all(d.has_gradient for d in dataset.data):
        with open(f"{out_prefix}_grad_data.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "g_prime_hat", "half_width", "in_horizon"])
            for i, d in enumerate(dataset.data):
                writer.writerow(
                    [f"{d.t:.17g}", f"{d.g_prime_hat:.17g}",
                     f"{1.96 * np.sqrt(d.g_prime_var):.17g}",
                     int(i < dataset.horizon_index)]
                )
        dmean, dvar = posterior_predict(gp_model, grid, derivative=True)
        dsd = np.sqrt(np.maximum(dvar, 0.0))
        with open(f"{out_prefix}_grad_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "mean", "lower", "upper"])
            for t, m, s in zip(grid, dmean, dsd):
                writer.writerow(
                    [f"{t:.17g}", f"{m:.17g}", f"{m - 1.96 * s:.17g}",
                     f"{m + 1.96 * s:.17g}"]
                )


# ---------------------------------------------------------------------------
# Config files

_MODEL_PARAM_TYPES = {
    "mu0": float,
    "sigma0": float,
    "sigma": float,
    "rng_seed": int,
    "cauchy_prior": bool,
    "grid_size": int,
    "grid_halfwidth": float,
    "data_path": str,
    "positive_label": str,
}


def load_config(path):
    """Parse a key = value experiment file with [model]/[smc]/[experiment] sections."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ParameterError(f"cannot read config file {path}")
    try:
        model_id = parser.get("model", "id")
    except (configparser.NoSectionError, configparser.NoOptionError) as exc:
        raise ParameterError(f"config {path} lacks [model] id") from exc
    model_params = {}
    for key, value in parser.items("model"):
        if key == "id":
            continue
        if key == "data":
            model_params["data"] = [float(v) for v in value.split(",")]
        elif key in _MODEL_PARAM_TYPES:
            caster = _MODEL_PARAM_TYPES[key]
            model_params[key] = (
                parser.getboolean("model", key) if caster is bool else caster(value)
            )
        else:
            raise ParameterError(f"unknown model parameter {key!r}")

    def get(section, key, cast, default):
        try:
            if cast is bool:
                return parser.getboolean(section, key)
            return cast(parser.get(section, key))
        except (configparser.NoSectionError, configparser.NoOptionError):
            return default

    methods = tuple(
        m.strip()
        for m in get("experiment", "methods", str, "smc,e_smc").split(",")
        if m.strip()
    )
    return ExperimentConfig(
        model_id=model_id,
        model_params=model_params,
        M=get("smc", "m", int, 50),
        P=get("smc", "p", int, 100),
        ess_min=get("smc", "ess_min", float, 0.7),
        methods=methods,
        f_spec=get("experiment", "f_spec", str, "coordinate:0"),
        n_seeds=get("experiment", "n_seeds", int, 1),
        horizon=get("experiment", "horizon", float, 1.0),
        with_gradients=get("experiment", "with_gradients", bool, True),
        seed=get("experiment", "seed", int, 0),
        bootstrap=get("experiment", "bootstrap", int, 100),
        output_dir=get("experiment", "output_dir", str, "."),
        gold_runs=get("gold", "k", int, 0),
        gold_M=get("gold", "m", int, 200),
        gold_P=get("gold", "p", int, 500),
    )
