"""Command-line entry points.

Subcommands: ``smc run``, ``elate fit``, ``it estimate``, ``ti estimate``,
``experiment run``, ``plotdata``.  All outputs are CSV with headers (plus a
text dump for fitted models).  Exit codes: 0 success, 2 configuration or
usage error, 3 numerical failure.
"""

import argparse
import csv
import sys

import numpy as np

from .errors import DataError, NumericalError, ParameterError
from .estimators import build_dataset, it_bootstrap_variance, it_estimate
from .experiment import (
    emit_plot_data,
    load_config,
    make_test_function,
    run_experiment,
)
from .gp import fit, posterior_predict, save_model_summary
from .models import build_model
from .quadrature import ti_baselines, ti_elate, ti_elate_v2
from .smc import SmcConfig, load_run, run_waste_free_smc, save_run


def _add_model_args(parser):
    parser.add_argument("--model", required=True,
                        help="model id (gaussian_location, gaussian_mixture, mrna, logistic)")
    parser.add_argument("--mu0", type=float)
    parser.add_argument("--sigma0", type=float)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--data", help="comma-separated observations (gaussian_location)")
    parser.add_argument("--rng-seed", type=int, dest="rng_seed")
    parser.add_argument("--cauchy-prior", action="store_true", default=None)
    parser.add_argument("--data-path", dest="data_path", help="CSV path (logistic)")


def _model_params(args):
    params = {}
    for key in ("mu0", "sigma0", "sigma", "rng_seed", "cauchy_prior", "data_path"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    if getattr(args, "data", None):
        params["data"] = [float(v) for v in args.data.split(",")]
    return params


def _build(args):
    built = build_model(args.model, _model_params(args))
    return built if isinstance(built, tuple) else (built, None)


def _load_run_arg(args):
    return load_run(args.run)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="elate",
        description="Tempered-expectation extrapolation for waste-free SMC output",
    )
    groups = parser.add_subparsers(dest="group", required=True)

    smc = groups.add_parser("smc", help="sampler commands")
    smc_sub = smc.add_subparsers(dest="command", required=True)
    smc_run = smc_sub.add_parser("run", help="run waste-free SMC and persist the output")
    _add_model_args(smc_run)
    smc_run.add_argument("--m", type=int, required=True, help="resampled ancestors")
    smc_run.add_argument("--p", type=int, required=True, help="chain length")
    smc_run.add_argument("--ess-min", type=float, default=0.7)
    smc_run.add_argument("--ladder", help="comma-separated fixed temperatures")
    smc_run.add_argument("--seed", type=int, default=0)
    smc_run.add_argument("--out", required=True, help="output directory")

    elate = groups.add_parser("elate", help="regression commands")
    elate_sub = elate.add_subparsers(dest="command", required=True)
    elate_fit = elate_sub.add_parser("fit", help="fit the GP and predict at t=1")
    elate_fit.add_argument("--run", required=True, help="persisted run directory")
    elate_fit.add_argument("--f", default="coordinate:0", help="test function spec")
    elate_fit.add_argument("--source", choices=("smc", "it"), default="smc")
    elate_fit.add_argument("--horizon", type=float, default=1.0)
    elate_fit.add_argument("--no-gradients", action="store_true")
    elate_fit.add_argument("--bootstrap", type=int, default=100)
    elate_fit.add_argument("--out", required=True, help="output file prefix")

    it = groups.add_parser("it", help="importance tempering commands")
    it_sub = it.add_subparsers(dest="command", required=True)
    it_est = it_sub.add_parser("estimate", help="importance-tempering estimate at t=1")
    it_est.add_argument("--run", required=True)
    it_est.add_argument("--f", default="coordinate:0")
    it_est.add_argument("--bootstrap", type=int, default=100)
    it_est.add_argument("--out", required=True, help="output CSV")

    ti = groups.add_parser("ti", help="thermodynamic integration commands")
    ti_sub = ti.add_subparsers(dest="command", required=True)
    ti_est = ti_sub.add_parser("estimate", help="log marginal likelihood, all methods")
    ti_est.add_argument("--run", required=True)
    ti_est.add_argument("--bootstrap", type=int, default=100)
    ti_est.add_argument("--out", required=True, help="output CSV")

    exp = groups.add_parser("experiment", help="multi-seed experiment commands")
    exp_sub = exp.add_subparsers(dest="command", required=True)
    exp_run = exp_sub.add_parser("run", help="run an experiment from a config file")
    exp_run.add_argument("--config", required=True)
    exp_run.add_argument("--out", help="override output directory")

    plot = groups.add_parser("plotdata", help="emit scatter and fitted-curve CSVs")
    plot.add_argument("--run", required=True)
    plot.add_argument("--f", default="coordinate:0")
    plot.add_argument("--source", choices=("smc", "it"), default="smc")
    plot.add_argument("--horizon", type=float, default=1.0)
    plot.add_argument("--no-gradients", action="store_true")
    plot.add_argument("--bootstrap", type=int, default=100)
    plot.add_argument("--out", required=True, help="output file prefix")
    return parser


def _cmd_smc_run(args):
    model, _ = _build(args)
    ladder = (
        ("fixed", tuple(float(t) for t in args.ladder.split(",")))
        if args.ladder
        else ("adaptive", args.ess_min)
    )
    cfg = SmcConfig(M=args.m, P=args.p, ladder=ladder, seed=args.seed)
    run = run_waste_free_smc(model, cfg)
    save_run(run, args.out)
    print(f"run with {len(run.records)} temperatures saved to {args.out}")
    print(f"log_z(1) = {run.log_z:.6g}")


def _fit_on_run(args):
    run = _load_run_arg(args)
    if run.model is None:
        raise ParameterError("run directory lacks a reconstructible model")
    f = make_test_function(args.f, run.model)
    dataset = build_dataset(
        run,
        f,
        source=args.source,
        horizon=args.horizon,
        with_gradients=not args.no_gradients,
        B=args.bootstrap,
    )
    return run, dataset, fit(dataset)


def _cmd_elate_fit(args):
    _, dataset, model = _fit_on_run(args)
    save_model_summary(model, f"{args.out}_model.txt")
    mean, var = posterior_predict(model, 1.0)
    with open(f"{args.out}_estimate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimate", "variance", "source", "horizon", "n_data"])
        writer.writerow(
            [f"{mean:.17g}", f"{var:.17g}", args.source, args.horizon, len(dataset)]
        )
    print(f"estimate at t=1: {mean:.6g} (sd {np.sqrt(max(var, 0)):.3g})")


def _cmd_it_estimate(args):
    run = _load_run_arg(args)
    if run.model is None:
        raise ParameterError("run directory lacks a reconstructible model")
    f = make_test_function(args.f, run.model)
    k = len(run.records) - 1
    est = it_estimate(run, f, k)
    var = it_bootstrap_variance(run, f, k, B=args.bootstrap)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimate", "variance", "k", "t"])
        writer.writerow([f"{est:.17g}", f"{var:.17g}", k, f"{run.records[k].t:.17g}"])
    print(f"importance-tempering estimate: {est:.6g} (sd {np.sqrt(var):.3g})")


def _cmd_ti_estimate(args):
    run = _load_run_arg(args)
    results = dict(ti_baselines(run))
    results["elate_bq"] = ti_elate(run)
    results["elate_v2"] = ti_elate_v2(run, B=args.bootstrap)
    seed = run.config.seed
    ess_min = run.config.ladder[1] if run.config.ladder[0] == "adaptive" else ""
    model_id = run.model.model_id if run.model is not None else ""
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "log_z1", "variance", "n_nodes", "seed", "model_id", "ess_min"]
        )
        for res in results.values():
            writer.writerow(
                [res.method, f"{res.log_z1:.17g}",
                 "" if res.variance is None else f"{res.variance:.17g}",
                 res.n_nodes, seed, model_id, ess_min]
            )
    for res in results.values():
        print(f"{res.method}: {res.log_z1:.6g}")


def _cmd_experiment_run(args):
    config = load_config(args.config)
    if args.out:
        from dataclasses import replace

        config = replace(config, output_dir=args.out)
    table, ti_table = run_experiment(config)
    print(table.render())
    if ti_table is not None:
        print(ti_table.render())


def _cmd_plotdata(args):
    run, _, model = _fit_on_run(args)
    f = make_test_function(args.f, run.model)
    emit_plot_data(run, model, f, args.out)
    print(f"plot data written with prefix {args.out}")


_HANDLERS = {
    ("smc", "run"): _cmd_smc_run,
    ("elate", "fit"): _cmd_elate_fit,
    ("it", "estimate"): _cmd_it_estimate,
    ("ti", "estimate"): _cmd_ti_estimate,
    ("experiment", "run"): _cmd_experiment_run,
    ("plotdata", None): _cmd_plotdata,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _HANDLERS[(args.group, getattr(args, "command", None))]
    try:
        handler(args)
    except (ParameterError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
