import csv

import numpy as np
import pytest

from elate.errors import ParameterError
from elate.experiment import (
    ExperimentConfig,
    emit_plot_data,
    gold_standard,
    load_config,
    make_test_function,
    mix_seed,
    run_experiment,
)
from elate.models import gaussian_location_model, gaussian_mixture_model


class TestMixSeed:
    def test_deterministic_and_distinct(self):
        seeds = [mix_seed(1234, i) for i in range(100)]
        assert seeds == [mix_seed(1234, i) for i in range(100)]
        assert len(set(seeds)) == 100

    def test_master_seed_matters(self):
        assert mix_seed(1, 0) != mix_seed(2, 0)


class TestMakeTestFunction:
    def test_coordinate_variants(self):
        model, _ = gaussian_mixture_model()
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert make_test_function("coordinate:1", model)(x).tolist() == [2.0, 4.0]
        assert make_test_function("coordinate_squared", model)(x).tolist() == [1.0, 9.0]
        assert make_test_function("coordinate_sum", model)(x).tolist() == [3.0, 7.0]

    def test_sin_scaled(self):
        model, _ = gaussian_mixture_model()
        f = make_test_function("sin_scaled:0:100", model)
        x = np.array([[0.02, 0.0]])
        assert f(x)[0] == pytest.approx(np.sin(2.0))

    def test_log_lik(self):
        model, _ = gaussian_location_model(0.0, 1.0, 1.0, [2.0])
        f = make_test_function("log_lik", model)
        x = np.array([[0.0]])
        assert f(x)[0] == pytest.approx(model.log_lik(np.zeros(1)))

    def test_validation(self):
        model, _ = gaussian_location_model(0.0, 1.0, 1.0, [2.0])
        with pytest.raises(ParameterError):
            make_test_function("coordinate:3", model)
        with pytest.raises(ParameterError):
            make_test_function("mystery", model)


class TestGoldStandard:
    def test_oracle_values(self):
        config = ExperimentConfig(model_id="gaussian_location")
        model, oracle = gaussian_location_model(0.0, 1.0, 1.0, [2.0])
        value, se = gold_standard(model, oracle, "coordinate:0", config)
        assert value == 1.0 and se is None
        value, _ = gold_standard(model, oracle, "log_z", config)
        assert value == pytest.approx(-2.2655, abs=1e-4)

    def test_mixture_oracle(self):
        config = ExperimentConfig(model_id="gaussian_mixture")
        model, oracle = gaussian_mixture_model()
        value, se = gold_standard(model, oracle, "coordinate_squared:0", config)
        assert value == pytest.approx(7.4831, abs=1e-3)

    def test_requires_budget_without_oracle(self):
        from elate.models import mrna_model

        config = ExperimentConfig(model_id="mrna", gold_runs=0)
        model = mrna_model(rng_seed=0)
        with pytest.raises(ParameterError):
            gold_standard(model, None, "coordinate:1", config)

    def test_brute_force_self_consistency(self):
        # two independent small gold runs agree within 3 combined SE
        from elate.models import mrna_model

        model = mrna_model(rng_seed=0)
        cfg_a = ExperimentConfig(
            model_id="mrna", seed=1, gold_runs=3, gold_M=20, gold_P=100
        )
        cfg_b = ExperimentConfig(
            model_id="mrna", seed=2, gold_runs=3, gold_M=20, gold_P=100
        )
        va, sa = gold_standard(model, None, "coordinate:1", cfg_a)
        vb, sb = gold_standard(model, None, "coordinate:1", cfg_b)
        assert abs(va - vb) < 3 * np.sqrt(sa ** 2 + sb ** 2) + 1e-6


class TestRunExperiment:
    def test_single_seed_single_method(self, tmp_path):
        config = ExperimentConfig(
            model_id="gaussian_location",
            model_params={"mu0": 0.0, "sigma0": 1.0, "sigma": 1.0, "data": [2.0]},
            M=10,
            P=40,
            methods=("smc",),
            f_spec="coordinate:0",
            n_seeds=1,
            seed=7,
            output_dir=str(tmp_path / "out"),
        )
        table, ti_table = run_experiment(config)
        assert ti_table is None
        assert set(table.rows) == {"smc"}
        mse, se, n = table.rows["smc"]
        assert n == 1 and se == 0.0
        # MSE is the squared error against the exact posterior mean
        with open(tmp_path / "out" / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        est = float(rows[0]["estimate"])
        assert mse == pytest.approx((est - 1.0) ** 2)

    def test_methods_share_one_run_per_seed(self, tmp_path):
        config = ExperimentConfig(
            model_id="gaussian_location",
            model_params={"data": [2.0]},
            M=10,
            P=40,
            methods=("smc", "e_smc", "it", "e_it"),
            n_seeds=2,
            seed=3,
            bootstrap=20,
            output_dir=str(tmp_path / "out"),
        )
        table, _ = run_experiment(config)
        with open(tmp_path / "out" / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        by_seed = {}
        for row in rows:
            by_seed.setdefault(row["seed_index"], set()).add(row["run_hash"])
        for hashes in by_seed.values():
            assert len(hashes) == 1  # same persisted run for all methods
        assert all(v[2] == 2 for v in table.rows.values())

    def test_ti_all_writes_result_csv(self, tmp_path):
        config = ExperimentConfig(
            model_id="gaussian_location",
            model_params={"data": [2.0]},
            M=10,
            P=40,
            methods=("smc", "ti_all"),
            n_seeds=1,
            seed=5,
            bootstrap=20,
            output_dir=str(tmp_path / "out"),
        )
        _, ti_table = run_experiment(config)
        assert ti_table is not None
        with open(tmp_path / "out" / "ti_results.csv") as fh:
            rows = list(csv.DictReader(fh))
        methods = {row["method"] for row in rows}
        assert methods == {"trapezoid", "simpson", "smc", "elate_bq", "elate_v2"}
        for row in rows:
            assert np.isfinite(float(row["log_z1"]))
            has_var = row["variance"] != ""
            assert has_var == (row["method"] in ("elate_bq", "elate_v2"))

    def test_reproducible_csv_bytes(self, tmp_path):
        def run_once(out):
            config = ExperimentConfig(
                model_id="gaussian_location",
                model_params={"data": [2.0]},
                M=8,
                P=25,
                methods=("smc", "e_smc"),
                n_seeds=2,
                seed=11,
                output_dir=str(out),
            )
            run_experiment(config)
            return (out / "results.csv").read_bytes()

        first = run_once(tmp_path / "a")
        second = run_once(tmp_path / "b")
        # elapsed-time column varies; compare rows without it
        strip = lambda b: [ln.rsplit(b",", 1)[0] for ln in b.splitlines()]
        assert strip(first) == strip(second)

    def test_table_render_marks_best(self, tmp_path):
        config = ExperimentConfig(
            model_id="gaussian_location",
            model_params={"data": [2.0]},
            M=10,
            P=40,
            methods=("smc", "it"),
            n_seeds=2,
            seed=1,
            bootstrap=10,
            output_dir=str(tmp_path / "out"),
        )
        table, _ = run_experiment(config)
        text = table.render()
        assert "**" in text
        assert "gold=" in text

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            ExperimentConfig(model_id="gaussian_location", n_seeds=0)
        with pytest.raises(ParameterError):
            ExperimentConfig(model_id="gaussian_location", methods=("wat",))


class TestEmitPlotData:
    def test_files_and_shapes(self, tmp_path):
        from elate.estimators import build_dataset
        from elate.gp import fit
        from elate.smc import SmcConfig, run_waste_free_smc

        model, _ = gaussian_location_model(0.0, 1.0, 1.0, [2.0])
        run = run_waste_free_smc(
            model, SmcConfig(M=20, P=50, ladder=("adaptive", 0.7), seed=2)
        )
        f = lambda x: x[:, 0]
        ds = build_dataset(run, f, source="smc")
        gp_model = fit(ds)
        prefix = str(tmp_path / "plot")
        emit_plot_data(run, gp_model, f, prefix)

        with open(prefix + "_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 201
        assert float(rows[0]["t"]) == 0.0 and float(rows[-1]["t"]) == 1.0
        for row in rows:
            assert float(row["lower"]) <= float(row["mean"]) <= float(row["upper"])

        with open(prefix + "_data.csv") as fh:
            data_rows = list(csv.DictReader(fh))
        assert len(data_rows) == len(ds)
        with open(prefix + "_grad_curve.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 201

    def test_band_tight_at_noise_free_datum(self, tmp_path):
        from elate.estimators import ExpectationDatum, RegressionDataset
        from elate.gp import KernelParams, RationalMean, condition

        ds = RegressionDataset(
            data=(
                ExpectationDatum(t=0.0, g_hat=1.0, g_var=0.0),
                ExpectationDatum(t=0.5, g_hat=2.0, g_var=0.0),
                ExpectationDatum(t=1.0, g_hat=3.0, g_var=0.0),
            ),
            horizon_index=3,
        )
        gp_model = condition(RationalMean(numerator=(0.0,)), KernelParams(2.0, 0.5), ds)
        prefix = str(tmp_path / "nf")
        emit_plot_data(None, gp_model, None, prefix)
        with open(prefix + "_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        at_half = [r for r in rows if abs(float(r["t"]) - 0.5) < 1e-9][0]
        assert float(at_half["upper"]) - float(at_half["lower"]) < 1e-6


class TestLoadConfig:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(
            "[model]\n"
            "id = gaussian_location\n"
            "mu0 = 0.0\n"
            "sigma0 = 1.0\n"
            "sigma = 1.0\n"
            "data = 2.0\n"
            "\n"
            "[smc]\n"
            "m = 25\n"
            "p = 80\n"
            "ess_min = 0.8\n"
            "\n"
            "[experiment]\n"
            "methods = smc, e_smc\n"
            "f_spec = coordinate:0\n"
            "n_seeds = 3\n"
            "horizon = 0.9\n"
            "with_gradients = true\n"
            "seed = 99\n"
            "output_dir = results\n"
        )
        config = load_config(path)
        assert config.model_id == "gaussian_location"
        assert config.model_params["data"] == [2.0]
        assert config.M == 25 and config.P == 80
        assert config.ess_min == 0.8
        assert config.methods == ("smc", "e_smc")
        assert config.n_seeds == 3
        assert config.horizon == 0.9
        assert config.seed == 99

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParameterError):
            load_config(tmp_path / "nope.cfg")

    def test_unknown_model_param(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[model]\nid = gaussian_location\nwhat = 1\n")
        with pytest.raises(ParameterError):
            load_config(path)
