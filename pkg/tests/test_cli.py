"""Config validation, experiment orchestration, output files, subcommands."""

import csv
import json
import math

import numpy as np
import pytest

from dualrater.cli import ConfigError, ExperimentConfig, main, run_experiment
from dualrater.metrics import BudgetCurve, CurvePoint, effective_budget


def _config_payload(**overrides):
    payload = {
        "source": {"kind": "synthetic", "family": "gaussian", "nu": 1.0, "mu": 0.2, "eta": 0.2},
        "cost_ratio": 0.1,
        "budgets": [30.0, 60.0],
        "policies": ["base", "random", "active"],
        "mode": "analytic",
        "trials": 40,
        "seed": 11,
    }
    payload.update(overrides)
    return payload


import dualrater
from pathlib import Path

DEMO = str(Path(dualrater.__file__).parent / "data_files" / "demo_replay.csv")


class TestConfigValidation:
    def test_round_trips_through_dict(self):
        config = ExperimentConfig.from_dict(_config_payload())
        again = ExperimentConfig.from_dict(config.to_dict())
        assert again == config

    @pytest.mark.parametrize(
        "overrides",
        [
            {"mode": "magic"},
            {"policies": ["base", "lazy"]},
            {"policies": []},
            {"budgets": [10.0, 10.0]},
            {"budgets": []},
            {"budgets": [0.5]},
            {"trials": 0},
            {"burnin": 1},
            {"workers": 0},
            {"source": {"kind": "nowhere"}},
            {"mode": "transfer"},
        ],
    )
    def test_rejections(self, overrides):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(_config_payload(**overrides))

    def test_needs_costs(self):
        payload = _config_payload()
        del payload["cost_ratio"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(payload)

    def test_explicit_costs_win(self):
        config = ExperimentConfig.from_dict(
            _config_payload(costs={"c_g": 1.0, "c_h": 4.0}, cost_ratio=None, budgets=[30.0, 60.0])
        )
        assert config.costs.c_h == 4.0


class TestRunExperiment:
    def test_base_policy_matches_classical_mean(self):
        config = ExperimentConfig.from_dict(
            _config_payload(policies=["base"], budgets=[200.0], trials=2000, seed=5)
        )
        result = run_experiment(config)
        steps = math.floor((200.0 - 0.1) / 1.1)
        expected = 1.0 / steps
        observed = result.curves["base"].points[0].mse
        assert observed == pytest.approx(expected, rel=0.12)

    def test_deterministic_outputs(self, tmp_path):
        curves, summaries = [], []
        for run in range(2):
            out = tmp_path / f"run{run}"
            config = ExperimentConfig.from_dict(_config_payload(output=str(out)))
            run_experiment(config)
            curves.append((out / "curves.csv").read_bytes())
            summary = json.loads((out / "summary.json").read_text())
            summary["config"].pop("output")  # the only intended difference
            summaries.append(summary)
        assert curves[0] == curves[1]
        assert summaries[0] == summaries[1]

    def test_parallel_trials_match_serial(self):
        serial = run_experiment(ExperimentConfig.from_dict(_config_payload(trials=16)))
        parallel = run_experiment(
            ExperimentConfig.from_dict(_config_payload(trials=16, workers=2))
        )
        for name in serial.estimates:
            for a, b in zip(serial.estimates[name], parallel.estimates[name]):
                np.testing.assert_array_equal(a, b)

    def test_analytic_ratio_trend_in_weak_rater_error(self):
        ratios = []
        for mu in (0.05, 0.2, 0.5):
            payload = _config_payload(trials=1, policies=["active"])
            payload["source"]["mu"] = mu
            result = run_experiment(ExperimentConfig.from_dict(payload))
            ratios.append(result.analytic_error_ratio_vs_base["active"])
        assert ratios[0] < ratios[1] < ratios[2]

    def test_burnin_mode_runs_all_policies(self):
        payload = {
            "source": {"kind": "synthetic", "family": "bernoulli", "nu": 0.25, "mu": 0.05, "eta": 0.002},
            "cost_ratio": 0.1,
            "budgets": [60.0],
            "policies": ["base", "random", "active", "oracle"],
            "mode": "burnin",
            "burnin": 50,
            "trials": 50,
            "seed": 2,
        }
        result = run_experiment(ExperimentConfig.from_dict(payload))
        assert set(result.curves) == {"base", "random", "active", "oracle"}
        assert result.analytic_error_ratio_vs_base is None

    def test_power_tuning_does_not_hurt(self):
        # the weak score sits above the strong one here, so down-weighting
        # it should help; paired seeds make the comparison tight
        base_payload = _config_payload(policies=["random"], budgets=[150.0], trials=400, seed=17)
        plain = run_experiment(ExperimentConfig.from_dict(base_payload))
        tuned = run_experiment(
            ExperimentConfig.from_dict({**base_payload, "power_tuning": True})
        )
        mse_plain = plain.curves["random"].points[0].mse
        mse_tuned = tuned.curves["random"].points[0].mse
        assert mse_tuned <= mse_plain * 1.05

    def test_replay_transfer_mode(self):
        payload = {
            "source": {"kind": "replay", "dataset": DEMO},
            "cost_ratio": 0.1,
            "budgets": [30.0, 60.0],
            "policies": ["base", "active", "oracle"],
            "mode": "transfer",
            "trials": 60,
            "seed": 3,
        }
        result = run_experiment(ExperimentConfig.from_dict(payload))
        assert result.analytic_error_ratio_vs_base["active"] < 0.5
        assert result.curves["active"].points[0].mse < result.curves["base"].points[0].mse


def _binary_replay_table(path, n, seed, slope=0.8, shift=0.3):
    """Probability-scored weak rater with a miscalibrated score, binary strong."""
    from dualrater.data import ReplayDataset, save_dataset

    rng = np.random.default_rng(seed)
    q = np.clip(rng.beta(0.3, 0.3, size=n), 0.02, 0.98)
    h = (rng.random(n) < q).astype(float)
    logit = np.log(q / (1 - q))
    g = 1.0 / (1.0 + np.exp(-(slope * logit + shift)))
    ds = ReplayDataset.from_rows(np.arange(n), g, h)
    save_dataset(ds, path)
    return ds


class TestCalibratedReplayPipelines:
    def test_transfer_with_platt_beats_baseline(self, tmp_path):
        eval_path = tmp_path / "eval.csv"
        train_path = tmp_path / "train.csv"
        _binary_replay_table(eval_path, 2500, seed=31)
        _binary_replay_table(train_path, 2500, seed=32)
        payload = {
            "source": {"kind": "replay", "dataset": str(eval_path), "transfer": str(train_path)},
            "cost_ratio": 0.1,
            "budgets": [100.0],
            "policies": ["base", "random", "active"],
            "mode": "transfer",
            "trials": 400,
            "seed": 33,
        }
        result = run_experiment(ExperimentConfig.from_dict(payload))
        ratios = result.analytic_error_ratio_vs_base
        assert ratios["active"] <= ratios["random"] < 1.0
        mse = {name: curve.points[0].mse for name, curve in result.curves.items()}
        assert mse["active"] < mse["base"]
        assert mse["random"] < mse["base"]

    def test_burnin_mode_on_replay_data(self):
        payload = {
            "source": {"kind": "replay", "dataset": DEMO},
            "cost_ratio": 0.1,
            "budgets": [60.0],
            "policies": ["base", "active"],
            "mode": "burnin",
            "burnin": 150,
            "trials": 250,
            "seed": 34,
        }
        result = run_experiment(ExperimentConfig.from_dict(payload))
        mse = {name: curve.points[0].mse for name, curve in result.curves.items()}
        assert mse["active"] < mse["base"]

    def test_summary_config_echo_replays_exactly(self, tmp_path):
        first = tmp_path / "first"
        config = ExperimentConfig.from_dict(_config_payload(output=str(first), trials=25))
        run_experiment(config)
        echoed = json.loads((first / "summary.json").read_text())["config"]
        echoed["output"] = str(tmp_path / "second")
        run_experiment(ExperimentConfig.from_dict(echoed))
        assert (first / "curves.csv").read_bytes() == (
            tmp_path / "second" / "curves.csv"
        ).read_bytes()


class TestEmitResults:
    def test_schema_and_consistency(self, tmp_path):
        config = ExperimentConfig.from_dict(_config_payload(output=str(tmp_path / "out")))
        result = run_experiment(config)
        curves_path = tmp_path / "out" / "curves.csv"
        with open(curves_path, newline="") as fh:
            reader = csv.DictReader(fh)
            assert reader.fieldnames == [
                "policy",
                "budget",
                "mse",
                "ci_low",
                "ci_high",
                "effective_budget",
                "cost_savings",
            ]
            rows = list(reader)
        assert len(rows) == 3 * 2  # policies x budgets

        # summary round-trips through the config loader and the metrics module
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert ExperimentConfig.from_dict(summary["config"]) == config
        base_rows = [r for r in rows if r["policy"] == "base"]
        base_curve = BudgetCurve(
            policy="base",
            points=[
                CurvePoint(
                    budget=float(r["budget"]),
                    mse=float(r["mse"]),
                    ci_low=float(r["ci_low"]),
                    ci_high=float(r["ci_high"]),
                )
                for r in base_rows
            ],
        )
        for row in rows:
            recomputed = effective_budget(base_curve, float(row["mse"])).budget
            assert float(row["effective_budget"]) == pytest.approx(recomputed, rel=1e-9)
            assert float(row["cost_savings"]) == pytest.approx(
                recomputed - float(row["budget"]), rel=1e-9, abs=1e-9
            )

    def test_traces_written(self, tmp_path):
        config = ExperimentConfig.from_dict(
            _config_payload(output=str(tmp_path / "out"), trace_trials=2, trials=3)
        )
        run_experiment(config)
        traces = sorted((tmp_path / "out" / "traces").glob("*.csv"))
        assert len(traces) == 3 * 2 * 2  # policies x budgets x traced trials
        header = traces[0].read_text().splitlines()[0]
        assert header == "t,x_id,g,h,xi,pi_x,delta,cumulative_cost"


class TestCommandLine:
    def test_simulate_exit_zero(self, tmp_path, capsys):
        code = main(
            [
                "simulate",
                "--family", "gaussian",
                "--nu", "1.0", "--mu", "0.2", "--eta", "0.2",
                "--cost-ratio", "0.1",
                "--budgets", "30,60",
                "--policies", "base,random",
                "--mode", "analytic",
                "--trials", "20",
                "--seed", "1",
                "--out", str(tmp_path / "sim"),
            ]
        )
        assert code == 0
        assert (tmp_path / "sim" / "summary.json").exists()

    def test_replay_exit_zero(self, tmp_path):
        code = main(
            [
                "replay",
                "--dataset", DEMO,
                "--cost-ratio", "0.1",
                "--budgets", "30",
                "--policies", "base,active",
                "--trials", "20",
                "--seed", "1",
                "--out", str(tmp_path / "rep"),
            ]
        )
        assert code == 0

    def test_replay_quartile_split(self, tmp_path):
        code = main(
            [
                "replay",
                "--dataset", DEMO,
                "--split-quartiles",
                "--cost-ratio", "0.1",
                "--budgets", "30",
                "--policies", "base,active",
                "--trials", "15",
                "--seed", "4",
            ]
        )
        assert code == 0

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(_config_payload(trials=10)))
        code = main(["simulate", "--config", str(cfg), "--trials", "5", "--seed", "9"])
        assert code == 0

    def test_toml_config(self, tmp_path):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(
            "\n".join(
                [
                    "cost_ratio = 0.1",
                    "budgets = [30.0]",
                    'policies = ["base"]',
                    'mode = "analytic"',
                    "trials = 5",
                    "seed = 1",
                    "[source]",
                    'kind = "synthetic"',
                    'family = "gaussian"',
                    "nu = 1.0",
                    "mu = 0.2",
                    "eta = 0.2",
                ]
            )
        )
        assert main(["simulate", "--config", str(cfg)]) == 0

    def test_config_error_exit_code(self):
        code = main(
            ["simulate", "--family", "gaussian", "--nu", "1", "--mu", "0.2", "--eta", "0.2",
             "--cost-ratio", "0.1", "--budgets", "30", "--mode", "transfer", "--trials", "5"]
        )
        assert code == 2

    def test_data_error_exit_code(self, tmp_path):
        code = main(
            ["replay", "--dataset", str(tmp_path / "missing.csv"), "--cost-ratio", "0.1",
             "--budgets", "30", "--trials", "5"]
        )
        assert code == 3

    def test_policy_subcommand(self, capsys):
        code = main(["policy", "--var-h", "0.5", "--mse", "0.1", "--c-g", "1", "--c-h", "4"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["random"]["p"] == pytest.approx(0.25)

    def test_design_subcommand(self, tmp_path):
        table = tmp_path / "in.csv"
        table.write_text("x_id,p,nu\na,0.5,1\nb,0.5,4\n")
        out = tmp_path / "design.csv"
        assert main(["design", "--input", str(table), "--out", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert float(rows[0]["q_star"]) == pytest.approx(1 / 3)
        assert float(rows[1]["q_star"]) == pytest.approx(2 / 3)
