"""End-to-end tests for the command-line runner.

Everything drives ``main(argv)`` in process; runs write under pytest tmp
directories via the PPS_OUTPUT_DIR environment variable. Experiment
payloads are kept tiny so the whole module stays fast.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from phonon_pulse_sim.cli import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_PHYSICS,
    RunOutput,
    _figure_checks,
    _value_at,
    main,
    resolve_config,
)
from phonon_pulse_sim.exceptions import ConfigError, ReproduceCheckError


def write_config(tmp_path, name="cfg.json", **entries):
    path = tmp_path / name
    path.write_text(json.dumps(entries))
    return str(path)


def read_manifest(outdir):
    return json.loads((Path(outdir) / "manifest.json").read_text())


def tiny_pure(tmp_path, **extra):
    entries = {
        "experiment": "pure-evolve",
        "integrator": {"t_start": 0.0, "t_end": 60.0, "n_samples": 13},
        "hilbert": {"n_a": 3, "n_b": 12},
    }
    entries.update(extra)
    return write_config(tmp_path, **entries)


def tiny_decay(tmp_path, experiment, **extra):
    entries = {
        "experiment": experiment,
        "pulses": None,
        "initial_state": [0, 2],
        "params": {
            "g": 0.7653668647301795,
            "delta_1": -0.5857864376269049,
            "delta_2": -2.5857864376269049,
            "omega_m": 1.0,
            "kappa": 0.002,
            "gamma_m": 0.0004,
            "n_th": 0.0,
            "theta_b": 0.0,
        },
        "hilbert": {"n_a": 3, "n_b": 12},
        "integrator": {"t_start": 0.0, "t_end": 50000.0, "n_samples": 11},
    }
    entries.update(extra)
    return write_config(tmp_path, **entries)


@pytest.fixture()
def outroot(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("PPS_OUTPUT_DIR", str(root))
    return root


class TestArguments:
    def test_run_needs_config_or_preset(self, capsys):
        assert main(["run"]) == EXIT_CONFIG
        assert "config" in capsys.readouterr().err

    def test_find_gn_prints_ratio(self, capsys):
        assert main(["find-gn", "--n", "2"]) == EXIT_OK
        assert "0.765366864731" in capsys.readouterr().out

    def test_find_gn_requires_n(self):
        with pytest.raises(SystemExit):
            main(["find-gn"])

    def test_reproduce_rejects_unknown_figure(self):
        with pytest.raises(SystemExit):
            main(["reproduce", "fig9"])


class TestConfigResolution:
    def test_unknown_top_level_key(self, tmp_path, outroot, capsys):
        cfg = write_config(tmp_path, experiment="pure-evolve", typo_key=1)
        assert main(["run", "--config", cfg]) == EXIT_CONFIG
        assert "typo_key" in capsys.readouterr().err

    def test_unknown_section_key(self, tmp_path, outroot):
        cfg = write_config(
            tmp_path, experiment="pure-evolve", integrator={"bogus": 1}
        )
        assert main(["run", "--config", cfg]) == EXIT_CONFIG

    def test_unknown_preset(self, outroot):
        assert main(["run", "--preset", "nonexistent"]) == EXIT_CONFIG

    def test_unknown_experiment(self, tmp_path, outroot):
        cfg = write_config(tmp_path, experiment="frobnicate")
        assert main(["run", "--config", cfg]) == EXIT_CONFIG

    def test_malformed_json(self, tmp_path, outroot):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG

    def test_config_error_leaves_no_outputs(self, tmp_path, outroot):
        cfg = write_config(tmp_path, experiment="pure-evolve", typo_key=1)
        main(["run", "--config", cfg])
        assert not outroot.exists()

    def test_set_override_lands_in_manifest(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path)
        assert (
            main(["run", "--config", cfg, "--set", "integrator.n_samples=7"])
            == EXIT_OK
        )
        manifest = read_manifest(outroot / "pure-evolve")
        assert manifest["config"]["integrator"]["n_samples"] == 7

    def test_set_unknown_key_rejected(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path)
        assert main(["run", "--config", cfg, "--set", "params.mass=1"]) == EXIT_CONFIG

    def test_set_on_null_section_rejected(self, tmp_path, outroot):
        cfg = tiny_decay(tmp_path, "master-evolve")
        code = main(["run", "--config", cfg, "--set", "pulses.sigma=5"])
        assert code == EXIT_CONFIG

    def test_set_without_equals_rejected(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path)
        assert main(["run", "--config", cfg, "--set", "n_traj"]) == EXIT_CONFIG

    def test_initial_state_outside_truncation(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path, initial_state=[0, 40])
        assert main(["run", "--config", cfg]) == EXIT_CONFIG

    def test_negative_rate_rejected(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path, params={"kappa": -1.0})
        assert main(["run", "--config", cfg]) == EXIT_CONFIG

    def test_preset_layer_overridable_by_file(self):
        cfg = resolve_config(None, "paper-fig3", ("integrator.n_samples=41",))
        assert cfg["experiment"] == "master-evolve"
        assert cfg["params"]["kappa"] == 0.002
        assert cfg["integrator"]["n_samples"] == 41

    def test_experiment_must_be_selected(self):
        with pytest.raises(ConfigError):
            resolve_config(None, None, ())


class TestRunOutputs:
    def test_pure_evolve_writes_tables_and_manifest(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path)
        assert main(["run", "--config", cfg]) == EXIT_OK
        outdir = outroot / "pure-evolve"
        manifest = read_manifest(outdir)
        for name in manifest["outputs"]:
            assert (outdir / name).exists()
        with open(outdir / "populations.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "time[1/omega_m]"
        assert rows[0][1] == "P_00[1]"
        assert len(rows) == 14
        assert float(rows[1][1]) == pytest.approx(1.0, abs=1e-9)

    def test_values_carry_full_precision(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path)
        main(["run", "--config", cfg])
        with open(outroot / "pure-evolve" / "populations.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        cell = rows[3][1]
        assert float(cell) != round(float(cell), 6)

    def test_master_evolve_reports_trace_check(self, tmp_path, outroot):
        cfg = tiny_decay(tmp_path, "master-evolve")
        assert main(["run", "--config", cfg]) == EXIT_OK
        manifest = read_manifest(outroot / "master-evolve")
        checks = {c["name"]: c for c in manifest["checks"]}
        assert checks["trace_deviation"]["status"] == "pass"
        assert checks["photon_leakage"]["status"] == "pass"

    def test_trajectory_writes_jump_log(self, tmp_path, outroot):
        cfg = tiny_decay(tmp_path, "trajectory", base_seed=5)
        assert main(["run", "--config", cfg]) == EXIT_OK
        outdir = outroot / "trajectory"
        with open(outdir / "jumps.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["time[1/omega_m]", "channel"]
        labels = {row[1] for row in rows[1:]}
        assert labels <= {"mech_down", "mech_up", "cavity_decay", "dephasing"}
        assert read_manifest(outdir)["results"]["seed"] == 5

    def test_ensemble_writes_pair_statistics(self, tmp_path, outroot):
        cfg = tiny_decay(tmp_path, "ensemble", n_traj=3, base_seed=1)
        assert main(["run", "--config", cfg]) == EXIT_OK
        outdir = outroot / "ensemble"
        for name in (
            "ensemble_mean.csv",
            "ensemble_stderr.csv",
            "pair_delays.csv",
            "pair_intervals.csv",
        ):
            assert (outdir / name).exists()
        pairs = read_manifest(outdir)["results"]["pairs"]
        assert pairs["pair_window"] == pytest.approx(5.0 / 0.0004)
        assert pairs["n_pairs"] + pairs["n_unpaired"] >= 0

    def test_validity_check_reports_margin(self, tmp_path, outroot):
        cfg = write_config(tmp_path, experiment="validity-check")
        assert main(["run", "--config", cfg]) == EXIT_OK
        results = read_manifest(outroot / "validity-check")["results"]
        assert results["nearest_integer_k"] == 1
        assert results["validity_margin"] > 1.0

    def test_find_gn_experiment_writes_no_tables(self, tmp_path, outroot):
        cfg = write_config(tmp_path, experiment="find-gn", find_gn={"n": 4})
        assert main(["run", "--config", cfg]) == EXIT_OK
        outdir = outroot / "find-gn"
        manifest = read_manifest(outdir)
        assert manifest["results"]["g_n"] < 0.765367
        assert not list(outdir.glob("*.csv"))

    def test_preset_names_output_directory(self, tmp_path, outroot):
        assert (
            main(
                [
                    "run",
                    "--preset",
                    "paper-fig2",
                    "--set",
                    "integrator.t_end=60.0",
                    "--set",
                    "integrator.n_samples=7",
                ]
            )
            == EXIT_OK
        )
        assert (outroot / "paper-fig2" / "manifest.json").exists()

    def test_output_dir_override_wins(self, tmp_path, outroot):
        target = tmp_path / "elsewhere"
        cfg = tiny_pure(tmp_path, output_dir=str(target))
        assert main(["run", "--config", cfg]) == EXIT_OK
        assert (target / "manifest.json").exists()
        assert not outroot.exists()

    def test_csv_reruns_are_byte_identical(self, tmp_path, outroot):
        cfg = tiny_decay(tmp_path, "ensemble", n_traj=3)
        main(["run", "--config", cfg])
        outdir = outroot / "ensemble"
        first = {
            p.name: p.read_bytes() for p in outdir.glob("*.csv")
        }
        main(["run", "--config", cfg])
        for name, blob in first.items():
            assert (outdir / name).read_bytes() == blob

    def test_manifest_config_round_trips(self, tmp_path, outroot):
        cfg = tiny_decay(tmp_path, "ensemble", n_traj=2)
        main(["run", "--config", cfg])
        outdir = outroot / "ensemble"
        echoed = read_manifest(outdir)["config"]
        replay = tmp_path / "replay.json"
        replay.write_text(json.dumps(echoed))
        rerun_dir = tmp_path / "replayed"
        assert (
            main(
                [
                    "run",
                    "--config",
                    str(replay),
                    "--set",
                    f'output_dir="{rerun_dir}"',
                ]
            )
            == EXIT_OK
        )
        for path in outdir.glob("*.csv"):
            assert (rerun_dir / path.name).read_bytes() == path.read_bytes()


class TestExitCodes:
    def test_undefined_correlation_is_physics_error(self, tmp_path, outroot):
        cfg = write_config(
            tmp_path,
            experiment="correlations",
            pulses=None,
            hilbert={"n_a": 3, "n_b": 12},
            integrator={"t_start": 0.0, "t_end": 60.0, "n_samples": 13},
            correlations={
                "orders": [1],
                "window": [0.0, 60.0],
                "tau_max": 10.0,
                "n_tau": 3,
            },
        )
        assert main(["run", "--config", cfg]) == EXIT_PHYSICS

    def test_lossy_displaced_basis_is_physics_error(self, tmp_path, outroot):
        cfg = tiny_pure(tmp_path, hilbert={"n_a": 3, "n_b": 4})
        assert main(["run", "--config", cfg]) == EXIT_PHYSICS

    def test_unwritable_output_dir_is_io_error(self, tmp_path, outroot):
        blocker = tmp_path / "blocker"
        blocker.write_text("plain file")
        cfg = tiny_pure(tmp_path, output_dir=str(blocker / "sub"))
        assert main(["run", "--config", cfg]) == EXIT_IO


class TestFigureChecks:
    def test_grid_guard_rejects_missing_sample(self):
        times = np.linspace(0.0, 100.0, 11)
        with pytest.raises(ReproduceCheckError):
            _value_at(times, {"P_02": np.zeros(11)}, "P_02", 33.0)

    def test_periodic_series_passes_periodicity(self):
        times = np.linspace(0.0, 30000.0, 1501)
        base = 0.4 + 0.3 * np.sin(2 * np.pi * times / 15000.0)
        out = RunOutput()
        out.raw = {"times": times, "cols": {"P_02": base, "P_00": 1.0 - base}}
        out.checks = [
            {"name": "trace_deviation", "value": 1e-9, "status": "pass"}
        ]
        cfg = {"pulses": {"period": 15000.0}}
        results = {c["name"]: c for c in _figure_checks("fig3", out, cfg, False)}
        assert results["periodicity"]["passed"]
        assert results["max_P02_above_half"]["passed"]
        assert results["max_P02_below_one"]["passed"]
        assert results["trace_deviation"]["passed"]

    def test_drifting_series_fails_periodicity(self):
        times = np.linspace(0.0, 30000.0, 1501)
        base = 0.6 * np.exp(-times / 20000.0)
        out = RunOutput()
        out.raw = {"times": times, "cols": {"P_02": base}}
        out.checks = [
            {"name": "trace_deviation", "value": 1e-9, "status": "pass"}
        ]
        cfg = {"pulses": {"period": 15000.0}}
        results = {c["name"]: c for c in _figure_checks("fig3", out, cfg, False)}
        assert not results["periodicity"]["passed"]
