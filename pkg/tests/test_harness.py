"""Configuration, task orchestration, serialization and CLI tests."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import oscillator_model
from qsflab.cli import main
from qsflab.config import (
    ExperimentConfig,
    apply_overrides,
    build_model,
    load_config,
    parse_config,
)
from qsflab.errors import ConfigError
from qsflab.mixed import simulate_linear_master
from qsflab.pure import simulate_linear
from qsflab.sde import sample_path
from qsflab.serialize import (
    dump_trajectory_binary,
    load_trajectory_binary,
    write_density_jsonl,
    write_pure_trajectory_csv,
)
from qsflab.tasks import consolidate, girsanov_density_check, run, validate_manifest


def base_raw(task="pure-linear", **overrides):
    raw = {
        "task": task,
        "model": {"dim": 8, "hamiltonian": {"kind": "oscillator"},
                  "couplings": [{"kind": "xp", "a": 1.0, "b": 0.0}]},
        "run": {"T": 0.1, "dt": 1e-3, "trajectories": 48, "master_seed": 3},
        "output": {"directory": "out"},
        "params": {"allowance": 0.02},
    }
    raw.update(overrides)
    return raw


class TestConfig:
    def test_toml_and_json_equivalent(self, tmp_path):
        toml_text = """
task = "pure-linear"

[model]
dim = 8

[run]
T = 0.1
dt = 1e-3
trajectories = 16
master_seed = 3
"""
        (tmp_path / "a.toml").write_text(toml_text)
        (tmp_path / "a.json").write_text(json.dumps({
            "task": "pure-linear",
            "model": {"dim": 8},
            "run": {"T": 0.1, "dt": 1e-3, "trajectories": 16, "master_seed": 3},
        }))
        c1 = load_config(tmp_path / "a.toml")
        c2 = load_config(tmp_path / "a.json")
        assert c1.config_hash() == c2.config_hash()

    def test_validation_reports_field_path(self):
        with pytest.raises(ConfigError) as err:
            parse_config(base_raw(run={"T": 0.1, "dt": 0.03, "trajectories": 4,
                                       "master_seed": 1}))
        assert "run.dt" in str(err.value)
        with pytest.raises(ConfigError) as err:
            parse_config(base_raw(task="no-such-task"))
        assert "task" in str(err.value)

    def test_model_building(self):
        cfg = parse_config(base_raw())
        model = build_model(cfg.model)
        assert model.dim == 8
        assert model.channels == 1
        assert model.hamiltonian.is_hermitian

    def test_overrides(self):
        cfg = parse_config(base_raw())
        new = apply_overrides(cfg, seed=99, out="elsewhere", parallel=2,
                              dt=5e-4, T=0.2, trajectories=7)
        assert new.run.master_seed == 99
        assert new.run.dt == 5e-4 and new.run.T == 0.2
        assert new.run.trajectories == 7 and new.run.parallelism == 2
        assert new.output.directory == "elsewhere"

    def test_override_revalidates(self):
        cfg = parse_config(base_raw())
        with pytest.raises(ConfigError):
            apply_overrides(cfg, dt=0.03)  # does not divide T


class TestRunDeterminism:
    def test_rerun_byte_identical(self, tmp_path):
        raw = base_raw(output={"directory": str(tmp_path / "a")})
        _, path1 = run(parse_config(raw))
        first = (tmp_path / "a" / "pure-linear" / "norm_stats.csv").read_bytes()
        _, path2 = run(parse_config(raw))
        second = (tmp_path / "a" / "pure-linear" / "norm_stats.csv").read_bytes()
        assert first == second

    def test_parallelism_invariant(self, tmp_path):
        raw1 = base_raw(output={"directory": str(tmp_path / "p1")},
                        run={"T": 0.1, "dt": 1e-3, "trajectories": 300,
                             "master_seed": 11, "parallelism": 1})
        raw4 = base_raw(output={"directory": str(tmp_path / "p4")},
                        run={"T": 0.1, "dt": 1e-3, "trajectories": 300,
                             "master_seed": 11, "parallelism": 4})
        run(parse_config(raw1))
        run(parse_config(raw4))
        a = (tmp_path / "p1" / "pure-linear" / "norm_stats.csv").read_bytes()
        b = (tmp_path / "p4" / "pure-linear" / "norm_stats.csv").read_bytes()
        assert a == b

    def test_manifest_lists_existing_files(self, tmp_path):
        raw = base_raw(output={"directory": str(tmp_path)})
        _, manifest_path = run(parse_config(raw))
        payload = validate_manifest(manifest_path)
        assert payload["task"] == "pure-linear"
        assert all((manifest_path.parent / f["path"]).exists()
                   for f in payload["files"])

    def test_manifest_detects_truncation(self, tmp_path):
        raw = base_raw(output={"directory": str(tmp_path)})
        _, manifest_path = run(parse_config(raw))
        victim = manifest_path.parent / "norm_stats.csv"
        victim.write_bytes(victim.read_bytes()[:10])
        with pytest.raises(ConfigError):
            validate_manifest(manifest_path)


class TestTasks:
    def test_equivalence_task(self, tmp_path):
        raw = base_raw(task="equivalence", output={"directory": str(tmp_path)},
                       run={"T": 0.1, "dt": 4e-3, "trajectories": 1,
                            "master_seed": 2},
                       params={"dts": [4e-3, 2e-3, 1e-3], "n_paths": 6})
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_lindblad_task_qubit(self, tmp_path):
        raw = {
            "task": "lindblad",
            "model": {"dim": 2, "hamiltonian": {"kind": "zero"},
                      "couplings": [{"kind": "lowering"}]},
            "run": {"T": 1.0, "dt": 1e-3, "trajectories": 1, "master_seed": 1},
            "output": {"directory": str(tmp_path)},
            "params": {"initial": "basis:1", "analytic": "qubit-damping",
                       "rtol": 0.01},
        }
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_moments_task(self, tmp_path):
        raw = {
            "task": "moments",
            "run": {"T": 0.1, "dt": 1e-3, "trajectories": 20000,
                    "master_seed": 14},
            "output": {"directory": str(tmp_path)},
            "params": {"p_values": [0.5, 2.0], "alpha": 1.0, "t": 0.01,
                       "tolerances": {"0.5": 0.05}},
        }
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks
        table = (Path(tmp_path) / "moments" / "moments.csv").read_text()
        assert "divergence_flag" in table.splitlines()[0]

    def test_convergence_task(self, tmp_path):
        raw = base_raw(task="convergence", output={"directory": str(tmp_path)},
                       run={"T": 0.1, "dt": 2e-3, "trajectories": 1,
                            "master_seed": 5},
                       params={"dims": [4, 8, 16], "n_paths": 8})
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_master_linear_task(self, tmp_path):
        raw = base_raw(task="master-linear", output={"directory": str(tmp_path)},
                       run={"T": 0.1, "dt": 1e-3, "trajectories": 100,
                            "master_seed": 4},
                       params={"allowance": 0.02, "record_stride": 10})
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_master_nonlinear_task(self, tmp_path):
        raw = {
            "task": "master-nonlinear",
            "model": {"dim": 2, "hamiltonian": {"kind": "zero"},
                      "couplings": [{"kind": "lowering"}]},
            "run": {"T": 0.5, "dt": 5e-3, "trajectories": 150, "master_seed": 6},
            "output": {"directory": str(tmp_path)},
            "params": {"initial": "basis:1", "analytic": "qubit-damping",
                       "allowance": 5e-3, "record_stride": 10},
        }
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_unravel_task(self, tmp_path):
        raw = base_raw(task="unravel", output={"directory": str(tmp_path)},
                       run={"T": 0.05, "dt": 1e-3, "trajectories": 1,
                            "master_seed": 7},
                       params={"weights": [0.6, 0.4], "dts": [1e-3, 5e-4, 2.5e-4],
                               "n_paths": 4, "min_order": 0.3})
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_oracle_compare_task(self, tmp_path):
        raw = {
            "task": "oracle-compare",
            "model": {"dim": 32},
            "run": {"T": 0.1, "dt": 1e-3, "trajectories": 1, "master_seed": 9},
            "output": {"directory": str(tmp_path)},
            "params": {"alpha": 1.0, "h": 1.0, "l2_tol": 1e-2,
                       "grid_points": 3001},
        }
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks

    def test_girsanov_check(self, tmp_path):
        raw = base_raw(output={"directory": str(tmp_path)},
                       run={"T": 0.2, "dt": 1e-3, "trajectories": 400,
                            "master_seed": 10},
                       params={"girsanov": True, "z_max": 4.0})
        manifest, _ = run(parse_config(raw))
        assert manifest.all_passed, manifest.checks
        report = girsanov_density_check(parse_config(raw))
        assert report["passed"]
        # the unit functional on the innovation side is exactly 1
        assert np.isclose(report["direct_mean"][0], 1.0)


class TestConsolidation:
    def test_report_and_figures(self, tmp_path):
        raw = base_raw(output={"directory": str(tmp_path)})
        _, manifest_path = run(parse_config(raw))
        report = consolidate([manifest_path], tmp_path, render_figures=True)
        assert report["all_passed"]
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "report.txt").exists()
        assert any(Path(f).suffix == ".png" for f in report["figures"])

    def test_empty_input_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            consolidate([], tmp_path)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            consolidate([tmp_path / "nope.json"], tmp_path)


class TestSerialization:
    def test_pure_trajectory_csv(self, tmp_path, ground_state):
        model = oscillator_model(4)
        path = sample_path(1, 0.1, 1e-2, master_seed=1)
        traj = simulate_linear(model, ground_state(4), path)
        out = write_pure_trajectory_csv(tmp_path / "traj.csv", traj, stride=2)
        header = out.read_text().splitlines()[0].split(",")
        assert header[0] == "t" and header[-1] == "norm_sq"
        assert "re_0" in header and "im_3" in header

    def test_density_jsonl(self, tmp_path):
        model = oscillator_model(3)
        path = sample_path(1, 0.1, 1e-2, master_seed=2)
        gamma0 = np.diag([1.0, 0, 0]).astype(complex)
        traj = simulate_linear_master(model, gamma0, path)
        out = write_density_jsonl(tmp_path / "rho.jsonl", traj, stride=5)
        lines = out.read_text().splitlines()
        record = json.loads(lines[0])
        assert set(record) == {"t", "re", "im", "trace", "min_eig"}
        assert len(record["re"]) == 6  # upper triangle of 3x3

    def test_binary_dump_round_trip(self, tmp_path):
        times = np.linspace(0, 1, 11)
        states = (np.random.default_rng(0).normal(size=(11, 4))
                  + 1j * np.random.default_rng(1).normal(size=(11, 4)))
        out = dump_trajectory_binary(tmp_path / "traj.bin", times, states)
        times2, flat = load_trajectory_binary(out)
        assert np.allclose(times2, times)
        assert np.allclose(flat, states.astype(np.complex64))


class TestCli:
    def write_config(self, tmp_path, **overrides):
        raw = base_raw(output={"directory": str(tmp_path / "out")}, **overrides)
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(raw))
        return cfg_path

    def test_simulate_and_report(self, tmp_path):
        runner = CliRunner()
        cfg = self.write_config(tmp_path)
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 0, result.output
        manifest = tmp_path / "out" / "pure-linear" / "manifest.json"
        result = runner.invoke(main, ["report", str(manifest), "--out",
                                      str(tmp_path / "out")])
        assert result.exit_code == 0, result.output
        assert "overall: pass" in (tmp_path / "out" / "report.txt").read_text()

    def test_config_error_exit_code(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(main, ["simulate", "--config",
                                      str(tmp_path / "missing.toml")])
        assert result.exit_code == 2

    def test_check_failure_exit_code(self, tmp_path):
        # an impossible tolerance forces a failing check
        raw = {
            "task": "moments",
            "run": {"T": 0.1, "dt": 1e-3, "trajectories": 5000, "master_seed": 1},
            "output": {"directory": str(tmp_path / "out")},
            "params": {"p_values": [0.5], "tolerances": {"0.5": 1e-9}},
        }
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(raw))
        runner = CliRunner()
        result = runner.invoke(main, ["moments", "--config", str(cfg_path)])
        assert result.exit_code == 1

    def test_env_var_out_dir(self, tmp_path, monkeypatch):
        runner = CliRunner()
        cfg = self.write_config(tmp_path)
        monkeypatch.setenv("QSFLAB_OUT", str(tmp_path / "envout"))
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "envout" / "pure-linear" / "manifest.json").exists()

    def test_wrong_task_for_subcommand(self, tmp_path):
        cfg = self.write_config(tmp_path, task="moments")
        runner = CliRunner()
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 2
