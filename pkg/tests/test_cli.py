import pytest
from typer.testing import CliRunner

from stackelberg_lab import experiments
from stackelberg_lab.cli import app
from stackelberg_lab.utils.config_utils import ExperimentConfig
from stackelberg_lab.utils.record_utils import read_record

runner = CliRunner()


def test_help_lists_every_subcommand():
    result = runner.invoke(app, ["--help"])
    assert result.exit_code == 0
    for name in [*experiments.PIPELINES, "all"]:
        assert name in result.output


def test_duality_check_writes_record(tiny_ini: str, tmp_path):
    out = tmp_path / "duality"
    result = runner.invoke(app, ["duality-check", "--config", tiny_ini, "--out", str(out), "--seed", "5"])
    assert result.exit_code == 0, result.output
    assert "results written" in result.output
    record = read_record(out / "run.record")
    assert record.subcommand == "duality-check"
    assert record.seed == 5
    assert record.passed
    assert (out / "duality.csv").is_file()


def test_weights_report(tiny_ini: str, tmp_path):
    result = runner.invoke(app, ["weights-report", "--config", tiny_ini, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "weights.csv").is_file()
    assert (tmp_path / "constants.csv").is_file()


def test_epsilon_sweep_clears_decay_gate(tiny_ini: str, tmp_path):
    result = runner.invoke(app, ["epsilon-sweep", "--config", tiny_ini, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    record = read_record(tmp_path / "run.record")
    assert record.checks["decay_slope"]
    assert record.checks["control_bound_finite"]
    assert record.tables["sweep_summary"][0]["slope"] >= experiments.DECAY_SLOPE_MIN


def test_weak_coupling_fails_decay_gate(tiny_config: ExperimentConfig, write_config, tmp_path):
    weak = write_config(tiny_config.replace(a21=1.0))
    result = runner.invoke(app, ["epsilon-sweep", "--config", weak, "--out", str(tmp_path)])
    assert result.exit_code == 4
    assert not read_record(tmp_path / "run.record").checks["decay_slope"]


def test_validation_error_exit_code(tiny_config: ExperimentConfig, write_config, tmp_path):
    overlapping = write_config(tiny_config.replace(g_i=[(0.6, 0.8), (0.8, 0.95)]))
    result = runner.invoke(app, ["nash-solve", "--config", overlapping, "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "G_0 ∩ G_i" in result.output


def test_missing_config_exit_code(tmp_path):
    result = runner.invoke(app, ["nash-solve", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_solver_failure_exit_code(tiny_config: ExperimentConfig, write_config, tmp_path):
    capped = write_config(tiny_config.replace(picard_max_iter=1))
    result = runner.invoke(app, ["nash-solve", "--config", capped, "--out", str(tmp_path)])
    assert result.exit_code == 3
    assert "increase beta_i" in result.output


def test_failed_check_exit_code(tiny_ini: str, tmp_path, monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setattr(experiments, "DUALITY_TOL", -1.0)
    result = runner.invoke(app, ["duality-check", "--config", tiny_ini, "--out", str(tmp_path)])
    assert result.exit_code == 4
    assert "duality" in result.output
    # the record is still written so the failure can be inspected
    assert not read_record(tmp_path / "run.record").checks["duality"]


def test_rejects_zero_workers(tiny_ini: str, tmp_path):
    result = runner.invoke(app, ["duality-check", "--config", tiny_ini, "--out", str(tmp_path), "--parallel", "0"])
    assert result.exit_code != 0
