import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from cli import RunConfig, cli, run
from services import export
from services.errors import ConfigError

CANONICAL_FILE = Path(__file__).resolve().parents[1] / "data" / "instances" / "instance_1.json"


def write_doc(tmp_path: Path, **overrides) -> Path:
    doc = json.loads(CANONICAL_FILE.read_text(encoding="utf-8"))
    doc.update(overrides)
    path = tmp_path / "custom.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def without_timestamp(path: Path) -> dict:
    doc = json.loads(path.read_text(encoding="utf-8"))
    doc.pop(export.TIMESTAMP_KEY)
    return doc


def test_solve_writes_the_artifacts(tmp_path, settings):
    assert run(RunConfig("solve", out=tmp_path), settings) == 0
    for name in ("solve_report.json", "solve_summary.csv", "riccati.csv", "state_path.csv"):
        assert (tmp_path / name).exists(), name


def test_solve_output_is_reproducible(tmp_path, settings):
    run(RunConfig("solve", instance=CANONICAL_FILE, out=tmp_path / "a"), settings)
    run(RunConfig("solve", instance=CANONICAL_FILE, out=tmp_path / "b"), settings)
    assert without_timestamp(tmp_path / "a" / "solve_report.json") == without_timestamp(tmp_path / "b" / "solve_report.json")
    assert (tmp_path / "a" / "solve_summary.csv").read_bytes() == (tmp_path / "b" / "solve_summary.csv").read_bytes()


def test_steps_override(tmp_path, settings):
    assert run(RunConfig("solve", out=tmp_path, steps=6), settings) == 0
    doc = json.loads((tmp_path / "solve_report.json").read_text())
    assert len(doc["mean_path"]) == 7


def test_bad_input_exits_2(tmp_path, settings):
    broken = tmp_path / "broken.json"
    broken.write_text("{\n  \"name\": \"x\",\n}", encoding="utf-8")
    assert run(RunConfig("solve", instance=broken, out=tmp_path), settings) == 2
    assert run(RunConfig("solve", instance=tmp_path / "missing.json", out=tmp_path), settings) == 2
    assert run(RunConfig("solve", steps=0, out=tmp_path), settings) == 2


def test_failed_stage_exits_1(tmp_path, settings):
    path = write_doc(tmp_path, delta=2.0)
    assert run(RunConfig("solve", instance=path, out=tmp_path / "out"), settings) == 1
    assert not (tmp_path / "out" / "solve_report.json").exists()


def test_unknown_command():
    with pytest.raises(ConfigError, match="unknown command"):
        RunConfig("plot")


def test_verify_exits_0_and_writes_the_report(tmp_path, settings):
    assert run(RunConfig("verify", out=tmp_path), settings) == 0
    doc = json.loads((tmp_path / "verify_instance-1.json").read_text())
    assert doc["passed"] is True
    assert doc["failed"] == []


def test_simulate(tmp_path, settings):
    assert run(RunConfig("simulate", out=tmp_path, particles=500, seed=11), settings) == 0
    doc = json.loads((tmp_path / "particles.json").read_text())
    assert doc["n_particles"] == 500 and doc["seed"] == 11
    assert doc["tree_moment_ratio"] > 0
    assert (tmp_path / "particles.csv").exists() and (tmp_path / "tree_path.csv").exists()


def test_operators(tmp_path, settings):
    assert run(RunConfig("operators", out=tmp_path), settings) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"p.csv", "l1.csv", "l2.csv", "p.json", "l1.json", "l2.json", "p_xi.csv"} <= names


def test_click_surface(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli, ["solve", "--instance", "instance_1", "--out", str(tmp_path), "--tol", "1e-8"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "solve_report.json").exists()

    result = runner.invoke(cli, ["solve", "--instance", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_click_help_lists_the_commands():
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("solve", "verify", "simulate", "operators", "corpus"):
        assert command in result.output
    assert "--workers" in CliRunner().invoke(cli, ["corpus", "--help"]).output
