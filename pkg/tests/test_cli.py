"""
End-to-end tests for the command-line entry point.
"""

import json

import pytest

import periodic_sns.cli as cli
from periodic_sns.cli import run_cli
from periodic_sns.trajectory_io import content_hash, read_trajectory_file


@pytest.fixture(autouse=True)
def no_reports(monkeypatch):
    monkeypatch.setattr(cli, "WRITE_TRACES_TO_FILES", False)


def run_dir(out_dir):
    (found,) = [p for p in out_dir.iterdir() if p.is_dir()]
    return found


class TestCli:
    def test_brackets_full_span(self, tmp_path, capsys):
        code = run_cli(["brackets", "--modes", "1,0;-1,0;1,1;-1,-1", "--trunc", "3", "--out", str(tmp_path)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "Full" in stdout
        directory = run_dir(tmp_path)
        assert directory.name.endswith("_BRACKETS")
        assert (directory / "bracket_spans.csv").read_text(encoding="utf-8").startswith("level,span_dim\n")
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["content_hash"] == content_hash((directory / "bracket_spans.csv").read_bytes())
        assert manifest["config_echo"]["trunc_K"] == 3

    def test_regime_reference_case(self, tmp_path, capsys):
        argv = ["regime", "--nu", "2", "--f-sup", "0", "--b0", "1", "--c0", "1", "--alpha", "1"]
        argv += ["--out", str(tmp_path)]
        assert run_cli(argv) == 0
        stdout = capsys.readouterr().out
        assert "delta0 = 1.75" in stdout
        assert "laminar" in stdout
        manifest = json.loads((run_dir(tmp_path) / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["c0_provenance"] == "CONFIGURED"

    def test_simulate_writes_a_readable_trajectory(self, tmp_path):
        argv = [
            "simulate",
            "--trunc",
            "2",
            "--period",
            "0.1",
            "--steps",
            "10",
            "--noise-modes",
            "1,0;0,1",
            "--noise-amps",
            "0.5,0.5",
            "--init-norm",
            "1.0",
            "--seed",
            "3",
            "--out",
            str(tmp_path),
        ]
        assert run_cli(argv) == 0
        directory = run_dir(tmp_path)
        traj, manifest = read_trajectory_file(directory / "trajectory.tsns")
        assert traj.frames.shape == (11, traj.config.trunc.dim)
        assert manifest.master_seed == 3
        on_disk = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        assert on_disk["content_hash"] == manifest.content_hash
        assert (directory / "trajectory_stats.csv").exists()

    def test_run_report(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "WRITE_TRACES_TO_FILES", True)
        assert run_cli(["c0-estimate", "--trunc", "2", "--samples", "4", "--out", str(tmp_path)]) == 0
        (report,) = tmp_path.glob("*_C0_ESTIMATE.md")
        assert report.read_text(encoding="utf-8").startswith("# C0-ESTIMATE")

    def test_config_file(self, tmp_path, capsys):
        config = tmp_path / "run.yaml"
        config.write_text("nu: 2.0\nc0: 1.0\nnoise_modes: '1,0'\nnoise_amps: '0.5'\n", encoding="utf-8")
        argv = ["regime", "--config", str(config), "--f-sup", "0", "--b0", "1", "--out", str(tmp_path / "out")]
        assert run_cli(argv) == 0
        assert "delta0 = 1.75" in capsys.readouterr().out

    def test_usage_errors(self, tmp_path, capsys):
        assert run_cli([]) == 2
        assert run_cli(["regime", "--config", str(tmp_path / "missing.yaml")]) == 2
        assert "Cannot read config file" in capsys.readouterr().err
        assert run_cli(["regime", "--nu", "-1", "--out", str(tmp_path)]) == 2
        assert run_cli(["brackets", "--modes", "1,0;1,0", "--out", str(tmp_path)]) == 2
        assert not list(tmp_path.iterdir())
