"""Command-line front end: full pipeline, artifacts, error contract."""

import json
from pathlib import Path

import pytest

from splatstream import cli

FAST_CONFIG = {
    "init_count": 16,
    "first_iterations": 60,
    "first_step_size": 0.3,
    "iterations": 15,
    "tau_db": 10.0,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-scene -> train -> simulate once; commands under test reuse it."""
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene"
    run = root / "run"
    sim = root / "sim"
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(FAST_CONFIG))
    assert cli.main(["gen-scene", "--out", str(scene), "--blobs", "3", "--frames", "3",
                     "--resolution", "32", "--cameras", "2", "--seed", "1"]) == 0
    assert cli.main(["train", "--scene", str(scene), "--out", str(run),
                     "--config", str(cfg_path)]) == 0
    assert cli.main(["simulate", "--run", str(run), "--scene", str(scene),
                     "--out", str(sim), "--bandwidth-mbps", "0.1"]) == 0
    return {"scene": scene, "run": run, "sim": sim}


class TestPipelineArtifacts:
    def test_scene_files(self, pipeline):
        scene = pipeline["scene"]
        for name in ("scene.gssc", "spec.json", "cameras.json"):
            assert (scene / name).exists()

    def test_train_files(self, pipeline):
        run = pipeline["run"]
        for name in ("plan.json", "stream.npz", "run_config.json"):
            assert (run / name).exists()
        plan = json.loads((run / "plan.json").read_text())
        assert plan["groups"][0]["start"] == 0

    def test_simulate_files(self, pipeline):
        sim = pipeline["sim"]
        report = json.loads((sim / "report.json").read_text())
        assert len(report["frames"]) == 3
        csv_lines = (sim / "report.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 4  # header + 3 frames
        levels = (sim / "pruning_levels.csv").read_text().strip().splitlines()
        assert levels[0] == "frame,ratio,quality_db,size_bytes"
        assert len(levels) > 1

    def test_report_command(self, pipeline, capsys):
        assert cli.main(["report", "--run", str(pipeline["run"]),
                         "--sim", str(pipeline["sim"])]) == 0
        out = capsys.readouterr().out
        assert "groups" in out
        assert "stall" in out
        quality = (pipeline["run"] / "quality.csv").read_text().strip().splitlines()
        assert quality[0] == "frame_index,group_key,is_keyframe,quality_db"
        assert len(quality) == 4

    def test_simulate_with_trace_file(self, pipeline, tmp_path):
        trace = tmp_path / "trace.csv"
        trace.write_text("time_s,bandwidth_mbps\n0,1.0\n10,1.0\n")
        out = tmp_path / "sim2"
        assert cli.main(["simulate", "--run", str(pipeline["run"]),
                         "--scene", str(pipeline["scene"]),
                         "--out", str(out), "--trace", str(trace)]) == 0
        assert (out / "report.json").exists()


class TestErrorContract:
    def test_missing_artifact_single_line(self, tmp_path, capsys):
        code = cli.main(["train", "--scene", str(tmp_path / "nowhere"),
                         "--out", str(tmp_path / "out")])
        assert code == 2
        err = capsys.readouterr().err.strip()
        assert err.startswith("ERR:MISSING_ARTIFACT: ")
        assert "\n" not in err

    def test_report_needs_inputs(self, tmp_path, capsys):
        assert cli.main(["report"]) == 2
        assert capsys.readouterr().err.startswith("ERR:MISSING_ARTIFACT: ")

    def test_validation_error_code(self, tmp_path, capsys):
        code = cli.main(["gen-scene", "--out", str(tmp_path / "s"),
                         "--blobs", "0"])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERR:VALIDATION: ")

    def test_bad_trace_error(self, pipeline, tmp_path, capsys):
        trace = tmp_path / "short.csv"
        trace.write_text("time_s,bandwidth_mbps\n0,1.0\n1,1.0\n")
        code = cli.main(["simulate", "--run", str(pipeline["run"]),
                         "--scene", str(pipeline["scene"]),
                         "--out", str(tmp_path / "sim"), "--trace", str(trace)])
        assert code == 2
        assert capsys.readouterr().err.startswith("ERR:TRACE: ")


class TestOracleCheck:
    def test_all_oracles_pass(self, capsys):
        assert cli.main(["oracle-check", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert out.count("OK") == 4
        assert "FAIL" not in out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
