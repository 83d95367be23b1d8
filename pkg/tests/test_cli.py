import json
import os

import pytest

from artigauss import __version__
from artigauss.cli import EXIT_INPUT, EXIT_OK, EXIT_USAGE, SEED_ENV, main
from artigauss.io_utils import read_ply

FAST = ["--no_progress", "--gin_bindings", "training.steps = 5", "--gin_bindings", "repel.n_r = 20"]


def _pipeline(out_dir, *extra):
    return main(FAST + ["pipeline", "--spec", "door", "--out_dir", str(out_dir), "--samples", "40",
                        "--seed", "7"] + list(extra))


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "artigauss {}".format(__version__) in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["synth"], ["bogus"], ["pipeline", "--spec", "door", "--out_dir", "x",
                                                             "--k_parts", "two"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_synth_writes_states(tmp_path):
    assert main(["synth", "--spec", "drawer", "--out_dir", str(tmp_path), "--samples", "30"]) == EXIT_OK
    state0, state1 = read_ply(str(tmp_path / "state0.ply")), read_ply(str(tmp_path / "state1.ply"))
    assert len(state0) == len(state1) == 60
    assert state0.state_tag == 0 and state1.state_tag == 1

    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seeds"]["object"] == 0
    assert set(manifest["outputs"]) == {str(tmp_path / n) for n in ("state0.ply", "state1.ply",
                                                                     "ground_truth.json")}


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "5")
    assert main(["synth", "--spec", "drawer", "--out_dir", str(tmp_path), "--samples", "10"]) == EXIT_OK
    assert json.loads((tmp_path / "manifest.json").read_text())["seeds"]["object"] == 5

    monkeypatch.setenv(SEED_ENV, "five")
    assert main(["synth", "--spec", "drawer", "--out_dir", str(tmp_path), "--samples", "10"]) == EXIT_USAGE


def test_unknown_preset_is_input_error(tmp_path):
    assert main(["synth", "--spec", "no_such_object", "--out_dir", str(tmp_path)]) == EXIT_INPUT


def test_fuse(tmp_path):
    main(["synth", "--spec", "door", "--out_dir", str(tmp_path), "--samples", "30"])
    out = tmp_path / "fused"
    assert main(["fuse", str(tmp_path / "state0.ply"), str(tmp_path / "state1.ply"), "--out_dir", str(out),
                 "--uniform_beta"]) == EXIT_OK
    assert json.loads((out / "fusion.json").read_text())["beta"] == 0.5
    canonical = read_ply(str(out / "canonical.ply"))
    assert canonical.state_tag is None and len(canonical) == 60


def test_train_missing_input(tmp_path):
    assert main(FAST + ["train", str(tmp_path / "a.ply"), str(tmp_path / "b.ply"),
                        "--out_dir", str(tmp_path)]) == EXIT_INPUT


def test_pipeline_outputs_and_determinism(tmp_path):
    assert _pipeline(tmp_path / "a") == EXIT_OK
    assert _pipeline(tmp_path / "b") == EXIT_OK
    for name in ("model.h5", "train_log.jsonl", "config.gin", "eval_report.json", "eval_report.csv",
                 "repel_points.ply"):
        assert (tmp_path / "a" / name).is_file()
    report_a = (tmp_path / "a" / "eval_report.json").read_bytes()
    assert report_a == (tmp_path / "b" / "eval_report.json").read_bytes()
    assert json.loads(report_a)["joints"][0]["gt_kind"] == "revolute"
    assert "training.steps = 5" in (tmp_path / "a" / "config.gin").read_text()


def test_eval_and_mismatched_ground_truth(tmp_path):
    run = tmp_path / "run"
    _pipeline(run)
    out = tmp_path / "eval"
    args = ["eval", "--model", str(run / "model.h5"), "--state0", str(run / "state0.ply"),
            "--state1", str(run / "state1.ply"), "--out_dir", str(out)]
    assert main(args + ["--gt", str(run / "ground_truth.json")]) == EXIT_OK
    assert json.loads((out / "eval_report.json").read_text()) == \
        json.loads((run / "eval_report.json").read_text())

    other = tmp_path / "other"
    main(["synth", "--spec", "door", "--out_dir", str(other), "--samples", "25"])
    assert main(args + ["--gt", str(other / "ground_truth.json")]) == EXIT_INPUT


def test_render(tmp_path):
    run = tmp_path / "run"
    _pipeline(run)
    assert main(["render", str(run / "state1.ply"), "--out_dir", str(tmp_path / "plain"),
                 "--resolution", "32", "24"]) == EXIT_OK
    assert (tmp_path / "plain" / "render.png").is_file()
    assert main(["render", str(run / "state1.ply"), "--out_dir", str(tmp_path / "parts"),
                 "--model", str(run / "model.h5"), "--resolution", "32", "32"]) == EXIT_OK
    assert os.path.getsize(str(tmp_path / "parts" / "render.png")) > 0


def test_replay(tmp_path):
    run = tmp_path / "run"
    _pipeline(run)
    manifest_path = run / "manifest.json"
    assert main(["replay", str(manifest_path)]) == EXIT_OK

    manifest = json.loads(manifest_path.read_text())
    manifest["outputs"][str(run / "eval_report.json")] = "0" * 64
    manifest_path.write_text(json.dumps(manifest))
    assert main(["replay", str(manifest_path)]) == EXIT_USAGE


@pytest.mark.slow
def test_ablate(tmp_path):
    assert main(FAST + ["ablate", "--object", "drawer", "--out_dir", str(tmp_path), "--samples", "25"]) == EXIT_OK
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("variant,beta,")
    assert [line.split(",")[0] for line in lines[1:]] == ["no_part", "no_repel", "no_physics",
                                                          "no_motion_aware_beta"]
    for variant in ("full", "no_part"):
        assert (tmp_path / variant / "eval_report.json").is_file()
