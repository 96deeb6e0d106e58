import json
import logging
from pathlib import Path

import pandas as pd
import pytest

from app import build_parser, main
from errors import EXIT_DATA, EXIT_USAGE, UsageError
from geodata import iter_sequence_dirs, load_sequence

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.json")


def run(*argv, out):
    return main([*argv, "--config", SMOKE, "--out", str(out)])


def val_scenes(out):
    """(directory, true label) of every validation scene."""
    return [(d, load_sequence(d).true_label) for d in iter_sequence_dirs(Path(out) / "data" / "val")]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    for cmd in ("synth-data", "train"):
        assert run(cmd, out=out) == 0
    assert run("attack", "--experiment", "smoke", out=out) == 0
    assert run("report", out=out) == 0
    return out


# -- argument and error handling -------------------------------------------

def test_unknown_subcommand():
    assert main(["launch"]) == EXIT_USAGE


def test_unknown_flag(tmp_path):
    assert main(["train", "--epochs", "3", "--out", str(tmp_path)]) == EXIT_USAGE


def test_bad_job_count(tmp_path):
    assert main(["report", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert main(["synth-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_report_without_results(tmp_path):
    assert run("report", out=tmp_path) == EXIT_DATA


def test_attack_without_checkpoint(tmp_path):
    assert run("attack", out=tmp_path) == EXIT_DATA


def test_verbosity_flags_are_exclusive():
    with pytest.raises(UsageError):
        build_parser().parse_args(["report", "-v", "--quiet"])


# -- smoke pipeline ----------------------------------------------------------

def test_pipeline_outputs(smoke_run):
    assert (smoke_run / "model.ckpt").exists()
    assert json.loads((smoke_run / "training_log.json").read_text())["epochs"]
    runs = sorted(p.name for p in (smoke_run / "attacks" / "smoke").iterdir())
    skipped = [d.name for d, label in val_scenes(smoke_run) if label == 1]
    assert len(runs) == 5
    assert all(name.endswith("__to_1") for name in runs)
    assert not any(name.startswith(s) for s in skipped for name in runs)
    for name in runs:
        assert {"patch.json", "result.json"} <= {p.name for p in (smoke_run / "attacks" / "smoke" / name).iterdir()}


def test_report_rows(smoke_run):
    df = pd.read_csv(smoke_run / "reports" / "report.csv")
    assert df["scope"].tolist() == ["all", "held-out"]
    assert df["exp_id"].tolist() == ["smoke", "smoke"]
    assert (df["success_rate"] <= df["error_rate"]).all()
    assert (smoke_run / "reports" / "summary.md").exists()


def test_rerun_is_byte_identical(smoke_run):
    name = sorted((smoke_run / "attacks" / "smoke").iterdir())[0].name
    patch = smoke_run / "attacks" / "smoke" / name / "patch.json"
    before = (patch.read_bytes(), (smoke_run / "reports" / "report.csv").read_bytes())
    assert run("attack", "--experiment", "smoke", "--force", out=smoke_run) == 0
    assert run("report", out=smoke_run) == 0
    assert (patch.read_bytes(), (smoke_run / "reports" / "report.csv").read_bytes()) == before


def test_existing_results_need_force(smoke_run):
    assert run("attack", "--experiment", "smoke", out=smoke_run) == EXIT_USAGE


def test_evaluate_matches_the_attack_record(smoke_run):
    scene, _ = next((d, label) for d, label in val_scenes(smoke_run) if label != 1)
    attack_dir = smoke_run / "attacks" / "smoke" / f"{scene.name}__to_1"
    assert run("evaluate", "--scene", str(scene), "--patch", str(attack_dir / "patch.json"),
               "--target", "1", "--experiment", "smoke", out=smoke_run) == 0
    evaluated = json.loads((smoke_run / "evaluations" / f"{scene.name}__to_1.json").read_text())
    attacked = json.loads((attack_dir / "result.json").read_text())
    assert evaluated["records"] == attacked["records"]


def test_evaluate_needs_one_mode(smoke_run):
    scene, _ = val_scenes(smoke_run)[0]
    patch = next((smoke_run / "attacks" / "smoke").glob("*/patch.json"))
    assert run("evaluate", "--scene", str(scene), "--patch", str(patch), out=smoke_run) == EXIT_USAGE


def test_manifest_skips_target_equal_to_true_label(smoke_run, tmp_path, caplog):
    scenes = val_scenes(smoke_run)
    same = next(d.name for d, label in scenes if label == 1)
    other = next(d.name for d, label in scenes if label != 1)
    manifest = tmp_path / "pairs.json"
    manifest.write_text(json.dumps([{"scene_id": same, "target": 1}, {"scene_id": other, "target": 1}]))
    with caplog.at_level(logging.WARNING):
        code = main(["attack", "--config", SMOKE, "--out", str(tmp_path), "--data", str(smoke_run / "data"),
                     "--checkpoint", str(smoke_run / "model.ckpt"), "--manifest", str(manifest),
                     "--experiment", "smoke"])
    assert code == 0
    assert "target equals the true label" in caplog.text
    assert [p.name for p in (tmp_path / "attacks" / "smoke").iterdir()] == [f"{other}__to_1"]


def test_targeted_and_non_targeted_runs_report_separately(smoke_run, tmp_path):
    shared = ["--config", SMOKE, "--out", str(tmp_path), "--data", str(smoke_run / "data"),
              "--checkpoint", str(smoke_run / "model.ckpt"), "--experiment", "smoke"]
    assert main(["attack", *shared]) == 0
    assert main(["attack", *shared, "--non-targeted"]) == 0
    assert run("report", out=tmp_path) == 0
    df = pd.read_csv(tmp_path / "reports" / "report.csv")
    assert list(zip(df["mode"], df["scope"])) == [
        ("targeted", "all"), ("targeted", "held-out"), ("non-targeted", "all"), ("non-targeted", "held-out")]
    assert df["result_count"].tolist() == [5, 5, 6, 6]
    matrix = pd.read_csv(tmp_path / "reports" / "class_matrix.csv", dtype={"target_label": str})
    assert set(matrix[matrix["mode"] == "non-targeted"]["target_label"]) == {"any"}


def test_non_targeted_run(smoke_run, tmp_path):
    argv = ["attack", "--config", SMOKE, "--out", str(tmp_path), "--data", str(smoke_run / "data"),
            "--checkpoint", str(smoke_run / "model.ckpt"), "--non-targeted", "--experiment", "smoke"]
    assert main(argv) == 0
    runs = sorted(p.name for p in (tmp_path / "attacks" / "smoke").iterdir())
    assert len(runs) == 6 and all(name.endswith("__to_any") for name in runs)
    assert main(argv) == EXIT_USAGE
