import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from echoatt.cli import main
from echoatt.config import RunConfig, derive_seed, validate
from echoatt.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.json"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """train-teacher -> analyze -> plan -> distill on the smoke config, once per module."""
    out = tmp_path_factory.mktemp("smoke")
    argv = [
        ["train-teacher", SMOKE, "--out", out],
        ["analyze", SMOKE, "--out", out, "--checkpoint", out / "teacher.ckpt", "--workers", "2"],
        ["plan", SMOKE, "--out", out, "--report", out / "report.json"],
        ["distill", SMOKE, "--out", out, "--teacher", out / "teacher.ckpt", "--plan", out / "plan.json"],
    ]
    for a in argv:
        assert main([str(x) for x in a]) == 0, a
    return out


def test_pipeline_outputs_validate(pipeline):
    out = pipeline
    for name in ("teacher.ckpt", "report_pairs.csv", "report_layers.csv", "student.ckpt", "student.optim",
                 "student_stage1.ckpt"):
        assert (out / name).is_file(), name
    validate(json.loads((out / "report.json").read_text()), "similarity_report")
    plan = json.loads((out / "plan.json").read_text())
    validate(plan, "sharing_plan")
    assert plan["selection"] is not None
    for name in ("teacher_train.ndjson", "train.ndjson"):
        lines = [json.loads(x) for x in (out / name).read_text().splitlines()]
        assert lines[0]["type"] == "header"
        for rec in lines:
            validate(rec, "train_record")
    stages = {r["name"] for r in lines if r["type"] == "perplexity"}
    assert stages == {"stage1", "stage2"}


def test_eval_and_bench(pipeline, capsys):
    out = pipeline
    code, stdout, _ = run(capsys, "eval", SMOKE, "--out", out, "--checkpoint", out / "student.ckpt")
    assert code == 0
    doc = last_json(stdout)
    assert doc["perplexity"] > 1
    validate(json.loads((out / "eval.json").read_text()), "eval")
    code, stdout, _ = run(capsys, "bench", SMOKE, "--out", out, "--baseline", out / "teacher.ckpt",
                          "--student", out / "student.ckpt")
    assert code == 0
    assert "tokens/sec" in stdout
    validate(json.loads((out / "bench.json").read_text()), "bench_report")


def test_plan_from_indices_gets_published_label(tmp_path, capsys):
    cfg = json.loads(SMOKE.read_text())
    cfg["model"].update(n_layers=22)
    path = tmp_path / "c22.json"
    path.write_text(json.dumps(cfg))
    code, stdout, _ = run(capsys, "plan", path, "--out", tmp_path, "--indices", "2,3,4,5,7")
    assert code == 0
    doc = last_json(stdout)
    assert doc["label"] == "published-23%"
    assert doc["sharing_ratio"] == pytest.approx(5 / 22)
    assert round(100 * doc["sharing_ratio"], 1) == 22.7


def test_table3_command(tmp_path, capsys):
    code, stdout, _ = run(capsys, "table3", "--out", tmp_path)
    assert code == 0
    assert "DISCREPANCY" in stdout
    validate(json.loads((tmp_path / "table3.json").read_text()), "table3")


def error_of(err):
    doc = json.loads(err.strip().splitlines()[-1])
    validate(doc, "error")
    return doc


def test_missing_file_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "eval", SMOKE, "--out", tmp_path, "--checkpoint", tmp_path / "none.ckpt")
    assert code == 2 and error_of(err)["error"] == "missing_file"
    code, _, err = run(capsys, "eval", tmp_path / "none.json", "--checkpoint", "x")
    assert code == 2


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"n_layers": 2}}))
    code, _, err = run(capsys, "train-teacher", bad, "--out", tmp_path)
    assert code == 7 and error_of(err)["error"] == "invalid_config"
    bad.write_text("{not json")
    assert run(capsys, "train-teacher", bad, "--out", tmp_path)[0] == 7


def test_plan_mismatch_exit_code(pipeline, tmp_path, capsys):
    cfg = json.loads(SMOKE.read_text())
    cfg["model"]["n_layers"] = 5
    path = tmp_path / "c5.json"
    path.write_text(json.dumps(cfg))
    code, _, err = run(capsys, "distill", path, "--out", tmp_path, "--teacher", pipeline / "teacher.ckpt",
                       "--plan", pipeline / "plan.json")
    assert code == 8 and error_of(err)["error"] == "plan_mismatch"
    code, _, err = run(capsys, "plan", SMOKE, "--out", tmp_path, "--indices", "0,9")
    assert code == 8


def test_seed_env_override(tmp_path):
    doc = json.loads(SMOKE.read_text())
    assert RunConfig.from_dict(doc, env={}).seed == 7
    cfg = RunConfig.from_dict(doc, env={"ECHOATT_SEED": "99"})
    assert cfg.seed == 99
    assert cfg.seed_for("a") == derive_seed(99, "a") != derive_seed(99, "b")


def test_config_cross_checks():
    doc = json.loads(SMOKE.read_text())
    doc["data"]["seq_len"] = 64
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc, env={})
    doc = json.loads(SMOKE.read_text())
    doc["model"]["vocab_size"] = 100
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc, env={})


@pytest.mark.skipif(shutil.which("echoatt") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["echoatt", "table3", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    proc = subprocess.run([sys.executable, "-m", "echoatt.cli", "eval", str(tmp_path / "x.json"),
                           "--checkpoint", "y"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "missing_file"
