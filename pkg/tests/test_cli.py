import json
from pathlib import Path

import pytest

from fair_diag import cli

GOLDEN = Path(__file__).parent / "data" / "cli_eval_golden.json"
QUICK = ["--set", "max_epochs=15", "--set", "context_k=3", "--set", "batch_size=128", "--set", "learning_rate=0.01"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "synth.cfg"
    cfg.write_text("# small synthetic set\nnum_students = 150\nnum_exercises = 30\nnum_concepts = 4\nseed = 7\n")
    assert cli.main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    ckpt = root / "m.ckpt"
    assert cli.main(["train", "--data-dir", str(root / "data"), "--out", str(ckpt), "--seed", "3", *QUICK]) == 0
    return root


def test_generate_writes_csvs(pipeline):
    names = sorted(p.name for p in (pipeline / "data").iterdir())
    assert names == ["attributes.csv", "ground_truth.csv", "interactions.csv", "qmatrix.csv"]


def test_train_outputs(pipeline):
    for suffix in (".ckpt", ".log.jsonl", ".students.csv", ".exercises.csv"):
        assert (pipeline / f"m{suffix}").exists()
    assert len((pipeline / "m.log.jsonl").read_text().splitlines()) == 15


def test_eval_json_matches_golden(pipeline, capsys):
    code, out, err = run(
        ["eval", "--checkpoint", str(pipeline / "m.ckpt"), "--data-dir", str(pipeline / "data"), "--sensitive", "escs"],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    golden = json.loads(GOLDEN.read_text())
    assert report.keys() == golden.keys()
    for key in ("auc", "acc", "eo", "d_under", "ir"):
        assert report[key] == pytest.approx(golden[key], abs=1e-9)
    assert report["groups"] == golden["groups"]
    assert "D_under" in err


def test_eval_rewrites_identical_files(pipeline, capsys):
    argv = ["eval", "--checkpoint", str(pipeline / "m.ckpt"), "--data-dir", str(pipeline / "data")]
    out = pipeline / "report.json"
    run([*argv, "--out", str(out)], capsys)
    first = out.read_bytes()
    run([*argv, "--out", str(out)], capsys)
    assert out.read_bytes() == first
    assert out.with_suffix(".txt").exists()


def test_causal_report(pipeline, capsys):
    out = pipeline / "effects.csv"
    code, stdout, _ = run(
        ["causal-report", "--checkpoint", str(pipeline / "m.ckpt"), "--data-dir", str(pipeline / "data"), "--out", str(out)],
        capsys,
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "student_id,group,TE_mean,NDE_mean,TIE_mean"
    assert len(lines) == 151
    assert set(json.loads(stdout)) >= {"TE_mean", "NDE_mean", "TIE_mean", "groups"}


def test_correlate(pipeline, capsys):
    code, out, _ = run(["correlate", "--data-dir", str(pipeline / "data"), "--k", "2"], capsys)
    assert code == 0
    assert len(json.loads(out)["selected"]) == 2


def test_unknown_subcommand(capsys):
    code, _, err = run(["bogus"], capsys)
    assert code == 1
    assert "usage:" in err


def test_unknown_config_key(tmp_path, capsys):
    code, _, err = run(["generate", "--out", str(tmp_path), "--set", "students=5"], capsys)
    assert code == 1
    assert "unknown key 'students'" in err


def test_missing_data_is_data_error(tmp_path, capsys):
    code, _, err = run(["train", "--data-dir", str(tmp_path), "--out", str(tmp_path / "m.ckpt")], capsys)
    assert code == 2
    assert "interactions.csv" in err


def test_wrong_sensitive_is_data_error(pipeline, capsys):
    code, _, err = run(
        ["eval", "--checkpoint", str(pipeline / "m.ckpt"), "--data-dir", str(pipeline / "data"), "--sensitive", "ctx1"],
        capsys,
    )
    assert code == 2


def test_numeric_failure_exit_code(pipeline, capsys, monkeypatch):
    def boom(*_a, **_k):
        raise cli.NumericalError("non-finite loss at epoch 1, batch 4")

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(["train", "--data-dir", str(pipeline / "data"), "--out", str(pipeline / "x.ckpt")], capsys)
    assert code == 3
    assert "batch 4" in err


def test_config_precedence(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("w4 = 2.0\nseed = 1\nce_heads = theta, theta_d\n")
    out = cli.load_config(str(cfg), ["seed=5"], cli.TrainConfig, seed=9)
    assert (out.w4, out.seed, out.ce_heads) == (2.0, 9, ("theta", "theta_d"))
