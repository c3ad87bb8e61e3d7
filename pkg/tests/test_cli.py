import csv
import json
import subprocess
import sys

import pytest

from ss2r import cli


def run(*args):
    return cli.main([str(a) for a in args])


def events(capsys):
    return [json.loads(l) for l in capsys.readouterr().out.splitlines() if l.startswith("{")]


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for cmd in ["gen-data", "train-stage1", "train-disc", "train-stage2", "simulate", "fuse", "eval"]:
        assert run(cmd, "--preset", "smoke", "--out", root) == 0, cmd
    return root


def test_full_command_sequence(cli_run):
    assert (cli_run / "config.json").exists()
    assert list((cli_run / "samples" / "ply" / "D2").glob("*.ply"))
    assert not list(cli_run.glob("*.incomplete")) and not (cli_run / ".lock").exists()


def test_eval_identical_inputs(cli_run, capsys):
    assert run("eval", "--out", cli_run, "--sim", "R", "--real", "R") == 0
    rows = list(csv.DictReader(open(cli_run / "metrics" / "pair_R_vs_R.csv")))
    assert all(float(r["chamfer_l2_x1000"]) == 0 and float(r["f_score"]) == 100 and float(r["voxel_iou"]) == 100
               for r in rows)
    assert events(capsys)[-1]["f_score"] == 100


def test_omega_lambda_violation_exits_1(tmp_path, capsys):
    assert run("gen-data", "--preset", "smoke", "--out", tmp_path, "--set", "omega=1.5", "--set", "lam=0.5") == 1
    msg = events(capsys)[-1]["message"]
    assert "lambda" in msg and "omega" in msg
    assert not (tmp_path / "config.json").exists()


def test_unknown_override_exits_1(tmp_path):
    assert run("gen-data", "--preset", "smoke", "--out", tmp_path, "--set", "nope=1") == 1


def test_stage_order_enforced(tmp_path, capsys):
    assert run("train-stage2", "--preset", "smoke", "--out", tmp_path) == 1
    assert run("gen-data", "--preset", "smoke", "--out", tmp_path) == 0
    assert run("train-stage2", "--out", tmp_path) == 1
    assert "train-stage1" in events(capsys)[-1]["message"]
    assert run("train-stage1", "--out", tmp_path) == 0
    assert run("train-stage2", "--out", tmp_path) == 1
    assert "train-disc" in events(capsys)[-1]["message"]


def test_refuses_to_overwrite_different_config(cli_run):
    assert run("gen-data", "--preset", "smoke", "--out", cli_run, "--seed", "7") == 1
    assert run("gen-data", "--preset", "smoke", "--out", cli_run) == 0


def test_resolved_config_reproduces_run(cli_run, tmp_path):
    assert run("gen-data", "--config", cli_run / "config.json", "--out", tmp_path) == 0
    assert run("train-stage1", "--out", tmp_path) == 0
    assert (tmp_path / "checkpoints/stage1.ckpt").read_bytes() == (cli_run / "checkpoints/stage1.ckpt").read_bytes()


def test_lock_blocks_concurrent_writer(cli_run, capsys):
    import os
    (cli_run / ".lock").write_text(str(os.getppid()))
    try:
        assert run("eval", "--out", cli_run) == 1
        assert "locked" in events(capsys)[-1]["message"]
    finally:
        (cli_run / ".lock").unlink()
    (cli_run / ".lock").write_text("999999999")  # stale lock from a dead process
    assert run("eval", "--out", cli_run) == 0


def test_runtime_fault_exits_2_and_leaves_marker(tmp_path, monkeypatch):
    assert run("gen-data", "--preset", "smoke", "--out", tmp_path) == 0

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli.pl, "train_stage1", boom)
    assert run("train-stage1", "--out", tmp_path) == 2
    assert (tmp_path / "train-stage1.incomplete").exists()


def test_report(cli_run, tmp_path):
    assert run("report", "--out", cli_run) == 0
    out = cli_run / "report"
    md = (out / "summary.md").read_text()
    for name in ["metrics.svg", "loss_curves.svg", "residual_variance.svg", "discriminator.svg"]:
        assert (out / name).exists() and name in md
    mean = [r for r in csv.DictReader(open(cli_run / "metrics" / "eval_D2.csv")) if r["sample_id"] == "mean"][0]
    assert f"| {mean['chamfer_l2_x1000']} | {mean['f_score']} | {mean['voxel_iou']} |" in md
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert run("report", "--out", cli_run) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
    assert run("report", "--out", tmp_path) == 1


def test_report_with_stage1_only(tmp_path):
    for cmd in ["gen-data", "train-stage1", "simulate", "eval", "report"]:
        assert run(cmd, "--preset", "smoke", "--set", "stages=1", "--out", tmp_path) == 0, cmd
    md = (tmp_path / "report" / "summary.md").read_text()
    assert "Stage II" not in md and "Stage I" in md


def test_gradcheck_command_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ss2r.cli", "gradcheck"], capture_output=True, text=True, timeout=600)
    lines = [json.loads(l) for l in proc.stdout.splitlines()]
    assert proc.returncode == 0 and lines[-1]["ok"]
    ops = [l for l in lines if l["event"] == "gradcheck"]
    assert {"denoiser", "discriminator", "conv2d"} <= {l["op"] for l in ops}
    assert all(l["max_rel_error"] < 1e-4 for l in ops)
