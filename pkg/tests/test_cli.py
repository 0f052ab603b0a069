import csv
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from coarse2fine import cli
from coarse2fine import evaluation as E
from coarse2fine import meshkit as mk
from coarse2fine import trainer as tr

TINY = ["--set", "schedule.epochs_a=1", "--set", "schedule.epochs_b=1", "--set", "schedule.epochs_c=1"]


def _tree(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end run shared by the tests below: synth, train."""
    root = tmp_path_factory.mktemp("cli")
    cwd = os.getcwd()
    os.chdir(root)
    try:
        assert cli.main(["synth", "--count", "6", "--seed", "1", "--out", "data"]) == 0
        assert cli.main(["synth", "--count", "3", "--seed", "2", "--out", "test"]) == 0
        assert cli.main(["train", *TINY, "--data", "data", "--out", "run"]) == 0
    finally:
        os.chdir(cwd)
    return root


def test_synth_and_train_outputs(workspace):
    assert (workspace / "data" / "annotations.txt").exists()
    assert (workspace / "data" / "config.cfg").exists()
    ck = workspace / "run" / "checkpoints"
    assert {p.name for p in ck.iterdir()} == {"A_end.ckpt", "B_end.ckpt", "C_end.ckpt", "final.ckpt"}
    rows = tr.read_log(str(workspace / "run" / "log.csv"))
    assert [r["stage"] for r in rows] == ["A", "B", "C"]


def test_train_writes_resolved_config(workspace):
    text = (workspace / "run" / "config.cfg").read_text()
    assert "schedule.epochs_a = 1\n" in text and "schedule.epochs_c = 1\n" in text


def test_eval_writes_report_and_table(workspace, capsys):
    ck = str(workspace / "run" / "checkpoints" / "final.ckpt")
    out = workspace / "ev"
    assert cli.main(["eval", "--checkpoint", ck, "--data", str(workspace / "test"), "--out", str(out)]) == 0
    table = (out / "table.txt").read_text()
    assert table == capsys.readouterr().out
    parsed = E.parse_table(table)
    rows = E.read_report_csv(str(out / "report.csv"))
    assert set(parsed) == {"coarse", "refined"}
    refined_iou = np.mean([r["iou"] for r in rows if r["stage"] == "refined"])
    assert abs(parsed["refined"][0] - 100 * refined_iou) < 0.006


def test_fit_writes_traces(workspace):
    out = workspace / "fit"
    argv = ["fit", "--data", str(workspace / "test"), "--iterations", "4", "--index", "0", "--index", "2",
            "--out", str(out)]
    assert cli.main(argv) == 0
    with open(out / "fit_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["sample"] for r in rows] == ["0", "2"]
    for r in rows:
        with open(out / f"trace_{r['name']}.csv") as fh:
            trace = list(csv.DictReader(fh))
        assert len(trace) == 4
        params = np.load(out / f"fit_{r['name']}.npz")
        assert set(params.files) == {"betas", "pose", "trans", "focal"}


def test_fit_bad_index_is_domain_error(workspace):
    assert cli.main(["fit", "--data", str(workspace / "test"), "--index", "99", "--out",
                     str(workspace / "fitbad")]) == 1


def test_render_overlay(workspace):
    out = workspace / "ov"
    ck = str(workspace / "run" / "checkpoints" / "final.ckpt")
    assert cli.main(["render-overlay", "--checkpoint", ck, "--data", str(workspace / "test"), "--index", "1",
                     "--scale", "2", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.glob("*.png"))
    assert len(names) == 2 and names[0].endswith("_coarse.png") and names[1].endswith("_refined.png")
    assert Image.open(out / names[0]).size == (128, 128)


def test_decimate_and_export(tmp_path):
    assert cli.main(["export-model", "--out", str(tmp_path / "m")]) == 0
    obj = tmp_path / "m" / "template.obj"
    assert cli.main(["decimate", "--mesh", str(obj), "--out", str(tmp_path / "d")]) == 0
    h = mk.load_hierarchy(str(tmp_path / "d" / "hierarchy.bin"))
    assert h.sizes == [482, 121, 31]
    assert mk.read_obj(str(tmp_path / "d" / "level2.obj")).n_vertices == 31


def test_gradcheck_single_suite(capsys):
    assert cli.main(["gradcheck", "--suite", "camera.project"]) == 0
    assert "1/1 suites within tolerance" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["gradcheck"],
    ["gradcheck", "--suite", "no.such.suite"],
    ["synth"],  # --out is required
    ["synth", "--set", "novalue", "--out", "x"],
    ["train", "--seed", "abc", "--out", "x"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2
    assert _tree(tmp_path) == []


@pytest.mark.parametrize("argv", [
    ["synth", "--set", "nope.key=1", "--out", "x"],
    ["synth", "--set", "schedule.batch_size=0", "--out", "x"],
    ["synth", "--config", "missing.cfg", "--out", "x"],
    ["eval", "--checkpoint", "missing.ckpt", "--data", "d", "--out", "x"],
    ["decimate", "--mesh", "missing.obj", "--out", "x"],
])
def test_domain_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1


def test_corrupt_checkpoint_exit_1(workspace, tmp_path):
    data = (workspace / "run" / "checkpoints" / "final.ckpt").read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(data[: len(data) // 2])
    assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(workspace / "test"),
                     "--out", str(tmp_path / "o")]) == 1


def test_malformed_annotations_exit_1(tmp_path):
    (tmp_path / "annotations.txt").write_text("this is not a record\n")
    assert cli.main(["train", *TINY, "--data", str(tmp_path), "--out", str(tmp_path / "run")]) == 1


def test_env_config_and_override(tmp_path, monkeypatch):
    cfgfile = tmp_path / "env.cfg"
    cfgfile.write_text("data.count = 2\nseed = 5\n")
    monkeypatch.setenv("C2F_CONFIG", str(cfgfile))
    assert cli.main(["synth", "--set", "seed=6", "--out", str(tmp_path / "s")]) == 0
    text = (tmp_path / "s" / "config.cfg").read_text()
    assert "data.count = 2\n" in text and "seed = 6\n" in text
    lines = (tmp_path / "s" / "annotations.txt").read_text().strip().splitlines()
    assert sum(ln.startswith("name=") for ln in lines) == 2


def test_writes_only_under_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["synth", "--count", "2", "--out", "only"]) == 0
    assert cli.main(["export-model", "--out", "only/model"]) == 0
    assert all(p.startswith("only" + os.sep) for p in _tree(tmp_path))


def test_module_entry_point(tmp_path):
    run = subprocess.run([sys.executable, "-m", "coarse2fine", "gradcheck", "--suite", "loss.keypoint"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert run.returncode == 0 and "loss.keypoint" in run.stdout
    run = subprocess.run([sys.executable, "-m", "coarse2fine", "frobnicate"], capture_output=True, text=True,
                         cwd=tmp_path)
    assert run.returncode == 2
