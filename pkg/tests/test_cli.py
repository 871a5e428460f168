import json
import subprocess
import sys

import numpy as np
import pytest

from cylocc.cli import main
from cylocc.formats import read_grid, read_weights
from cylocc.synthetic import make_gt, random_scene
from cylocc.config import PipelineConfig


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--scenes", "2", "--seed", "3", "--out", str(d)]) == 0
    return d


def test_synth_layout(data_dir):
    scenes = sorted(p.name for p in data_dir.iterdir())
    assert scenes == ["scene_0000", "scene_0001"]
    assert sorted(p.name for p in (data_dir / "scene_0000").iterdir()) == ["cam0.ppm", "cam1.ppm", "gt.ocgr", "lidar.ocpc", "scene.txt"]


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--scenes", "1", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_zero_scenes(tmp_path):
    assert main(["synth", "--scenes", "0", "--out", str(tmp_path / "empty")]) == 0
    assert list((tmp_path / "empty").iterdir()) == []


def test_synth_gt_matches_scene(data_dir):
    grid = read_grid(data_dir / "scene_0001" / "gt.ocgr")
    assert grid == make_gt(random_scene(4), PipelineConfig().cart)


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--scenes", "1", "--out", str(blocker / "sub")]) == 2


def test_eval_pred_equals_gt(data_dir, capsys):
    for d in data_dir.iterdir():
        (d / "pred.ocgr").write_bytes((d / "gt.ocgr").read_bytes())
    assert main(["eval", "--data", str(data_dir), "--pred", "pred.ocgr"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["miou_present"] == 1.0 and rep["iou_geometric"] == 1.0


def test_train_eval_run(data_dir, tmp_path, capsys):
    ckpt = tmp_path / "m.ocwt"
    assert main(["train", "--data", str(data_dir), "--out", str(ckpt), "--steps", "3"]) == 0
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1, 2]
    assert "head.1.w" in read_weights(ckpt)
    capsys.readouterr()
    assert main(["eval", "--data", str(data_dir), "--ckpt", str(ckpt)]) == 0
    assert set(json.loads(capsys.readouterr().out)["per_class"]) == {"ground", "vehicle", "pole", "building"}
    out = tmp_path / "p.ocgr"
    assert main(["run", "--scene", str(data_dir / "scene_0000"), "--ckpt", str(ckpt), "--out", str(out)]) == 0
    assert read_grid(out).shape == (40, 40, 8)
    # same flags, same checkpoint bytes
    ckpt2 = tmp_path / "m2.ocwt"
    assert main(["train", "--data", str(data_dir), "--out", str(ckpt2), "--steps", "3"]) == 0
    assert ckpt.read_bytes() == ckpt2.read_bytes()


def test_config_flag_precedence(data_dir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.steps = 100\ntrain.lr = 0.01\n")
    assert main(["train", "--data", str(data_dir), "--config", str(cfg), "--steps", "2", "--out", str(tmp_path / "m.ocwt")]) == 0
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 2


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["eval", "--data", "x"]) == 1
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("fusion.Q = 2\n")
    assert main(["synth", "--scenes", "1", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 1
    assert "bad.cfg:1" in capsys.readouterr().err


def test_data_errors(data_dir, tmp_path, capsys):
    bad = tmp_path / "bad.ocwt"
    bad.write_bytes(b"OCWT\x01\x00\x00\x00\x05")
    assert main(["run", "--scene", str(data_dir / "scene_0000"), "--ckpt", str(bad), "--out", str(tmp_path / "p")]) == 2
    err = capsys.readouterr().err
    assert "bad.ocwt: byte 8" in err
    assert main(["eval", "--data", str(tmp_path / "missing"), "--pred", "p.ocgr"]) == 2
    wrong = tmp_path / "wrong.ocwt"
    wrong.write_bytes(b"OCWT\x01\x00\x00\x00\x00\x00\x00\x00")
    assert main(["run", "--scene", str(data_dir / "scene_0000"), "--ckpt", str(wrong), "--out", str(tmp_path / "p")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1", "--skip-end-to-end"]) == 0
    assert "passed" in capsys.readouterr().out


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "cylocc.cli", "gradcheck", "--seeds", "1"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr


def test_check_failure_exit_code(monkeypatch, capsys):
    import cylocc.checks as checks
    from cylocc.autodiff import GradcheckReport

    bad = checks.CheckResult("op", "fake", 0, GradcheckReport([1.0], 1e-4))
    monkeypatch.setattr(checks, "run_suite", lambda *a, **k: [bad])
    assert main(["gradcheck"]) == 3
    assert "1 gradient checks failed" in capsys.readouterr().err
