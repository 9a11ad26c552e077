import json
import subprocess
import sys

import numpy as np
import pytest
from smallcfg import GRID, SCENE, pipeline_config

from bevgrid.cli import main
from bevgrid.formats import load_boxes, load_grid, load_occupancy, save_grid

OUT_FILES = ("heatmap.grid", "regression.grid", "bev_temporal.grid", "occupancy.grid", "boxes.txt",
             "trace.txt", "report.json")


@pytest.fixture
def scene_dir(tmp_path):
    (tmp_path / "scene_cfg.json").write_text(json.dumps(SCENE.to_dict()))
    cfg = pipeline_config().to_dict()
    del cfg["threads"]
    (tmp_path / "pipe_cfg.json").write_text(json.dumps(cfg))
    (tmp_path / "grid.json").write_text(json.dumps(GRID.to_dict()))
    assert main(["gen-scene", "--seed", "3", "--config", str(tmp_path / "scene_cfg.json"),
                 "--out", str(tmp_path / "scene")]) == 0
    return tmp_path


def run_pipeline(d, out, *extra):
    return main(["pipeline", "--scene", str(d / "scene" / "scene.txt"), "--config", str(d / "pipe_cfg.json"),
                 "--out", str(d / out), *extra])


def test_gen_scene_outputs(scene_dir):
    occ, spec = load_occupancy(scene_dir / "scene" / "occupancy_se.grid")
    assert spec == GRID and occ.num_classes == 17
    assert len(load_boxes(scene_dir / "scene" / "boxes_gt.txt")[0]) == SCENE.num_objects


def test_pipeline_is_deterministic_across_runs_and_threads(scene_dir):
    assert run_pipeline(scene_dir, "a") == 0
    assert run_pipeline(scene_dir, "b") == 0
    assert run_pipeline(scene_dir, "c", "--threads", "8") == 0
    for name in OUT_FILES:
        ref = (scene_dir / "a" / name).read_bytes()
        assert (scene_dir / "b" / name).read_bytes() == ref, name
        assert (scene_dir / "c" / name).read_bytes() == ref, name
    report = json.loads((scene_dir / "a" / "report.json").read_text())
    assert [t["stage"] for t in report["trace"]][-1] == "occupancy_logits"
    assert "image_features: 6 x 16 x 8 x 22" in (scene_dir / "a" / "trace.txt").read_text()


def test_pipeline_bad_config_exits_2(scene_dir, capsys):
    (scene_dir / "bad.json").write_text('{"lam": 3}')
    rc = main(["pipeline", "--scene", str(scene_dir / "scene" / "scene.txt"), "--config",
               str(scene_dir / "bad.json"), "--out", str(scene_dir / "x")])
    assert rc == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "contract" and "lambda" in err["message"]


def test_corrupted_scene_exits_2(scene_dir, capsys):
    text = (scene_dir / "scene" / "scene.txt").read_text()
    (scene_dir / "trunc.txt").write_text(text[: len(text) // 2])
    rc = main(["pipeline", "--scene", str(scene_dir / "trunc.txt"), "--out", str(scene_dir / "x")])
    assert rc == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "parse_error" and err["line"] is not None


def test_voxelize(tmp_path, capsys):
    (tmp_path / "grid.json").write_text(json.dumps(GRID.to_dict()))
    (tmp_path / "p.txt").write_text("0 0 0 4\n0.1 0.1 0.1 4\n10 10 1 9\n100 0 0 1\n")
    assert main(["voxelize", "--spec", str(tmp_path / "grid.json"), "--points", str(tmp_path / "p.txt"),
                 "--out", str(tmp_path / "o.grid")]) == 0
    assert json.loads(capsys.readouterr().out)["occupied_voxels"] == 2
    occ, _ = load_occupancy(tmp_path / "o.grid")
    assert sorted(np.unique(occ.class_ids[occ.labeled_mask])) == [4, 9]
    assert main(["voxelize", "--spec", str(tmp_path / "grid.json"), "--points", str(tmp_path / "p.txt"),
                 "--mode", "bo", "--out", str(tmp_path / "b.grid")]) == 0
    arr, header = load_grid(tmp_path / "b.grid")
    assert header["kind"] == "binary" and arr.sum() == 2


def test_lift_splat_and_fuse(scene_dir):
    d = scene_dir
    assert main(["lift-splat", "--scene", str(d / "scene" / "scene.txt"), "--grid", str(d / "grid.json"),
                 "--out", str(d / "bev.grid"), "--feature-hw", "8", "22", "--channels", "4"]) == 0
    bev, _ = load_grid(d / "bev.grid")
    assert bev.shape == (4, 32, 32) and bev.any()
    save_grid(d / "oc.grid", np.zeros_like(bev), "bev", GRID)
    assert main(["fuse", "--od", str(d / "bev.grid"), "--oc", str(d / "oc.grid"), "--lambda", "0",
                 "--out-od", str(d / "fo.grid"), "--out-oc", str(d / "fc.grid")]) == 0
    assert not load_grid(d / "fo.grid")[0].any()
    assert np.array_equal(load_grid(d / "fc.grid")[0], bev)


def test_loss_with_grad_check(tmp_path, capsys):
    rng = np.random.default_rng(0)
    save_grid(tmp_path / "h.grid", rng.uniform(0.05, 0.95, (2, 4, 4)))
    t = np.zeros((2, 4, 4))
    t[0, 1, 1] = 1.0
    t[0, 1, 2] = 0.5
    save_grid(tmp_path / "t.grid", t)
    assert main(["loss", "--kind", "focal", "--inputs", str(tmp_path / "h.grid"), str(tmp_path / "t.grid"),
                 "--grad-check", "--out", str(tmp_path / "g")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["gradients"]["heatmap"]["fd_check"]["passed"]
    assert load_grid(tmp_path / "g" / "grad_heatmap.grid")[0].shape == (2, 4, 4)
    assert main(["loss", "--kind", "focal", "--inputs", str(tmp_path / "h.grid")]) == 2


def test_eval_commands(scene_dir, capsys):
    s = scene_dir / "scene"
    # unscored predictions rank as score 1, so ground truth against itself is perfect
    assert main(["eval-det", "--pred", str(s / "boxes_gt.txt"), "--gt", str(s / "boxes_gt.txt"),
                 "--out", str(scene_dir / "det.json")]) == 0
    det = json.loads((scene_dir / "det.json").read_text())
    assert det["mAP"] == 1.0 and det["NDS"] == 1.0
    assert main(["eval-occ", "--pred", str(s / "occupancy_se.grid"), "--gt", str(s / "occupancy_se.grid"),
                 "--out", str(scene_dir / "occ.json")]) == 0
    assert json.loads((scene_dir / "occ.json").read_text())["mIoU"] == 1.0


def test_console_script_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "bevgrid.cli", "voxelize", "--spec", str(tmp_path / "missing.json"),
                        "--points", "x", "--out", "y"], capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr)["error"] in ("io", "parse_error")
