import json

import numpy as np
import pytest

from conftest import make_cloud
from confsplat import io
from confsplat.cli import main
from confsplat.meshing import TriMesh


def test_no_args_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_and_command(capsys):
    assert main(["mesh", "--cloud", "a.ply", "--out", "b.obj", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag():
    assert main(["eval", "--pred", "x.obj"]) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "gradcheck" in capsys.readouterr().out


def test_eval_identical_meshes_json(tmp_path, capsys):
    mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]],
                   [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    io.export_mesh(mesh, tmp_path / "m.ply")
    io.export_mesh(mesh, tmp_path / "g.ply")
    code = main(["eval", "--pred", str(tmp_path / "m.ply"), "--gt", str(tmp_path / "g.ply"),
                 "--tau", "0.05"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["f1"] == 1.0 and doc["precision"] == 1.0 and doc["recall"] == 1.0
    assert doc["tau"] == 0.05 and doc["n_samples"] == 100_000
    assert list(doc) == ["psnr", "ssim", "precision", "recall", "f1", "chamfer", "tau",
                         "n_samples", "seed"]


def test_runtime_failure_exit_one(tmp_path, capsys):
    assert main(["mesh", "--cloud", str(tmp_path / "missing.ply"), "--out",
                 str(tmp_path / "m.obj")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["eval", "--pred", str(tmp_path / "nope.obj"), "--gt", str(tmp_path / "nope.obj")]) == 1


def test_synth_render_mesh_pipeline(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert main(["synth", "--kind", "sphere", "--views", "2", "--res", "8", "--out",
                 str(scene)]) == 0
    scene_json = next(scene.rglob("scene.json"))
    cams, images, _, _ = io.load_scene(scene_json)
    assert len(cams) == 2 and images[0].shape == (8, 8, 3)

    cloud = make_cloud([[0.0, 0.0, 0.0]], log_scales=np.log(0.3), opacities=0.999,
                       colors=[0.5, 0.2, 0.1])
    io.save_cloud(cloud, tmp_path / "c.ply")
    assert main(["render", "--cloud", str(tmp_path / "c.ply"), "--scene", str(scene_json),
                 "--out", str(tmp_path / "r")]) == 0
    img = io.read_ppm(tmp_path / "r" / "view_000.ppm")
    assert img.shape == (8, 8, 3) and img.max() > 0
    assert io.read_pfm(tmp_path / "r" / "view_001_depth.pfm").shape == (8, 8)

    assert main(["mesh", "--cloud", str(tmp_path / "c.ply"), "--out", str(tmp_path / "m.obj"),
                 "--res", "16"]) == 0
    mesh = io.load_mesh(tmp_path / "m.obj")
    assert len(mesh.faces) > 0 and mesh.is_watertight()


def test_train_smoke(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert main(["synth", "--kind", "plane", "--views", "2", "--res", "8", "--out", str(scene)]) == 0
    scene_json = next(scene.rglob("scene.json"))
    out = tmp_path / "run"
    assert main(["train", "--scene", str(scene_json), "--out", str(out), "--iters", "3",
                 "--appearance", "none"]) == 0
    assert (out / "final.ply").exists()
    assert len((out / "loss_log.csv").read_text().splitlines()) == 4


def test_train_bad_scene_exit_one(tmp_path):
    (tmp_path / "scene.json").write_text("{}")
    assert main(["train", "--scene", str(tmp_path / "scene.json"), "--out",
                 str(tmp_path / "o")]) == 1


@pytest.mark.slow
def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--seed", "7", "--scenes", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
