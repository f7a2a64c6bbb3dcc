import numpy as np
import pytest

from conftest import random_cloud, small_camera
from confsplat import io
from confsplat.appearance import AppearanceModel, appearance_from_parameters, make_appearance
from confsplat.meshing import TriMesh


def test_cloud_ply_round_trip(rng, tmp_path):
    cloud = random_cloud(rng, 7)
    path = tmp_path / "c.ply"
    io.save_cloud(cloud, path)
    back = io.load_cloud(path)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    for name in ("means", "quats", "log_scales", "opacity_logits", "sh", "gamma"):
        np.testing.assert_array_equal(getattr(back, name), f32(getattr(cloud, name)))
    props = list(io.read_ply(path)["vertex"])
    assert props == io.cloud_property_names()
    assert props[-1] == "gamma" and len(props) == 63


def test_empty_cloud_ply(tmp_path):
    from confsplat.scene import GaussianCloud
    io.save_cloud(GaussianCloud.empty(), tmp_path / "e.ply")
    assert len(io.load_cloud(tmp_path / "e.ply")) == 0


def test_ppm_round_trip(rng, tmp_path):
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    io.write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "a.ppm"), img)
    np.testing.assert_array_equal(io.read_image(tmp_path / "a.ppm"), img)


def test_pgm_mask_and_png(tmp_path):
    from PIL import Image
    mask = np.array([[True, False], [False, True]])
    io.write_pgm(tmp_path / "m.pgm", mask)
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "m.pgm")[:, :, 0] > 0.5, mask)
    Image.fromarray(np.full((3, 4, 3), 51, dtype=np.uint8)).save(tmp_path / "x.png")
    np.testing.assert_allclose(io.read_image(tmp_path / "x.png"), 0.2, atol=1e-15)


def test_pfm_round_trip(rng, tmp_path):
    for img in (rng.random((4, 6)), rng.random((3, 5, 3))):
        io.write_pfm(tmp_path / "d.pfm", img)
        np.testing.assert_array_equal(io.read_pfm(tmp_path / "d.pfm"),
                                      img.astype(np.float32).astype(np.float64))


def _random_mesh(rng):
    return TriMesh(rng.normal(size=(20, 3)), rng.integers(0, 20, (15, 3)))


@pytest.mark.parametrize("fmt", ["obj", "ply"])
def test_mesh_round_trip_bit_equal_float32(rng, tmp_path, fmt):
    mesh = _random_mesh(rng)
    path = tmp_path / f"m.{fmt}"
    io.export_mesh(mesh, path)
    back = io.load_mesh(path)
    np.testing.assert_array_equal(back.vertices.astype(np.float32), mesh.vertices.astype(np.float32))
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_unit_triangle_obj(tmp_path):
    io.export_mesh(TriMesh(np.eye(3), [[0, 1, 2]]), tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 3
    assert [l for l in lines if l.startswith("f ")] == ["f 1 2 3"]


@pytest.mark.parametrize("fmt", ["obj", "ply"])
def test_empty_mesh_file(tmp_path, fmt):
    io.export_mesh(TriMesh.empty(), tmp_path / f"e.{fmt}")
    back = io.load_mesh(tmp_path / f"e.{fmt}")
    assert len(back.vertices) == 0 and len(back.faces) == 0


def test_mesh_format_errors(tmp_path):
    with pytest.raises(ValueError):
        io.export_mesh(TriMesh.empty(), tmp_path / "x.stl")
    with pytest.raises(OSError):
        io.export_mesh(TriMesh.empty(), tmp_path / "missing" / "x.obj")


def test_ply_rejects_garbage(tmp_path):
    (tmp_path / "g.ply").write_bytes(b"nope\nend_header\n")
    with pytest.raises(ValueError):
        io.read_ply(tmp_path / "g.ply")


def test_ascii_ply_reader(tmp_path):
    (tmp_path / "a.ply").write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
        "property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    m = io.load_mesh(tmp_path / "a.ply")
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])
    assert m.vertices[1, 0] == 1.0


def test_appearance_sidecar_round_trip(rng, tmp_path):
    m = AppearanceModel(3, widths=(4, 4, 4), seed=1)
    m.net.weights[-1] = rng.normal(0, 0.1, m.net.weights[-1].shape)
    io.save_appearance(tmp_path / "a.bin", m)
    kind, params = io.load_appearance(tmp_path / "a.bin")
    assert kind == "cnn"
    for k, v in m.parameters().items():
        np.testing.assert_array_equal(params[k], v.astype(np.float32).astype(np.float64))
    r = appearance_from_parameters(kind, params)
    assert r.parameters().keys() == m.parameters().keys()
    for kind in ("pgsr", "h3dgs"):
        a = make_appearance(kind, 2)
        io.save_appearance(tmp_path / kind, a)
        assert io.load_appearance(tmp_path / kind)[0] == kind


def test_appearance_sidecar_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"XXXXXXXX" + bytes(20))
    with pytest.raises(ValueError):
        io.load_appearance(tmp_path / "x")


def test_scene_round_trip(rng, tmp_path):
    cams = [small_camera(6, image_id=i) for i in range(2)]
    imgs = [rng.integers(0, 256, (6, 6, 3)) / 255.0 for _ in cams]
    masks = [rng.random((6, 6)) > 0.5 for _ in cams]
    io.save_scene(tmp_path / "s" / "scene.json", cams, imgs, {"kind": "test"}, masks)
    c2, i2, m2, doc = io.load_scene(tmp_path / "s" / "scene.json")
    assert doc["kind"] == "test"
    for a, b in zip(cams, c2):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
        assert (a.fx, a.width, a.image_id) == (b.fx, b.width, b.image_id)
    for a, b in zip(imgs, i2):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(masks, m2):
        np.testing.assert_array_equal(a, b)


def test_scene_size_mismatch(rng, tmp_path):
    cam = small_camera(6)
    io.save_scene(tmp_path / "scene.json", [cam], [rng.random((5, 6, 3))])
    with pytest.raises(ValueError):
        io.load_scene(tmp_path / "scene.json")


def test_loss_log(tmp_path):
    log = io.LossLog(tmp_path / "l.csv", ["a", "b"])
    log.write([3, 0.5, 0.25, 0.75])
    log.close()
    assert (tmp_path / "l.csv").read_text().splitlines() == ["iteration,a,b,total",
                                                              "3,0.5,0.25,0.75"]
