import math

import numpy as np
import pytest

from conftest import make_cloud, random_cloud
from confsplat.meshing import (TriMesh, evaluate_grid, extract_mesh, field_eval, field_eval_many,
                               mesh_bounds)
from confsplat.scene import GaussianCloud

RADIUS = math.sqrt(2 * math.log(0.999 / 0.5))


def _blob():
    return make_cloud([[0.0, 0.0, 0.0]], opacities=0.999)


def test_field_peak_and_decay():
    cloud = make_cloud([[0.3, -0.2, 1.0]], opacities=0.9)
    assert field_eval(cloud, [0.3, -0.2, 1.0]) == pytest.approx(0.9, abs=1e-15)
    assert field_eval(cloud, [11.0, 0, 0]) < 1e-9


def test_field_two_overlapping_brute_max(rng):
    cloud = random_cloud(rng, 2, spread=0.2)
    for _ in range(50):
        x = rng.uniform(-1, 1, 3)
        ref = 0.0
        for i in range(2):
            g = cloud[i]
            R = g.rotmat
            inv = R @ np.diag(np.exp(-2 * g.log_scale)) @ R.T
            d = x - g.position
            ref = max(ref, g.opacity * math.exp(-0.5 * d @ inv @ d))
        assert abs(field_eval(cloud, x) - min(ref, 0.999)) <= 1e-12


def test_field_bounded(rng):
    cloud = random_cloud(rng, 12)
    cloud.opacity_logits[:] = 30.0
    v = field_eval_many(cloud, rng.uniform(-1, 1, (500, 3)))
    assert v.min() >= 0 and v.max() <= 0.999


def test_grid_matches_exact_field(rng):
    cloud = random_cloud(rng, 6)
    lo, hi = mesh_bounds(cloud)
    F = evaluate_grid(cloud, lo, hi, 8)
    axes = [np.linspace(lo[k], hi[k], 9) for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    exact = field_eval_many(cloud, pts).reshape(F.shape)
    # values below the 1/255 cutoff may be dropped; everything else is exact
    keep = exact >= 1 / 255
    np.testing.assert_allclose(F[keep], exact[keep], atol=1e-12)
    assert np.all(F[~keep] <= exact[~keep] + 1e-12)


def test_single_gaussian_sphere_radius():
    mesh = extract_mesh(_blob(), 128)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert RADIUS == pytest.approx(1.176560, abs=1e-6)
    assert np.max(np.abs(r - RADIUS)) <= 1e-3
    lo, hi = mesh_bounds(_blob())
    cell = float(np.max(hi - lo)) / 128
    # each vertex is within 2^-10 of its (at most cube-diagonal) edge
    assert np.max(np.abs(r - RADIUS)) <= math.sqrt(3) * cell * 2**-10 + 1e-12


def test_single_gaussian_watertight_and_oriented():
    mesh = extract_mesh(_blob(), 32)
    counts = mesh.edge_counts()
    assert set(counts.values()) == {2}
    assert mesh.is_watertight()
    # outward orientation: signed volume positive and close to the ball volume
    v = mesh.vertices
    vol = np.einsum("ij,ij->i", v[mesh.faces[:, 0]],
                    np.cross(v[mesh.faces[:, 1]], v[mesh.faces[:, 2]])).sum() / 6
    assert vol == pytest.approx(4 / 3 * math.pi * RADIUS**3, rel=0.02)
    assert mesh.triangle_areas().min() > 1e-12


def test_refinement_monotone():
    errs = []
    for res in (64, 128):
        r = np.linalg.norm(extract_mesh(_blob(), res).vertices, axis=1)
        errs.append(np.max(np.abs(r - RADIUS)))
    assert errs[1] <= errs[0]


def test_vertices_satisfy_bisection_contract(rng):
    cloud = random_cloud(rng, 5, spread=0.3)
    cloud.opacity_logits[:] = 3.0
    mesh = extract_mesh(cloud, 24)
    assert len(mesh)
    lo, hi = mesh_bounds(cloud)
    step = float(np.linalg.norm((hi - lo) / 24))
    f = field_eval_many(cloud, mesh.vertices)
    # the field gradient of a unit-opacity Gaussian is bounded by exp(-1/2) / sigma_min
    lip = math.exp(-0.5) / float(np.exp(cloud.log_scales).min())
    assert np.max(np.abs(f - 0.5)) <= lip * step * 2**-10 + 1e-9


def test_empty_and_no_crossing():
    assert len(extract_mesh(GaussianCloud.empty(), 16)) == 0
    faint = make_cloud([[0.0, 0, 0]], opacities=0.3)
    assert len(extract_mesh(faint, 16)) == 0


def test_deterministic(rng):
    cloud = random_cloud(rng, 8)
    a, b = extract_mesh(cloud, 20), extract_mesh(cloud, 20)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


def test_argument_validation():
    with pytest.raises(ValueError):
        extract_mesh(_blob(), 16, iso=0.9995)
    with pytest.raises(ValueError):
        extract_mesh(_blob(), 0)
    with pytest.raises(ValueError):
        TriMesh(np.zeros((2, 3)), [[0, 1, 2]])
