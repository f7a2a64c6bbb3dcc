"""Randomised property checks (hypothesis)."""

import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_ray
from confsplat import losses as L
from confsplat.meshing import TriMesh, extract_mesh
from confsplat.metrics import MetricsReport, chamfer, f1_score, psnr
from confsplat.render import CONF_MAX, CONF_MIN, render_ray
from confsplat.scene import GaussianCloud, quat_to_rotmat
from confsplat.training import effective_threshold

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
points = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=finite)
SETTINGS = settings(max_examples=60, deadline=None)


@SETTINGS
@given(points, points, st.floats(1e-3, 5.0))
def test_f1_swap_exchanges_precision_and_recall(a, b, tau):
    p, r, f = f1_score(a, b, tau, brute=True)
    q, s, g = f1_score(b, a, tau, brute=True)
    assert (p, r) == (s, q)
    assert 0.0 <= f <= 1.0 and math.isclose(f, g, abs_tol=1e-15)


@SETTINGS
@given(points, points)
def test_chamfer_symmetric_and_tree_equals_brute(a, b):
    assert chamfer(a, b) == chamfer(b, a)
    assert math.isclose(chamfer(a, b), chamfer(a, b, brute=True), rel_tol=1e-12, abs_tol=1e-12)


@SETTINGS
@given(arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)))
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


@SETTINGS
@given(st.lists(st.floats(1e-300, 1e6), min_size=1, max_size=50), st.floats(1e-8, 1.0))
def test_effective_threshold_never_below_tau(conf, tau):
    assert np.all(effective_threshold(conf, tau) >= tau)


@SETTINGS
@given(st.floats(0, 2), st.floats(CONF_MIN, CONF_MAX), st.floats(0, 1))
def test_confidence_gradient_bounds(rgb, conf, beta):
    g = float(L.confidence_grad(rgb, conf, beta))
    assert -beta / CONF_MIN <= g <= rgb


@SETTINGS
@given(arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_rotation_is_orthonormal(q):
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert math.isclose(np.linalg.det(R), 1.0, abs_tol=1e-12)


@SETTINGS
@given(st.integers(0, 2**32 - 1))
def test_blend_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    q = rng.normal(size=(n, 4))
    cloud = GaussianCloud(rng.uniform(-0.6, 0.6, (n, 3)), q, np.log(rng.uniform(0.05, 0.6, (n, 3))),
                          rng.uniform(-2, 6, n), rng.normal(size=(n, 16, 3)), rng.normal(size=n),
                          active_sh_degree=int(rng.integers(0, 4)))
    s = render_ray(cloud, random_ray(rng))
    assert abs(s.weights.sum() + s.transmittance_remaining - 1.0) <= 1e-9
    assert np.all(np.diff(s.ts) >= 0)
    assert CONF_MIN <= s.confidence <= CONF_MAX


@SETTINGS
@given(st.floats(min_value=0, allow_nan=False), st.floats(0, 1), st.integers(1, 10**6),
       st.integers(0, 99))
def test_metrics_json_round_trip(x, tau, n, seed):
    rep = MetricsReport(psnr=x, ssim=0.5, precision=1.0, recall=0.0, f1=0.0, chamfer=x,
                        tau=tau, n_samples=n, seed=seed)
    text = rep.to_json()
    assert MetricsReport.from_json(text).to_json() == text


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_extracted_meshes_are_closed(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    cloud = GaussianCloud(rng.uniform(-0.5, 0.5, (n, 3)), rng.normal(size=(n, 4)),
                          np.log(rng.uniform(0.1, 0.4, (n, 3))), rng.uniform(0.5, 6, n),
                          np.zeros((n, 16, 3)), np.zeros(n))
    mesh = extract_mesh(cloud, 12)
    assert isinstance(mesh, TriMesh)
    if len(mesh.faces):
        assert set(mesh.edge_counts().values()) == {2}
