import math

import numpy as np
import pytest

from confsplat.scene import (Camera, Gaussian, GaussianCloud, ImageBuffer, Ray, covariance,
                             gaussian_normal, logit, pixel_ray, quat_to_rotmat, sigmoid)


def _gauss(q=(1.0, 0, 0, 0), log_scale=(0.0, 0.0, 0.0), mu=(0.0, 0.0, 0.0)):
    return Gaussian(np.array(mu, dtype=float), np.array(q, dtype=float),
                    np.array(log_scale, dtype=float), 0.0, np.zeros((16, 3)), 0.0)


def _random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def test_covariance_identity():
    S, inv = covariance(_gauss())
    np.testing.assert_array_equal(S, np.eye(3))
    np.testing.assert_array_equal(inv, np.eye(3))


def test_covariance_diagonal():
    S, _ = covariance(_gauss(log_scale=(math.log(2.0), 0, 0)))
    np.testing.assert_allclose(S, np.diag([4.0, 1.0, 1.0]), atol=1e-15)


def test_covariance_inverse_against_general_inversion(rng):
    for _ in range(50):
        g = _gauss(_random_quat(rng), rng.uniform(-2, 1, 3))
        S, inv = covariance(g)
        np.testing.assert_allclose(S @ inv, np.eye(3), atol=1e-8)
        np.testing.assert_allclose(inv, np.linalg.inv(S), rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(S, S.T, atol=1e-9)


def test_covariance_positive_definite(rng):
    g = _gauss(_random_quat(rng), rng.uniform(-2, 1, 3))
    S, _ = covariance(g)
    x = rng.normal(size=(100, 3))
    assert np.all(np.einsum("ni,ij,nj->n", x, S, x) > 0)


def test_normal_flat_disc_faces_viewer():
    g = _gauss(log_scale=(0, 0, -3))
    np.testing.assert_array_equal(gaussian_normal(g, np.array([0, 0, 1.0])), [0, 0, -1.0])
    np.testing.assert_array_equal(gaussian_normal(g, np.array([0, 0, -1.0])), [0, 0, 1.0])


def test_normal_random_rotation_eigen_oracle(rng):
    for _ in range(20):
        g = _gauss(_random_quat(rng), rng.uniform(-2, 1, 3))
        view = rng.normal(size=3)
        view /= np.linalg.norm(view)
        n = gaussian_normal(g, view)
        S, _ = covariance(g)
        evals, evecs = np.linalg.eigh(S)
        assert abs(np.linalg.norm(n) - 1) < 1e-8
        assert abs(n @ evecs[:, 1]) < 1e-8 and abs(n @ evecs[:, 2]) < 1e-8
        assert n @ view <= 0


def test_normal_tie_picks_lower_axis():
    g = _gauss(log_scale=(-1.0, -1.0, 0.0))
    n = gaussian_normal(g, np.array([1.0, 0, 0]))
    np.testing.assert_array_equal(n, [-1.0, 0, 0])


def test_normal_invariant_under_quaternion_negation(rng):
    q = _random_quat(rng)
    ls = rng.uniform(-2, 1, 3)
    view = np.array([0.3, -0.2, 0.9])
    view /= np.linalg.norm(view)
    np.testing.assert_allclose(gaussian_normal(_gauss(q, ls), view),
                               gaussian_normal(_gauss(-q, ls), view), atol=1e-12)


def test_pixel_ray_principal_point():
    cam = Camera(10.0, 10.0, 4.0, 4.0, 8, 8)
    r = pixel_ray(cam, (3.5, 3.5))
    np.testing.assert_allclose(r.direction, [0, 0, 1.0], atol=1e-15)


def test_pixel_ray_center_offset_cancels():
    cam = Camera(1.0, 1.0, 0.0, 0.0, 8, 8)
    r = pixel_ray(cam, (-0.5, -0.5))
    np.testing.assert_allclose(r.direction, [0, 0, 1.0], atol=1e-15)


def test_pixel_ray_origin_is_camera_center(rng):
    R = quat_to_rotmat(_random_quat(rng))
    t = rng.normal(size=3)
    cam = Camera(10.0, 10.0, 4.0, 4.0, 8, 8, R, t)
    # invert the rigid transform as a 4x4 matrix
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = R, t
    center = np.linalg.inv(M)[:3, 3]
    np.testing.assert_allclose(pixel_ray(cam, (2, 5)).origin, center, atol=1e-9)


def test_ray_directions_match_pixel_ray(rng):
    cam = Camera.look_at((1.0, 2.0, -3.0), (0, 0, 0), (0, -1, 0), 9.0, 11.0, 5, 4)
    dirs = cam.ray_directions()
    for p in (0, 7, 19):
        y, x = divmod(p, cam.width)
        np.testing.assert_allclose(dirs[p], pixel_ray(cam, (x, y)).direction, atol=1e-12)


def test_ray_direction_normalised():
    r = Ray(np.zeros(3), np.array([3.0, 4.0, 0.0]))
    assert abs(np.linalg.norm(r.direction) - 1) < 1e-12


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 5, 0, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 2, 2, 4, 4, R=np.ones((3, 3)))


def test_activation_round_trips():
    x = np.linspace(-10, 10, 2001)
    np.testing.assert_allclose(logit(sigmoid(x)), x, atol=1e-9)
    np.testing.assert_allclose(np.log(np.exp(x)), x, atol=1e-9)


def test_cloud_properties_and_select(rng):
    from conftest import random_cloud

    c = random_cloud(rng, 6)
    assert len(c) == 6 and len(c.grad_accum) == 6
    assert np.all((c.opacities >= 0) & (c.opacities <= 1))
    np.testing.assert_allclose(c.confidences, np.exp(c.gamma))
    sub = c.select(np.array([4, 1]))
    np.testing.assert_array_equal(sub.means, c.means[[4, 1]])
    c.quats *= 3.0
    c.renormalize()
    np.testing.assert_allclose(np.linalg.norm(c.quats, axis=1), 1.0, atol=1e-12)


def test_fresh_gaussian_confidence_is_one():
    g = _gauss()
    assert g.confidence == 1.0


def test_image_buffer_shapes():
    assert ImageBuffer(np.zeros((3, 4))).channels == 1
    b = ImageBuffer(np.zeros((3, 4, 3)))
    assert (b.height, b.width, b.channels) == (3, 4, 3)
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((3, 4, 2)))


def test_empty_cloud():
    c = GaussianCloud.empty()
    assert len(c) == 0
