import math

import numpy as np
import pytest

from conftest import make_cloud
from confsplat import losses as L
from confsplat.metrics import psnr
from confsplat.synthetic import make_synthetic_scene
from confsplat.training import (CLOUD_PARAMS, Adam, DensifyConfig, LearningRates, NonFiniteLoss,
                                TrainConfig, densify_and_prune, effective_threshold, initial_cloud,
                                scene_extent, train)

TAU = 2e-4


def test_effective_threshold_examples():
    assert effective_threshold(3.0, TAU) == TAU
    assert effective_threshold(0.5, TAU) == pytest.approx(4e-4, rel=1e-15)
    assert effective_threshold(1.0, TAU) == TAU
    with pytest.raises(ValueError):
        effective_threshold(0.0, TAU)


def test_effective_threshold_never_below_tau(rng):
    conf = np.exp(rng.normal(0, 2, 1000))
    assert np.all(effective_threshold(conf, TAU) >= TAU)


def _spread_cloud(n, gamma=None, scale=0.01, opacity=0.5):
    means = np.stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)], axis=1)
    return make_cloud(means, log_scales=[math.log(scale)] * 3, opacities=opacity,
                      gamma=np.zeros(n) if gamma is None else np.asarray(gamma, dtype=float))


def _cfg(**kw):
    return DensifyConfig(grad_threshold=TAU, **kw)


def _set_stats(cloud, mean_grads, count=4):
    cloud.grad_accum = np.asarray(mean_grads, dtype=float) * count
    cloud.grad_count = np.full(len(cloud), count, dtype=np.int64)


def test_zero_stats_only_prunes(rng):
    cloud = _spread_cloud(4)
    cloud.opacity_logits[2] = -10.0
    new, source, fresh = densify_and_prune(cloud, _cfg(), 10.0, rng)
    assert len(new) == 3
    np.testing.assert_array_equal(source, [0, 1, 3])
    assert not fresh.any()
    np.testing.assert_array_equal(new.means, cloud.means[[0, 1, 3]])


def test_single_small_candidate_clones_once(rng):
    cloud = _spread_cloud(3)
    _set_stats(cloud, [0, 5 * TAU, 0])
    new, source, fresh = densify_and_prune(cloud, _cfg(), 10.0, rng)
    assert len(new) == 4
    np.testing.assert_array_equal(source, [0, 1, 2, 1])
    assert fresh.tolist() == [False, False, False, True]
    assert new.gamma[3] == cloud.gamma[1]
    np.testing.assert_array_equal(new.log_scales[3], cloud.log_scales[1])


def test_confidence_steers_densification(rng):
    # identical gradient in (tau, 2 tau): gamma~ = 1 densifies, gamma~ = 0.5 does not
    cloud = _spread_cloud(2, gamma=[0.0, math.log(0.5)])
    _set_stats(cloud, [1.5 * TAU, 1.5 * TAU])
    new, source, _ = densify_and_prune(cloud, _cfg(), 10.0, rng)
    np.testing.assert_array_equal(source, [0, 1, 0])


def test_large_candidate_splits_in_two(rng):
    cloud = _spread_cloud(2, scale=0.5)
    _set_stats(cloud, [0, 1.0])
    new, source, fresh = densify_and_prune(cloud, _cfg(), 10.0, rng)
    np.testing.assert_array_equal(source, [0, 1, 1])
    np.testing.assert_allclose(new.log_scales[1:], np.tile(cloud.log_scales[1] - math.log(1.6), (2, 1)),
                               atol=1e-15)
    assert fresh.tolist() == [False, True, True]


def test_stats_reset_after_densify(rng):
    cloud = _spread_cloud(3)
    _set_stats(cloud, [1.0, 1.0, 0.0])
    new, _, _ = densify_and_prune(cloud, _cfg(), 10.0, rng)
    assert not new.grad_accum.any() and not new.grad_count.any()


def test_hard_cap_respected(rng):
    cloud = _spread_cloud(10)
    _set_stats(cloud, np.linspace(1, 2, 10))
    new, source, _ = densify_and_prune(cloud, _cfg(max_gaussians=13), 10.0, rng)
    assert len(new) == 13
    # the strongest candidates win
    np.testing.assert_array_equal(np.sort(source[10:]), [7, 8, 9])
    full, _, _ = densify_and_prune(new, _cfg(max_gaussians=13), 10.0, rng)
    assert len(full) <= 13


def test_optimizer_rows_follow_primitives(rng):
    # tag every primitive with its id in both the cloud and the moment buffers
    cloud = _spread_cloud(6, scale=0.01)
    cloud.log_scales[4] = math.log(0.5)
    cloud.opacity_logits[2] = -10.0
    cloud.gamma[:] = np.arange(6) * 0.01
    _set_stats(cloud, [0, 1, 0, 1, 1, 0])
    opt = Adam()
    tags = np.arange(6, dtype=float) + 1
    for name in CLOUD_PARAMS:
        shape = {"means": (6, 3), "quats": (6, 4), "log_scales": (6, 3), "sh_dc": (6, 1, 3),
                 "sh_rest": (6, 15, 3)}.get(name, (6,))
        buf = np.broadcast_to(tags.reshape((6,) + (1,) * (len(shape) - 1)), shape).copy()
        opt.m[name] = buf.copy()
        opt.v[name] = buf.copy()
    new, source, fresh = densify_and_prune(cloud, _cfg(), 10.0, rng, opt)
    ids = np.round(new.gamma / 0.01).astype(int)
    np.testing.assert_array_equal(ids, source)
    for name in CLOUD_PARAMS:
        for buf in (opt.m[name], opt.v[name]):
            rows = buf.reshape(len(new), -1)[:, 0]
            np.testing.assert_array_equal(rows[~fresh], source[~fresh] + 1)
            assert not rows[fresh].any()


def test_adam_first_step_and_schedule():
    opt = Adam()
    p = np.array([1.0, -2.0])
    opt.begin_step()
    opt.update("x", p, np.array([0.3, -4.0]), 0.1)
    np.testing.assert_allclose(p, [0.9, -1.9], atol=1e-12)
    lr = LearningRates()
    assert lr.means(0, 100) == pytest.approx(1.6e-4)
    assert lr.means(100, 100) == pytest.approx(1.6e-6)
    assert lr.means(50, 100) == pytest.approx(1.6e-5)


def test_beta_zero_confidence_gradient_nonnegative(rng):
    rgb = rng.random(100)
    conf = rng.uniform(0.001, 5.0, 100)
    assert np.all(L.confidence_grad(rgb, conf, 0.0) >= 0)
    np.testing.assert_array_equal(L.confidence_grad(rgb, conf, 0.0), rgb)


@pytest.fixture(scope="module")
def tiny_scene():
    return make_synthetic_scene("plane", n_views=4, resolution=16, supersample=2, n_points=200)


def test_zero_iterations_returns_initialization(tiny_scene):
    s = tiny_scene
    cloud = initial_cloud(s.points, s.point_colors)
    r = train(s.cameras, s.images, cloud, TrainConfig(iterations=0, appearance="none"))
    for a, b in zip((r.cloud.means, r.cloud.sh, r.cloud.gamma, r.cloud.log_scales),
                    (cloud.means, cloud.sh, cloud.gamma, cloud.log_scales)):
        np.testing.assert_array_equal(a, b)
    assert r.log == []


def _short_run(s, seed, out=None):
    cfg = TrainConfig(iterations=40, seed=seed, appearance="cnn", checkpoint_interval=20,
                      densify=DensifyConfig(start=10, interval=10, grad_threshold=1e-5),
                      out_dir=out)
    return train(s.cameras, s.images, initial_cloud(s.points, s.point_colors), cfg)


def test_fixed_seed_is_bit_identical(tiny_scene, tmp_path):
    a = _short_run(tiny_scene, 3, tmp_path / "a")
    b = _short_run(tiny_scene, 3, tmp_path / "b")
    assert len(a.cloud) == len(b.cloud)
    for name in ("means", "quats", "log_scales", "opacity_logits", "sh", "gamma"):
        np.testing.assert_array_equal(getattr(a.cloud, name), getattr(b.cloud, name))
    for k in a.appearance.parameters():
        np.testing.assert_array_equal(a.appearance.parameters()[k], b.appearance.parameters()[k])
    for name in ("checkpoint_000020.ply", "final.ply", "final.appearance"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "loss_log.csv").exists()


def test_non_finite_loss_aborts_with_checkpoint(tiny_scene, tmp_path):
    s = tiny_scene
    images = [im.copy() for im in s.images]
    images[1][0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        train(s.cameras, images, initial_cloud(s.points, s.point_colors),
              TrainConfig(iterations=5, appearance="none", out_dir=str(tmp_path)))
    assert (tmp_path / "abort.ply").exists()


def test_mismatched_inputs_rejected(tiny_scene):
    s = tiny_scene
    with pytest.raises(ValueError):
        train(s.cameras, s.images[:2], initial_cloud(s.points, s.point_colors), TrainConfig())


def test_extent():
    from confsplat.synthetic import camera_ring
    cams = camera_ring(8, 8, radius=2.0)
    centers = [c.center for c in cams]
    mid = np.mean(centers, axis=0)
    assert scene_extent(cams) == pytest.approx(1.1 * max(math.dist(c, mid) for c in centers),
                                               rel=1e-12)


def test_plane_psnr_windows_increase():
    s = make_synthetic_scene("plane", n_views=8, resolution=24, supersample=2, n_points=400)
    ps = []

    def cb(it, cloud, step):
        ps.append(psnr(s.images[it % len(s.images)], step.outputs.color))

    train(s.cameras, s.images, initial_cloud(s.points, s.point_colors),
          TrainConfig(iterations=2000, appearance="none"), callback=cb, masks=s.masks)
    windows = np.array(ps).reshape(-1, 500).mean(axis=1)
    assert np.all(np.diff(windows) > 0), windows


def test_oversized_primitive_is_pruned(rng):
    cloud = _spread_cloud(3, scale=0.05)
    cloud.log_scales[1, 0] = math.log(2.0)
    _set_stats(cloud, [0, 5 * TAU, 0])
    new, source, fresh = densify_and_prune(cloud, _cfg(), 10.0, rng)
    # 2.0 > 0.1 * 10: removed, and never cloned or split
    np.testing.assert_array_equal(source, [0, 2])
    assert not fresh.any()
    keep, _, _ = densify_and_prune(cloud, _cfg(), 30.0, rng)
    assert len(keep) == 4


def test_prune_without_growth(rng):
    cloud = _spread_cloud(3)
    cloud.opacity_logits[0] = -10.0
    _set_stats(cloud, [0, 5 * TAU, 5 * TAU])
    new, source, fresh = densify_and_prune(cloud, _cfg(), 10.0, rng, grow=False)
    np.testing.assert_array_equal(source, [1, 2])
    assert not fresh.any()


def test_prune_schedule_continues_after_densification():
    cfg = DensifyConfig(start=500, interval=100, stop_fraction=0.6)
    dens = [it for it in range(1, 5000) if cfg.active(it, 5000)]
    prune = [it for it in range(1, 5000) if cfg.prune_only(it, 5000)]
    assert dens[0] == 500 and dens[-1] == 2900
    assert prune[0] == 3000 and prune[-1] == 4900
    assert not set(dens) & set(prune)
