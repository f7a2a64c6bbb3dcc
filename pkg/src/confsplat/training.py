"""Optimisation loop: Adam with per-group learning rates, loss scheduling and
confidence-steered densification."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .backward import backward_full
from .scene import SH_MAX_DEGREE, GaussianCloud, logit, quat_to_rotmat
from .sh import rgb_to_dc

log = logging.getLogger(__name__)

CLOUD_PARAMS = ("means", "quats", "log_scales", "opacity_logits", "sh_dc", "sh_rest", "gamma")


@dataclass
class LearningRates:
    means_init: float = 1.6e-4
    means_final: float = 1.6e-6
    quats: float = 1e-3
    log_scales: float = 5e-3
    opacity_logits: float = 5e-2
    sh_dc: float = 2.5e-3
    sh_rest: float = 1.25e-4
    gamma: float = 2.5e-4
    appearance: float = 1e-3

    def means(self, iteration: int, total: int) -> float:
        """Log-linear decay from the initial to the final rate over the run."""
        frac = min(max(iteration / max(total, 1), 0.0), 1.0)
        return math.exp((1 - frac) * math.log(self.means_init) + frac * math.log(self.means_final))


class Adam:
    """Adam over named parameter groups with one shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def begin_step(self) -> None:
        self.step_count += 1

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update of ``param``; moments are created lazily."""
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        t = self.step_count
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reindex(self, names, source: np.ndarray, fresh: np.ndarray) -> None:
        """Gather moment rows after a cloud mutation; fresh rows start at zero."""
        for name in names:
            if name not in self.m:
                continue
            for buf in (self.m, self.v):
                new = buf[name][source].copy()
                new[fresh] = 0.0
                buf[name] = new


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-3
    interval: int = 100
    start: int = 500
    stop_fraction: float = 0.6
    split_scale_fraction: float = 0.01
    prune_opacity: float = 0.005
    prune_scale_fraction: float = 0.1
    max_gaussians: int = 50_000
    split_children: int = 2
    split_shrink: float = 1.6

    def __post_init__(self):
        for name in ("grad_threshold", "interval", "start", "stop_fraction",
                     "split_scale_fraction", "prune_opacity", "prune_scale_fraction",
                     "max_gaussians"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def active(self, iteration: int, total: int) -> bool:
        return (iteration >= self.start and iteration < self.stop_fraction * total
                and iteration % self.interval == 0)

    def prune_only(self, iteration: int, total: int) -> bool:
        """Pruning keeps its schedule after densification stops."""
        return (iteration >= max(self.start, self.stop_fraction * total)
                and iteration % self.interval == 0)


def effective_threshold(conf_tilde, tau_grad: float = 2e-4):
    """Per-primitive densification threshold tau / min(conf, 1) (never below tau)."""
    conf_tilde = np.asarray(conf_tilde, dtype=np.float64)
    if np.any(conf_tilde <= 0):
        raise ValueError("confidence must be positive")
    return tau_grad / np.minimum(conf_tilde, 1.0)


def reindex_cloud(cloud: GaussianCloud, source: np.ndarray) -> GaussianCloud:
    out = cloud.select(source)
    out.grad_accum = np.zeros(len(out))
    out.grad_count = np.zeros(len(out), dtype=np.int64)
    return out


def densify_and_prune(cloud: GaussianCloud, cfg: DensifyConfig, extent: float,
                      rng: np.random.Generator, optimizer: Adam | None = None,
                      grow: bool = True):
    """Clone small / split large primitives whose mean positional gradient
    exceeds their confidence-scaled threshold, then prune transparent ones and
    those larger than ``prune_scale_fraction * extent`` in world space.
    ``grow=False`` only prunes.

    New cloud layout: survivors in original order, then clones, then split
    children. Returns (new cloud, source index per new row, fresh-row mask).
    """
    n = len(cloud)
    mean_grad = cloud.grad_accum / np.maximum(cloud.grad_count, 1)
    thresh = effective_threshold(cloud.confidences, cfg.grad_threshold)
    max_scale = np.exp(cloud.log_scales).max(axis=1) if n else np.zeros(0)
    oversized = max_scale > cfg.prune_scale_fraction * extent
    candidates = (mean_grad > thresh) & ~oversized & grow
    big = max_scale > cfg.split_scale_fraction * extent
    clone_idx = np.flatnonzero(candidates & ~big)
    split_idx = np.flatnonzero(candidates & big)

    # respect the hard cap by keeping the strongest candidates
    room = cfg.max_gaussians - n
    need = len(clone_idx) + (cfg.split_children - 1) * len(split_idx)
    if need > room:
        order = np.argsort(-mean_grad[candidates], kind="stable")
        ranked = np.flatnonzero(candidates)[order]
        keep_c, keep_s, used = [], [], 0
        for i in ranked:
            cost = cfg.split_children - 1 if big[i] else 1
            if used + cost > room:
                continue
            used += cost
            (keep_s if big[i] else keep_c).append(i)
        clone_idx = np.array(sorted(keep_c), dtype=np.int64)
        split_idx = np.array(sorted(keep_s), dtype=np.int64)

    opa = cloud.opacities
    survive = (opa >= cfg.prune_opacity) & ~oversized
    survive[split_idx] = False
    clone_idx = clone_idx[opa[clone_idx] >= cfg.prune_opacity]
    split_idx = split_idx[opa[split_idx] >= cfg.prune_opacity]

    k = cfg.split_children
    source = np.concatenate([np.flatnonzero(survive), clone_idx, np.repeat(split_idx, k)])
    fresh = np.zeros(len(source), dtype=bool)
    fresh[survive.sum():] = True
    new = reindex_cloud(cloud, source)

    R_all = quat_to_rotmat(cloud.quats) if n else np.zeros((0, 3, 3))
    s_all = np.exp(cloud.log_scales)
    base = int(survive.sum())
    # clones: small jitter inside the parent footprint
    if len(clone_idx):
        z = rng.normal(0.0, 0.5, (len(clone_idx), 3)) * s_all[clone_idx]
        new.means[base:base + len(clone_idx)] += np.einsum("nij,nj->ni", R_all[clone_idx], z)
    # splits: children sampled from the parent, shrunk
    if len(split_idx):
        s0 = base + len(clone_idx)
        par = np.repeat(split_idx, k)
        z = rng.normal(0.0, 1.0, (len(par), 3)) * s_all[par]
        new.means[s0:] += np.einsum("nij,nj->ni", R_all[par], z)
        new.log_scales[s0:] -= math.log(cfg.split_shrink)
    if optimizer is not None:
        optimizer.reindex(CLOUD_PARAMS, source, fresh)
    return new, source, fresh


def initial_cloud(points, colors, opacity: float = 0.1, sh_degree: int = 0,
                  min_scale: float = 1e-4) -> GaussianCloud:
    """Isotropic primitives at the given points, scaled by their 3-NN distance."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ValueError("no initial points")
    k = min(4, n)
    d, _ = cKDTree(points).query(points, k=k)
    dist = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1)) if k > 1 else np.ones(n)
    log_s = np.log(np.maximum(dist, min_scale))
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rgb_to_dc(np.asarray(colors, dtype=np.float64).reshape(n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(points, quats, np.repeat(log_s[:, None], 3, axis=1),
                         np.full(n, logit(opacity)), sh, np.zeros(n), active_sh_degree=sh_degree)


def random_cloud(n: int, extent: float, rng: np.random.Generator) -> GaussianCloud:
    pts = rng.uniform(-0.5 * extent, 0.5 * extent, (n, 3))
    return initial_cloud(pts, rng.uniform(0.0, 1.0, (n, 3)))


def scene_extent(cameras) -> float:
    """1.1 x the largest camera distance from the mean camera center."""
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    appearance: str = "cnn"
    workers: int = 1
    sh_interval: int = 1000
    checkpoint_interval: int = 1000
    render_interval: int = 1000
    lr: LearningRates = field(default_factory=LearningRates)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    out_dir: str | None = None


@dataclass
class TrainResult:
    cloud: GaussianCloud
    appearance: object
    log: list
    extent: float
    iterations: int


class NonFiniteLoss(FloatingPointError):
    pass


def _appearance_step(opt: Adam, appearance, grads: dict, lr: float) -> None:
    params = appearance.parameters()
    for name, g in grads.items():
        opt.update("app_" + name, params[name], g, lr)


def _cloud_step(opt: Adam, cloud: GaussianCloud, grads, lr: LearningRates, it: int, total: int,
                extent: float) -> None:
    opt.update("means", cloud.means, grads.means, lr.means(it, total) * extent)
    opt.update("quats", cloud.quats, grads.quats, lr.quats)
    opt.update("log_scales", cloud.log_scales, grads.log_scales, lr.log_scales)
    opt.update("opacity_logits", cloud.opacity_logits, grads.opacity_logits, lr.opacity_logits)
    dc = cloud.sh[:, :1, :].copy()
    rest = cloud.sh[:, 1:, :].copy()
    opt.update("sh_dc", dc, grads.sh[:, :1, :], lr.sh_dc)
    opt.update("sh_rest", rest, grads.sh[:, 1:, :], lr.sh_rest)
    cloud.sh[:, :1, :] = dc
    cloud.sh[:, 1:, :] = rest
    opt.update("gamma", cloud.gamma, grads.gamma, lr.gamma)
    cloud.renormalize()


def save_checkpoint(out_dir, name: str, cloud: GaussianCloud, appearance) -> Path:
    from .io import save_appearance, save_cloud

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.ply"
    save_cloud(cloud, path)
    if appearance is not None:
        save_appearance(out_dir / f"{name}.appearance", appearance)
    return path


def train(cameras, images, cloud: GaussianCloud, cfg: TrainConfig,
          weights: L.LossWeights | None = None, callback=None, masks=None) -> TrainResult:
    """Optimise ``cloud`` (and an appearance model) against posed images.

    Cameras are visited round-robin. ``callback(it, cloud, step)`` is invoked
    after every iteration when given. Optional per-view foreground ``masks``
    limit confidence weighting to covered pixels.
    """
    from .appearance import make_appearance
    from .io import LossLog, write_ppm
    from .render import render_image

    weights = weights or L.LossWeights()
    if len(cameras) != len(images):
        raise ValueError("camera/image count mismatch")
    rng = np.random.default_rng(cfg.seed)
    cloud = cloud.copy()
    appearance = make_appearance(cfg.appearance, max(c.image_id for c in cameras) + 1, cfg.seed)
    extent = scene_extent(cameras)
    opt = Adam()
    app_opt = Adam()
    rows = []
    out = Path(cfg.out_dir) if cfg.out_dir else None
    csv = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv = LossLog(out / "loss_log.csv", L.TERMS)
    try:
        for it in range(cfg.iterations):
            if it > 0 and it % cfg.sh_interval == 0:
                cloud.active_sh_degree = min(cloud.active_sh_degree + 1, SH_MAX_DEGREE)
            k = it % len(cameras)
            cam = cameras[k]
            mask = masks[k] if masks is not None else None
            step = backward_full(cloud, cam, images[k], weights, it, appearance, cfg.workers, mask)
            if not math.isfinite(step.report.total):
                if out is not None:
                    save_checkpoint(out, "abort", cloud, appearance)
                raise NonFiniteLoss(f"non-finite loss at iteration {it}")
            row = step.report.csv_row(it)
            rows.append(row)
            if csv is not None:
                csv.write(row)

            opt.begin_step()
            _cloud_step(opt, cloud, step.grads, cfg.lr, it, cfg.iterations, extent)
            if appearance is not None and step.appearance_grads is not None:
                app_opt.begin_step()
                _appearance_step(app_opt, appearance, step.appearance_grads, cfg.lr.appearance)

            if it < cfg.densify.stop_fraction * cfg.iterations:
                vis = step.grads.visible
                cloud.grad_accum[vis] += step.grads.position_norm[vis]
                cloud.grad_count[vis] += 1
            if it > 0 and cfg.densify.active(it, cfg.iterations):
                cloud, _, _ = densify_and_prune(cloud, cfg.densify, extent, rng, opt)
                log.info("iteration %d: %d primitives", it, len(cloud))
            elif cfg.densify.prune_only(it, cfg.iterations):
                cloud, _, _ = densify_and_prune(cloud, cfg.densify, extent, rng, opt, grow=False)

            if callback is not None:
                callback(it, cloud, step)
            if out is not None:
                if (it + 1) % cfg.checkpoint_interval == 0:
                    save_checkpoint(out, f"checkpoint_{it + 1:06d}", cloud, appearance)
                if (it + 1) % cfg.render_interval == 0:
                    img = render_image(cloud, cameras[0], workers=cfg.workers).color
                    write_ppm(out / f"render_{it + 1:06d}.ppm", img)
        if cfg.iterations > cfg.densify.start:
            # a last prune catches primitives that outgrew the limit since the previous pass
            cloud, _, _ = densify_and_prune(cloud, cfg.densify, extent, rng, opt, grow=False)
        if out is not None:
            save_checkpoint(out, "final", cloud, appearance)
    finally:
        if csv is not None:
            csv.close()
    return TrainResult(cloud, appearance, rows, extent, cfg.iterations)


def evaluate_views(cloud: GaussianCloud, cameras, images, appearance=None, workers: int = 1):
    """Mean PSNR/SSIM over the given views (raw render unless appearance is given)."""
    from .metrics import psnr, ssim
    from .render import render_image

    ps, ss = [], []
    for cam, img in zip(cameras, images):
        out = render_image(cloud, cam, workers=workers).color
        if appearance is not None:
            out = appearance.forward(out, cam.image_id)[0]
        ps.append(psnr(img, np.clip(out, 0.0, 1.0)))
        ss.append(ssim(img, out))
    return float(np.mean(ps)), float(np.mean(ss))


__all__ = ["Adam", "DensifyConfig", "LearningRates", "TrainConfig", "TrainResult", "densify_and_prune",
           "effective_threshold", "evaluate_views", "initial_cloud", "random_cloud", "scene_extent",
           "train"]
