"""Finite-difference verification of every analytic gradient.

Each seeded scene has at most 16 random anisotropic Gaussians in front of an
8 x 8 camera and a random target image. Every loss term is isolated through
its weight and differentiated with respect to every cloud parameter (and a
sample of appearance-network parameters on some scenes). One pair of loss
evaluations per parameter yields central differences for all terms at once.

Entries whose finite difference is unstable across step sizes (the loss has
a kink nearby: a depth-order swap, the alpha cutoff, a clamp) are skipped and
counted; everything else must satisfy the tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .appearance import AppearanceModel, downsample32_reflect
from .backward import backward_full, loss_only
from .render import render_image
from .scene import Camera, GaussianCloud

REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL_FD = 1e-6
STEP = 1e-5
APP_STEP = 1e-6
ITERATION = 2000
CLOUD_CLASSES = ("means", "quats", "log_scales", "opacity_logits", "sh", "gamma")
TERM_WEIGHTS = {
    "rgb": dict(use_confidence=False),
    "conf": dict(use_confidence=True),
    "color_var": dict(lambda_photometric=0.0, lambda_color_var=1.0),
    "normal_var": dict(lambda_photometric=0.0, lambda_normal_var=1.0),
    "depth_normal": dict(lambda_photometric=0.0, lambda_depth_normal=1.0),
    "distortion": dict(lambda_photometric=0.0, lambda_distortion=1.0),
}


def term_weights(term: str) -> L.LossWeights:
    """Weights under which the total loss equals exactly one term."""
    base = dict(lambda_color_var=0.0, lambda_normal_var=0.0, lambda_depth_normal=0.0,
                lambda_distortion=0.0, use_confidence=False, normal_grad="exact",
                conf_start_iteration=0, depth_normal_start_iteration=0,
                distortion_start_iteration=0)
    base.update(TERM_WEIGHTS[term])
    return L.LossWeights(**base)


def random_scene(seed: int, n: int = 16, size: int = 8, with_appearance: bool = False):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud(rng.uniform(-0.6, 0.6, (n, 3)), q, np.log(rng.uniform(0.15, 0.5, (n, 3))),
                          rng.uniform(-1.0, 2.0, n), rng.normal(size=(n, 16, 3)) * 0.3,
                          rng.normal(size=n) * 0.5, active_sh_degree=3)
    cam = Camera.look_at((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), (0.0, -1.0, 0.0), 10.0, 10.0, size, size)
    target = rng.random((size, size, 3))
    app = None
    if with_appearance:
        app = AppearanceModel(1, widths=(8, 8, 8), seed=seed)
        # the zero-initialised last layer would hide every upstream gradient
        app.net.weights[-1] = rng.normal(0.0, 0.05, app.net.weights[-1].shape)
    return cloud, cam, target, app


def _judge(a: float, fd: float) -> tuple[bool, float]:
    if abs(fd) > SMALL_FD:
        err = abs(a - fd) / abs(fd)
        return err <= REL_TOL, err
    err = abs(a - fd)
    return err <= ABS_TOL, err


@dataclass
class Row:
    param: str
    term: str
    checked: int = 0
    skipped: int = 0
    failed: int = 0
    max_rel: float = 0.0
    max_abs_small: float = 0.0
    worst: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return self.failed == 0


@dataclass
class GradcheckReport:
    rows: dict
    seconds: float
    scenes: int

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows.values())

    @property
    def skip_rate(self) -> float:
        total = sum(r.checked + r.skipped for r in self.rows.values())
        return sum(r.skipped for r in self.rows.values()) / max(total, 1)

    def table(self) -> str:
        lines = [f"{'parameter':<16}{'term':<14}{'checked':>8}{'skipped':>8}{'max rel err':>14}"
                 f"{'max abs err*':>14}  result"]
        for r in self.rows.values():
            lines.append(f"{r.param:<16}{r.term:<14}{r.checked:>8}{r.skipped:>8}{r.max_rel:>14.3e}"
                         f"{r.max_abs_small:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"* where |FD| <= {SMALL_FD:g}.  tolerance: rel {REL_TOL:g}, abs {ABS_TOL:g};"
                     f" kink skip rate {100 * self.skip_rate:.2f}%; {self.scenes} scenes in"
                     f" {self.seconds:.1f}s")
        lines.append("OVERALL " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


class _FrozenInput:
    """Appearance model whose downsampled network input is held at a fixed value.

    The analytic gradient treats that input as detached, so the finite
    differences must not see it move either.
    """

    def __init__(self, app, low):
        self.app, self.low = app, low

    def forward(self, image, image_id):
        return self.app.forward(image, image_id, low=self.low)


class _Probe:
    """Evaluates every isolated term of one scene as a function of a parameter entry."""

    def __init__(self, cloud, cam, target, app):
        self.cloud, self.cam, self.target = cloud, cam, target
        self.app = None
        if app is not None:
            color = render_image(cloud, cam).color
            self.app = _FrozenInput(app, downsample32_reflect(color))
        self.w_eval = L.LossWeights(use_confidence=True, conf_start_iteration=0, normal_grad="exact",
                                    depth_normal_start_iteration=0, distortion_start_iteration=0)

    def terms(self) -> dict:
        rep = loss_only(self.cloud, self.cam, self.target, self.w_eval, ITERATION, self.app)
        return rep.terms

    def central(self, arr, idx, h) -> dict:
        old = arr[idx]
        arr[idx] = old + h
        fp = self.terms()
        arr[idx] = old - h
        fm = self.terms()
        arr[idx] = old
        return {k: (fp[k] - fm[k]) / (2 * h) for k in TERM_WEIGHTS}


def _check_entry(probe, arr, idx, analytic: dict, h: float, rows: dict, pname: str):
    fd1 = probe.central(arr, idx, h)
    pending = {}
    for term, a in analytic.items():
        ok, err = _judge(a, fd1[term])
        if ok:
            _record(rows[(pname, term)], err, fd1[term], None)
        else:
            pending[term] = a
    if not pending:
        return
    # Richardson extrapolation over two steps; disagreement between the
    # raw and extrapolated estimates flags a kink
    fd2 = probe.central(arr, idx, 2 * h)
    fd4 = probe.central(arr, idx, 4 * h)
    for term, a in pending.items():
        rich = (4 * fd1[term] - fd2[term]) / 3
        rich2 = (4 * fd2[term] - fd4[term]) / 3
        scale = max(abs(rich), SMALL_FD)
        row = rows[(pname, term)]
        if abs(rich - rich2) > 10 * REL_TOL * scale + ABS_TOL:
            row.skipped += 1
            continue
        ok, err = _judge(a, rich)
        _record(row, err, rich, None if ok else (idx, a, rich))


def _record(row: Row, err: float, fd: float, failure):
    row.checked += 1
    if abs(fd) > SMALL_FD:
        row.max_rel = max(row.max_rel, err)
    else:
        row.max_abs_small = max(row.max_abs_small, err)
    if failure is not None:
        row.failed += 1
        if not row.worst:
            row.worst = failure


def run_gradcheck(seed: int = 0, n_scenes: int = 20, appearance_every: int = 4,
                  app_samples: int = 6) -> GradcheckReport:
    """FD suite over ``n_scenes`` seeded scenes; returns the per-row table."""
    t0 = time.perf_counter()
    rows: dict = {}
    terms = list(TERM_WEIGHTS)
    for p in CLOUD_CLASSES:
        for t in terms:
            rows[(p, t)] = Row(p, t)
    for t in ("rgb", "conf"):
        rows[("appearance", t)] = Row("appearance", t)
    for s in range(n_scenes):
        scene_seed = seed * 1000 + s
        with_app = appearance_every > 0 and s % appearance_every == 0
        cloud, cam, target, app = random_scene(scene_seed, with_appearance=with_app)
        probe = _Probe(cloud, cam, target, app)
        results = {t: backward_full(cloud, cam, target, term_weights(t), ITERATION, app)
                   for t in terms}
        for pname in CLOUD_CLASSES:
            arr = getattr(cloud, pname)
            for idx in np.ndindex(arr.shape):
                analytic = {t: float(getattr(results[t].grads, pname)[idx]) for t in terms}
                _check_entry(probe, arr, idx, analytic, STEP, rows, pname)
        if app is not None:
            rng = np.random.default_rng(scene_seed + 7)
            params = app.parameters()
            for name, arr in params.items():
                flat = arr.reshape(-1)
                picks = rng.choice(flat.size, size=min(app_samples, flat.size), replace=False)
                for j in picks:
                    idx = np.unravel_index(j, arr.shape)
                    analytic = {t: float(results[t].appearance_grads[name][idx])
                                for t in ("rgb", "conf")}
                    _check_entry(probe, arr, idx, analytic, APP_STEP, rows, "appearance")
    return GradcheckReport(rows, time.perf_counter() - t0, n_scenes)
