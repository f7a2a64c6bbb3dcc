"""Image and geometry metrics: PSNR, SSIM, precision/recall/F1 and Chamfer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim_map

DEFAULT_TAU = 0.05
DEFAULT_SAMPLES = 100_000


def psnr(I, I_hat) -> float:
    """10 log10(1 / MSE); identical images give +inf."""
    I = np.asarray(I, dtype=np.float64)
    I_hat = np.asarray(I_hat, dtype=np.float64)
    if I.shape != I_hat.shape:
        raise ValueError(f"shape mismatch {I.shape} vs {I_hat.shape}")
    mse = float(np.mean((I - I_hat) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(I, I_hat) -> float:
    return float(np.mean(ssim_map(I, I_hat)))


def _check_points(p, name):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError(f"{name} point set is empty")
    return p


def nearest_distances(query, ref) -> np.ndarray:
    """Distance from every query point to its nearest reference point."""
    return cKDTree(ref).query(query, k=1)[0]


def nearest_distances_brute(query, ref, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(query))
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=-1)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def crop_to_box(points, lo, hi) -> np.ndarray:
    m = np.all((points >= lo) & (points <= hi), axis=1)
    return points[m]


def f1_score(pred, gt, tau: float = DEFAULT_TAU, crop: bool = False, brute: bool = False):
    """Precision, recall and their harmonic mean at inlier threshold tau.

    With ``crop`` the prediction is restricted to the ground-truth bounding
    box padded by tau (a flat ground truth would otherwise have zero volume).
    """
    pred = _check_points(pred, "pred")
    gt = _check_points(gt, "gt")
    if crop:
        pred = crop_to_box(pred, gt.min(axis=0) - tau, gt.max(axis=0) + tau)
        if len(pred) == 0:
            return 0.0, 0.0, 0.0
    nn = nearest_distances_brute if brute else nearest_distances
    precision = float(np.mean(nn(pred, gt) <= tau))
    recall = float(np.mean(nn(gt, pred) <= tau))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def chamfer(pred, gt, brute: bool = False) -> float:
    pred = _check_points(pred, "pred")
    gt = _check_points(gt, "gt")
    nn = nearest_distances_brute if brute else nearest_distances
    return 0.5 * (float(np.mean(nn(pred, gt))) + float(np.mean(nn(gt, pred))))


def sample_surface(mesh, n: int = DEFAULT_SAMPLES, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    areas = mesh.triangle_areas()
    if not len(areas) or areas.sum() <= 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u = rng.random((n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)


@dataclass
class MetricsReport:
    psnr: float | None = None
    ssim: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    chamfer: float | None = None
    tau: float = DEFAULT_TAU
    n_samples: int = DEFAULT_SAMPLES
    seed: int = 0

    def to_json(self) -> str:
        d = {k: (None if v is None else ("inf" if isinstance(v, float) and math.isinf(v) else v))
             for k, v in asdict(self).items()}
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d = {k: (math.inf if v == "inf" else v) for k, v in d.items()}
        return cls(**d)


def mesh_metrics(pred_mesh, gt_mesh, tau: float = DEFAULT_TAU, n_samples: int = DEFAULT_SAMPLES,
                 seed: int = 0, crop: bool = True) -> MetricsReport:
    """Sample both meshes and report precision/recall/F1 and Chamfer."""
    gt_pts = sample_surface(gt_mesh, n_samples, seed)
    if len(pred_mesh) == 0:
        return MetricsReport(precision=0.0, recall=0.0, f1=0.0, chamfer=math.inf,
                             tau=tau, n_samples=n_samples, seed=seed)
    pred_pts = sample_surface(pred_mesh, n_samples, seed + 1)
    p, r, f = f1_score(pred_pts, gt_pts, tau, crop=crop)
    if crop:
        cropped = crop_to_box(pred_pts, gt_pts.min(axis=0) - tau, gt_pts.max(axis=0) + tau)
        pred_pts = cropped if len(cropped) else pred_pts
    return MetricsReport(precision=p, recall=r, f1=f, chamfer=chamfer(pred_pts, gt_pts),
                         tau=tau, n_samples=n_samples, seed=seed)
