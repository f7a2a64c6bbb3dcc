"""Analytic test scenes rendered by an independent ray caster.

Scenes live inside a unit-extent box: a 1 x 1 ground square at z = 0 and/or
a sphere of radius 0.2 resting on it. Surfaces carry a Lambertian solid
checkerboard under one fixed directional light, so radiance is view
independent. Ground-truth images are supersampled and the background is black.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshing import TriMesh
from .scene import Camera

KINDS = ("plane", "sphere", "plane+sphere")
PLANE_HALF = 0.5
SPHERE_CENTER = np.array([0.0, 0.0, 0.2])
SPHERE_RADIUS = 0.2
LIGHT = np.array([0.4, -0.3, 1.0]) / np.linalg.norm([0.4, -0.3, 1.0])
AMBIENT = 0.3
CHECKER = 0.2
PLANE_COLORS = np.array([[0.85, 0.80, 0.70], [0.25, 0.32, 0.42]])
SPHERE_COLORS = np.array([[0.90, 0.35, 0.30], [0.95, 0.85, 0.35]])
EXPOSURE_RANGE = 0.3


@dataclass
class SyntheticScene:
    kind: str
    cameras: list
    images: list
    depths: list
    mesh: TriMesh
    exposure: np.ndarray
    masks: list = field(default_factory=list)
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    point_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def save(self, directory) -> Path:
        """Write scene.json, the PPM images and gt_mesh.ply into directory."""
        from .io import export_mesh, save_scene

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "scene.json"
        extra = {"kind": self.kind, "exposure": self.exposure.tolist(),
                 "points": np.concatenate([self.points, self.point_colors], axis=1).tolist(),
                 "gt_mesh": "gt_mesh.ply"}
        save_scene(path, self.cameras, self.images, extra, self.masks or None)
        export_mesh(self.mesh, directory / "gt_mesh.ply")
        return path


def _checker(p, period=CHECKER):
    k = np.floor(p / period).astype(np.int64).sum(axis=-1)
    return k & 1


def shade(points, normals, surface) -> np.ndarray:
    """Lambertian radiance of surface points; surface 0 = plane, 1 = sphere."""
    albedo = np.where((surface == 0)[:, None], PLANE_COLORS[_checker(points[:, :2])],
                      SPHERE_COLORS[_checker(points)])
    lam = np.clip(normals @ LIGHT, 0.0, None)
    return albedo * (AMBIENT + (1.0 - AMBIENT) * lam)[:, None]


def cast(origins, dirs, kind: str):
    """Nearest analytic hit per ray: (t, point, normal, surface id); t = inf on miss."""
    n = len(dirs)
    t = np.full(n, np.inf)
    surf = np.full(n, -1)
    if kind in ("plane", "plane+sphere"):
        with np.errstate(divide="ignore", invalid="ignore"):
            tp = -origins[:, 2] / dirs[:, 2]
        hit = origins + tp[:, None] * dirs
        ok = (tp > 0) & (np.abs(hit[:, 0]) <= PLANE_HALF) & (np.abs(hit[:, 1]) <= PLANE_HALF)
        t = np.where(ok, tp, t)
        surf = np.where(ok, 0, surf)
    if kind in ("sphere", "plane+sphere"):
        oc = origins - SPHERE_CENTER
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - SPHERE_RADIUS**2
        disc = b * b - c
        ts = -b - np.sqrt(np.maximum(disc, 0.0))
        ok = (disc >= 0) & (ts > 0) & (ts < t)
        t = np.where(ok, ts, t)
        surf = np.where(ok, 1, surf)
    pts = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    normals = np.zeros_like(pts)
    normals[surf == 0] = [0.0, 0.0, 1.0]
    sp = surf == 1
    normals[sp] = (pts[sp] - SPHERE_CENTER) / SPHERE_RADIUS
    return t, pts, normals, surf


def render_reference(cam: Camera, kind: str, supersample: int = 4):
    """Ground-truth image (H, W, 3), center-ray depth (H, W) and coverage (H, W).

    Depth is inf on a miss; coverage is the fraction of subsamples that hit.
    """
    H, W = cam.height, cam.width
    S = supersample
    offs = (np.arange(S) + 0.5) / S
    u = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    v = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    d = d.reshape(-1, 3) @ cam.R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape)
    t, pts, nrm, surf = cast(o, d, kind)
    col = np.zeros((len(d), 3))
    hit = surf >= 0
    col[hit] = shade(pts[hit], nrm[hit], surf[hit])
    img = col.reshape(H, S, W, S, 3).mean(axis=(1, 3))
    coverage = hit.reshape(H, S, W, S).mean(axis=(1, 3))
    dc = cam.ray_directions()
    depth = cast(np.broadcast_to(cam.center, dc.shape), dc, kind)[0].reshape(H, W)
    return img, depth, coverage


def icosphere(level: int = 4):
    t = (1 + 5**0.5) / 2
    V = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    F = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in V]
    for _ in range(level):
        cache = {}
        newF = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        for a, b, c in F:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            newF += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        F = newF
    return np.array(V), np.array(F, dtype=np.int64)


def ground_truth_mesh(kind: str) -> TriMesh:
    parts_v, parts_f = [], []
    if kind in ("plane", "plane+sphere"):
        h = PLANE_HALF
        parts_v.append(np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]]))
        parts_f.append(np.array([[0, 1, 2], [0, 2, 3]]))
    if kind in ("sphere", "plane+sphere"):
        V, F = icosphere(4)
        parts_v.append(SPHERE_CENTER + SPHERE_RADIUS * V)
        parts_f.append(F)
    offset = 0
    faces = []
    for v, f in zip(parts_v, parts_f):
        faces.append(f + offset)
        offset += len(v)
    return TriMesh(np.concatenate(parts_v), np.concatenate(faces))


def camera_ring(n_views: int, resolution: int, radius: float = 2.0, focal_scale: float = 1.5):
    """Cameras on two elevation rings above the ground, all looking at the scene center."""
    cams = []
    target = np.array([0.0, 0.0, 0.1])
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        el = np.deg2rad(35.0 if i % 2 == 0 else 60.0)
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        f = focal_scale * resolution
        cams.append(Camera.look_at(eye, target, np.array([0.0, 0.0, 1.0]), f, f,
                                   resolution, resolution, image_id=i))
    return cams


def surface_points(kind: str, cameras, n: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Noisy samples of the visible surface with their observed colours.

    Points are found by casting random pixel rays from random training views,
    which mimics a structure-from-motion reconstruction.
    """
    pts, cols = [], []
    per = int(np.ceil(n / len(cameras)))
    for cam in cameras:
        d = cam.ray_directions()
        pick = rng.choice(len(d), size=min(4 * per, len(d)), replace=False)
        t, p, nrm, surf = cast(np.broadcast_to(cam.center, d[pick].shape), d[pick], kind)
        hit = np.flatnonzero(surf >= 0)[:per]
        pts.append(p[hit])
        cols.append(shade(p[hit], nrm[hit], surf[hit]))
    P = np.concatenate(pts)[:n]
    C = np.concatenate(cols)[:n]
    return P + rng.normal(0.0, noise, P.shape), C


def make_synthetic_scene(kind: str = "plane+sphere", n_views: int = 16, resolution: int = 64,
                         seed: int = 0, exposure_jitter: bool = False, supersample: int = 4,
                         n_points: int = 2000, point_noise: float = 0.01,
                         exposure: np.ndarray | None = None) -> SyntheticScene:
    """Build cameras, ground-truth images, depths, masks, mesh and an initial point set.

    Masks mark pixels fully covered by the surface.

    Exposure jitter multiplies image i by exp(eps_i), eps_i ~ U(-0.3, 0.3),
    then clips to [0, 1]; ``exposure`` overrides the drawn values.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}")
    if n_views < 2:
        raise ValueError("need at least two views")
    rng = np.random.default_rng(seed)
    cams = camera_ring(n_views, resolution)
    eps = rng.uniform(-EXPOSURE_RANGE, EXPOSURE_RANGE, n_views)
    if exposure is not None:
        eps = np.asarray(exposure, dtype=np.float64)
    elif not exposure_jitter:
        eps = np.zeros(n_views)
    images, depths, masks = [], [], []
    for cam, e in zip(cams, eps):
        img, depth, coverage = render_reference(cam, kind, supersample)
        if e != 0.0:
            img = np.clip(img * np.exp(e), 0.0, 1.0)
        images.append(img)
        depths.append(depth)
        masks.append(coverage >= 1.0)
    pts, cols = surface_points(kind, cams, n_points, point_noise, rng)
    return SyntheticScene(kind, cams, images, depths, ground_truth_mesh(kind), eps, masks, pts, cols)
