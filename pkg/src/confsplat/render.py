"""Exact per-ray forward renderer.

Each Gaussian's opacity is evaluated in 3D at the point of maximum
contribution along the ray; contributors are sorted by that point's ray
parameter and alpha-blended front to back. Color, normal, depth and
confidence share the same blending weights.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene import Camera, Gaussian, GaussianCloud, Ray, covariance, gaussian_normal, normal_axis
from .sh import sh_basis_into, sh_eval

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
T_MIN = 1e-4
PIXEL_GUARD = 1e-6  # pixels; absorbs rounding in the projected ellipsoid bounds
CONF_MIN = 0.001
CONF_MAX = 5.0


# ---------------------------------------------------------------------------
# single-primitive operations
# ---------------------------------------------------------------------------

def max_contribution_point(g: Gaussian, r: Ray) -> tuple[np.ndarray, float, bool]:
    """Return (x*, t*, behind) where x* minimizes the Mahalanobis distance on the ray."""
    _, inv = covariance(g)
    Ad = inv @ r.direction
    t = float(Ad @ (g.position - r.origin) / (r.direction @ Ad))
    return r.origin + t * r.direction, t, t <= 0.0


def alpha_3d(g: Gaussian, r: Ray) -> float:
    """Opacity at x*, clamped to ALPHA_MAX; contributions below 1/255 are zero."""
    _, inv = covariance(g)
    x, _, _ = max_contribution_point(g, r)
    delta = x - g.position
    a = g.opacity * math.exp(-0.5 * float(delta @ inv @ delta))
    if a < ALPHA_MIN:
        return 0.0
    return min(a, ALPHA_MAX)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass
class RaySample:
    color: np.ndarray
    normal: np.ndarray
    depth: float
    confidence: float
    confidence_raw: float
    transmittance_remaining: float
    indices: np.ndarray
    weights: np.ndarray
    alphas: np.ndarray
    ts: np.ndarray
    colors: np.ndarray
    normals: np.ndarray

    @property
    def contribs(self) -> list[tuple[int, float, float, float]]:
        return [(int(i), float(w), float(a), float(t))
                for i, w, a, t in zip(self.indices, self.weights, self.alphas, self.ts)]


@dataclass
class Retained:
    """Per-ray contributor records in CSR layout (segment p starts at offsets[p])."""

    offsets: np.ndarray
    count: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    t: np.ndarray
    color: np.ndarray
    normal: np.ndarray


@dataclass
class RenderOutputs:
    color: np.ndarray          # (H, W, 3)
    normal: np.ndarray         # (H, W, 3)
    depth: np.ndarray          # (H, W)
    confidence: np.ndarray     # (H, W), clamped
    confidence_raw: np.ndarray
    transmittance: np.ndarray
    origins: np.ndarray        # (P, 3)
    dirs: np.ndarray           # (P, 3)
    retained: Retained | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def sample(self, p: int) -> RaySample:
        """Retained record of flattened pixel ``p`` as a RaySample."""
        r = self.retained
        s, n = r.offsets[p], r.count[p]
        sl = slice(s, s + n)
        H, W = self.shape
        y, x = divmod(p, W)
        return RaySample(self.color[y, x].copy(), self.normal[y, x].copy(), float(self.depth[y, x]),
                         float(self.confidence[y, x]), float(self.confidence_raw[y, x]),
                         float(self.transmittance[y, x]), r.idx[sl].copy(), r.w[sl].copy(),
                         r.alpha[sl].copy(), r.t[sl].copy(), r.color[sl].copy(), r.normal[sl].copy())


@dataclass
class Prepared:
    """Activated per-primitive quantities consumed by the kernels."""

    means: np.ndarray
    rot: np.ndarray
    inv_cov: np.ndarray
    opacity: np.ndarray
    conf: np.ndarray
    sh: np.ndarray
    ncol: np.ndarray
    naxis: np.ndarray
    cov: np.ndarray
    degree: int


def prepare(cloud: GaussianCloud) -> Prepared:
    R = cloud.rotmats()
    n = len(cloud)
    axis = normal_axis(cloud.log_scales) if n else np.zeros(0, dtype=np.int64)
    ncol = R[np.arange(n), :, axis] if n else np.zeros((0, 3))
    return Prepared(
        means=np.ascontiguousarray(cloud.means),
        rot=R,
        inv_cov=np.ascontiguousarray(cloud.inverse_covariances(R)),
        opacity=cloud.opacities,
        conf=cloud.confidences,
        sh=np.ascontiguousarray(cloud.sh),
        ncol=np.ascontiguousarray(ncol),
        naxis=axis.astype(np.int64),
        cov=np.ascontiguousarray(cloud.covariances(R)) if n else np.zeros((0, 3, 3)),
        degree=int(cloud.active_sh_degree),
    )


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _screen_range(K00, K0z, Kzz, focal, center, size):
    """Pixels whose center rays lie between the two tangent planes through
    the camera center (roots of K00 - 2 u K0z + u^2 Kzz = 0).

    Returns (1, 0), an empty range, when nothing is covered.
    """
    disc = K0z * K0z - K00 * Kzz
    if disc < 0.0:
        disc = 0.0
    # cancellation-free roots: q / Kzz and K00 / q
    q = K0z + math.copysign(math.sqrt(disc), K0z)
    if q == 0.0:
        return 0, size - 1
    u1 = q / Kzz
    u2 = K00 / q
    # pixel k is centered at u = (k + 0.5 - center) / focal
    lo = focal * min(u1, u2) + center - 0.5
    hi = focal * max(u1, u2) + center - 0.5
    return max(0, int(math.ceil(lo - PIXEL_GUARD))), min(size - 1, int(math.floor(hi + PIXEL_GUARD)))


@njit(cache=True, nogil=True)
def _bin_gaussians(Rc, tc, fx, fy, cx, cy, W, H, means, cov, opacity):
    """Conservative per-pixel candidate lists (CSR), ascending primitive index.

    A pixel is listed for a primitive if its center ray can meet the ellipsoid
    on which the 3D opacity reaches the 1/255 cutoff, so culling never changes
    the rendered result. The pixel box is the exact bound of the ellipsoid's
    projection (tangent planes of its dual quadric) with a tiny guard band.
    """
    n = means.shape[0]
    lo_u = np.empty(n, np.int64)
    hi_u = np.empty(n, np.int64)
    lo_v = np.empty(n, np.int64)
    hi_v = np.empty(n, np.int64)
    counts = np.zeros(W * H + 1, np.int64)
    M = np.empty((3, 3))
    c = np.empty(3)
    for g in range(n):
        lo_u[g] = 1
        hi_u[g] = 0
        lo_v[g] = 1
        hi_v[g] = 0
        o = opacity[g]
        if o * 255.0 < 1.0:
            continue
        r2 = 2.0 * math.log(255.0 * o) * (1.0 + 1e-9) + 1e-18
        for i in range(3):
            c[i] = Rc[i, 0] * means[g, 0] + Rc[i, 1] * means[g, 1] + Rc[i, 2] * means[g, 2] + tc[i]
        # camera-space shape matrix of the cutoff ellipsoid: r^2 Rc cov Rc^T
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    for l in range(3):
                        acc += Rc[i, k] * cov[g, k, l] * Rc[j, l]
                M[i, j] = r2 * acc
        ext_z = math.sqrt(max(M[2, 2], 0.0))
        if c[2] + ext_z <= 0.0:
            continue
        Kzz = M[2, 2] - c[2] * c[2]
        if c[2] - ext_z <= 1e-9 or Kzz >= -1e-12:
            lo_u[g] = 0
            hi_u[g] = W - 1
            lo_v[g] = 0
            hi_v[g] = H - 1
        else:
            lo_u[g], hi_u[g] = _screen_range(M[0, 0] - c[0] * c[0], M[0, 2] - c[0] * c[2], Kzz,
                                             fx, cx, W)
            lo_v[g], hi_v[g] = _screen_range(M[1, 1] - c[1] * c[1], M[1, 2] - c[1] * c[2], Kzz,
                                             fy, cy, H)
        for v in range(lo_v[g], hi_v[g] + 1):
            for u in range(lo_u[g], hi_u[g] + 1):
                counts[v * W + u + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    cand = np.empty(offsets[-1], np.int64)
    for g in range(n):
        for v in range(lo_v[g], hi_v[g] + 1):
            for u in range(lo_u[g], hi_u[g] + 1):
                p = v * W + u
                cand[fill[p]] = g
                fill[p] += 1
    return offsets, cand


@njit(cache=True, nogil=True)
def _forward_rays(p0, p1, origins, dirs, offsets, cand, means, inv_cov, opacity, conf, sh, ncol,
                  degree, out_color, out_normal, out_depth, out_conf, out_T, count,
                  c_idx, c_w, c_alpha, c_t, c_color, c_normal):
    basis = np.empty(16)
    for p in range(p0, p1):
        ox = origins[p, 0]
        oy = origins[p, 1]
        oz = origins[p, 2]
        dx = dirs[p, 0]
        dy = dirs[p, 1]
        dz = dirs[p, 2]
        start = offsets[p]
        end = offsets[p + 1]
        n = 0
        for k in range(start, end):
            g = cand[k]
            a00 = inv_cov[g, 0, 0]
            a01 = inv_cov[g, 0, 1]
            a02 = inv_cov[g, 0, 2]
            a10 = inv_cov[g, 1, 0]
            a11 = inv_cov[g, 1, 1]
            a12 = inv_cov[g, 1, 2]
            a20 = inv_cov[g, 2, 0]
            a21 = inv_cov[g, 2, 1]
            a22 = inv_cov[g, 2, 2]
            mx = means[g, 0]
            my = means[g, 1]
            mz = means[g, 2]
            adx = a00 * dx + a01 * dy + a02 * dz
            ady = a10 * dx + a11 * dy + a12 * dz
            adz = a20 * dx + a21 * dy + a22 * dz
            s = dx * adx + dy * ady + dz * adz
            t = ((mx - ox) * adx + (my - oy) * ady + (mz - oz) * adz) / s
            if t <= 0.0:
                continue
            ex = ox + t * dx - mx
            ey = oy + t * dy - my
            ez = oz + t * dz - mz
            m = (ex * (a00 * ex + a01 * ey + a02 * ez)
                 + ey * (a10 * ex + a11 * ey + a12 * ez)
                 + ez * (a20 * ex + a21 * ey + a22 * ez))
            a = opacity[g] * math.exp(-0.5 * m)
            if a < ALPHA_MIN:
                continue
            if a > ALPHA_MAX:
                a = ALPHA_MAX
            c_idx[start + n] = g
            c_t[start + n] = t
            c_alpha[start + n] = a
            n += 1
        sh_basis_into(basis, dx, dy, dz, degree)
        T = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        nx = 0.0
        ny = 0.0
        nz = 0.0
        dep = 0.0
        cf = 0.0
        kept = 0
        for j in range(n):
            slot = start + j
            # lazy selection of the nearest remaining contributor; ordering by
            # (t, index) reproduces a stable sort of the ascending-index list.
            # Rays stop after their last blend, so this beats a full sort.
            best = slot
            bt = c_t[slot]
            bg = c_idx[slot]
            for i in range(slot + 1, start + n):
                ti = c_t[i]
                if ti < bt or (ti == bt and c_idx[i] < bg):
                    best = i
                    bt = ti
                    bg = c_idx[i]
            if best != slot:
                c_t[best] = c_t[slot]
                c_idx[best] = c_idx[slot]
                ab = c_alpha[best]
                c_alpha[best] = c_alpha[slot]
                c_t[slot] = bt
                c_idx[slot] = bg
                c_alpha[slot] = ab
            g = c_idx[slot]
            a = c_alpha[slot]
            w = a * T
            for ch in range(3):
                v = 0.5
                for b in range(16):
                    v += basis[b] * sh[g, b, ch]
                if v < 0.0:
                    v = 0.0
                c_color[slot, ch] = v
            sgn = 1.0
            if ncol[g, 0] * dx + ncol[g, 1] * dy + ncol[g, 2] * dz > 0.0:
                sgn = -1.0
            c_normal[slot, 0] = sgn * ncol[g, 0]
            c_normal[slot, 1] = sgn * ncol[g, 1]
            c_normal[slot, 2] = sgn * ncol[g, 2]
            c_w[slot] = w
            cr += w * c_color[slot, 0]
            cg += w * c_color[slot, 1]
            cb += w * c_color[slot, 2]
            nx += w * c_normal[slot, 0]
            ny += w * c_normal[slot, 1]
            nz += w * c_normal[slot, 2]
            dep += w * c_t[slot]
            cf += w * conf[g]
            T = T * (1.0 - a)
            kept += 1
            if T < T_MIN:
                break
        count[p] = kept
        out_color[p, 0] = cr
        out_color[p, 1] = cg
        out_color[p, 2] = cb
        out_normal[p, 0] = nx
        out_normal[p, 1] = ny
        out_normal[p, 2] = nz
        out_depth[p] = dep
        out_conf[p] = cf
        out_T[p] = T


def _run_chunks(fn, n_items: int, workers: int):
    workers = max(1, int(workers))
    if workers == 1 or n_items < 2:
        fn(0, n_items)
        return
    bounds = np.linspace(0, n_items, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda i: fn(bounds[i], bounds[i + 1]), range(workers)))


def _render(prep: Prepared, origins, dirs, offsets, cand, workers: int = 1):
    P = dirs.shape[0]
    total = int(offsets[-1])
    out_color = np.zeros((P, 3))
    out_normal = np.zeros((P, 3))
    out_depth = np.zeros(P)
    out_conf = np.zeros(P)
    out_T = np.ones(P)
    count = np.zeros(P, np.int64)
    ret = Retained(offsets, count, np.zeros(total, np.int64), np.zeros(total), np.zeros(total),
                   np.zeros(total), np.zeros((total, 3)), np.zeros((total, 3)))

    def work(p0, p1):
        _forward_rays(p0, p1, origins, dirs, offsets, cand, prep.means, prep.inv_cov,
                      prep.opacity, prep.conf, prep.sh, prep.ncol, prep.degree, out_color,
                      out_normal, out_depth, out_conf, out_T, count, ret.idx, ret.w, ret.alpha,
                      ret.t, ret.color, ret.normal)

    _run_chunks(work, P, workers)
    return out_color, out_normal, out_depth, out_conf, out_T, ret


def render_ray(cloud: GaussianCloud, r: Ray) -> RaySample:
    """Blend every primitive of ``cloud`` along a single ray."""
    prep = prepare(cloud)
    n = len(cloud)
    offsets = np.array([0, n], dtype=np.int64)
    cand = np.arange(n, dtype=np.int64)
    color, normal, depth, conf, T, ret = _render(prep, r.origin[None], r.direction[None],
                                                 offsets, cand)
    k = ret.count[0]
    return RaySample(color[0], normal[0], float(depth[0]),
                     float(np.clip(conf[0], CONF_MIN, CONF_MAX)), float(conf[0]), float(T[0]),
                     ret.idx[:k], ret.w[:k], ret.alpha[:k], ret.t[:k], ret.color[:k],
                     ret.normal[:k])


def bin_camera(prep: Prepared, cam: Camera):
    return _bin_gaussians(cam.R, cam.t, float(cam.fx), float(cam.fy), float(cam.cx),
                          float(cam.cy), cam.width, cam.height, prep.means, prep.cov,
                          prep.opacity)


def render_image(cloud: GaussianCloud, cam: Camera, retain: bool = False,
                 workers: int = 1, prep: Prepared | None = None) -> RenderOutputs:
    """Render every pixel of ``cam``; per-ray records kept when ``retain`` is set."""
    prep = prepare(cloud) if prep is None else prep
    dirs = np.ascontiguousarray(cam.ray_directions())
    origins = np.ascontiguousarray(np.broadcast_to(cam.center, dirs.shape))
    offsets, cand = bin_camera(prep, cam)
    color, normal, depth, conf, T, ret = _render(prep, origins, dirs, offsets, cand, workers)
    H, W = cam.height, cam.width
    return RenderOutputs(
        color=color.reshape(H, W, 3),
        normal=normal.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        confidence=np.clip(conf, CONF_MIN, CONF_MAX).reshape(H, W),
        confidence_raw=conf.reshape(H, W),
        transmittance=T.reshape(H, W),
        origins=origins,
        dirs=dirs,
        retained=ret if retain else None,
    )


__all__ = [
    "ALPHA_MAX", "ALPHA_MIN", "CONF_MAX", "CONF_MIN", "T_MIN", "Prepared", "RaySample",
    "RenderOutputs", "Retained", "alpha_3d", "gaussian_normal", "max_contribution_point",
    "prepare", "render_image", "render_ray", "sh_eval",
]
