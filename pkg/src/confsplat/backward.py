"""Analytic gradients of every training loss w.r.t. every Gaussian parameter.

Blended quantities share one chain: for Q = sum_i w_i q_i with
w_i = alpha_i prod_{j<i}(1 - alpha_j),

    dQ/dalpha_i = q_i prod_{j<i}(1 - alpha_j) - (sum_{j>i} w_j q_j) / (1 - alpha_i).

The suffix sums are obtained by peeling per-primitive terms off the ray
total front to back. The opacity chain uses the stationarity of the
Mahalanobis form at the max-contribution point, so d(alpha)/d(mu) and
d(alpha)/d(Sigma^-1) need no derivative of x*; the ray parameter t* itself
(depth, distortion) is differentiated in full.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import losses as L
from .render import (ALPHA_MAX, CONF_MAX, CONF_MIN, RaySample, RenderOutputs, Retained,
                     _run_chunks, prepare, render_image)
from .scene import Camera, Gaussian, GaussianCloud, Ray, rotmat_grad_to_quat
from .sh import sh_basis_into


class NonFiniteGradient(FloatingPointError):
    def __init__(self, index: int, what: str = "primitive"):
        super().__init__(f"non-finite gradient at {what} {index}")
        self.index = index


@dataclass
class GradientBuffer:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    gamma: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 16, 3)), np.zeros(n), np.zeros(n, dtype=bool))

    @property
    def position_norm(self) -> np.ndarray:
        """Per-primitive |dL/dmu|, the densification statistic."""
        return np.linalg.norm(self.means, axis=1)

    def fields(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "quats": self.quats, "log_scales": self.log_scales,
                "opacity_logits": self.opacity_logits, "sh": self.sh, "gamma": self.gamma}

    def check_finite(self) -> None:
        for name, arr in self.fields().items():
            bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
            if bad.any():
                raise NonFiniteGradient(int(np.argmax(bad)), f"primitive ({name})")


# ---------------------------------------------------------------------------
# single-ray reference API
# ---------------------------------------------------------------------------

@dataclass
class BlendGrads:
    color: np.ndarray
    normal: np.ndarray
    t: np.ndarray
    conf: np.ndarray
    alpha: np.ndarray


def _alpha_chain(alphas, weights, per_weight):
    """dL/dalpha_i given dL/dw_j for every contributor (suffix-sum peeling)."""
    total = float(np.dot(per_weight, weights))
    out = np.zeros(len(alphas))
    T = 1.0
    acc = 0.0
    for i, (a, w, g) in enumerate(zip(alphas, weights, per_weight)):
        acc += g * w
        # alpha = 1 leaves nothing behind it, so its suffix term vanishes
        out[i] = g * T - ((total - acc) / (1.0 - a) if a < 1.0 else 0.0)
        T *= 1.0 - a
    return out


def backward_blend(sample: RaySample, conf_tilde=None, up_color=(0, 0, 0), up_normal=(0, 0, 0),
                   up_depth=0.0, up_conf=0.0) -> BlendGrads:
    """Per-contributor gradients of the blended outputs given their upstream gradients."""
    n = len(sample.weights)
    up_color = np.asarray(up_color, dtype=np.float64)
    up_normal = np.asarray(up_normal, dtype=np.float64)
    conf_tilde = np.zeros(n) if conf_tilde is None else np.asarray(conf_tilde, dtype=np.float64)
    if not CONF_MIN <= sample.confidence_raw <= CONF_MAX:
        up_conf = 0.0
    w = sample.weights
    per_weight = (sample.colors @ up_color + sample.normals @ up_normal + up_depth * sample.ts
                  + up_conf * conf_tilde)
    return BlendGrads(
        color=w[:, None] * up_color[None, :],
        normal=w[:, None] * up_normal[None, :],
        t=w * up_depth,
        conf=w * up_conf,
        alpha=_alpha_chain(sample.alphas, w, per_weight),
    )


def backward_color_var(sample: RaySample, target):
    """(d/dcolor_i, d/dalpha_i) of sum_i w_i |c_i - I|^2."""
    diff = sample.colors - np.asarray(target, dtype=np.float64)
    sq = np.sum(diff * diff, axis=1)
    return 2.0 * sample.weights[:, None] * diff, _alpha_chain(sample.alphas, sample.weights, sq)


def backward_normal_var(sample: RaySample, exact: bool = False):
    """(d/dn_i, d/dalpha_i) of sum_i w_i |n_i - N|^2.

    With ``exact=False`` the blended normal N is held fixed (the closed form
    2 w_i (n_i - N)); ``exact=True`` adds the dependence of N on n_i and alpha,
    which vanishes once the weights sum to one.
    """
    w = sample.weights
    n = sample.normals
    N = w @ n if len(w) else np.zeros(3)
    diff = n - N
    d_n = 2.0 * w[:, None] * diff
    per_weight = np.sum(diff * diff, axis=1)
    if exact:
        gN = -2.0 * N * (1.0 - w.sum())
        d_n = d_n + w[:, None] * gN[None, :]
        per_weight = per_weight + n @ gN
    return d_n, _alpha_chain(sample.alphas, w, per_weight)


def backward_confidence(rgb_map, conf_map, beta: float, conf_raw=None) -> np.ndarray:
    """Per-pixel dL_conf/dC of the mean-reduced loss; zero where C is clamped."""
    rgb_map = np.asarray(rgb_map, dtype=np.float64)
    g = L.confidence_grad(rgb_map, conf_map, beta) / rgb_map.size
    if conf_raw is not None:
        raw = np.asarray(conf_raw)
        g = np.where((raw >= CONF_MIN) & (raw <= CONF_MAX), g, 0.0)
    return g


def _chain_covariance(quats, log_scales, R, dA, d_ncol, naxis):
    """Pull dL/dSigma^-1 and dL/d(normal column) back to (quats, log_scales)."""
    dA = 0.5 * (dA + np.transpose(dA, (0, 2, 1)))
    inv_s2 = np.exp(-2.0 * log_scales)
    GR = dA @ R
    dR = 2.0 * GR * inv_s2[:, None, :]
    n = len(quats)
    dR[np.arange(n), :, naxis] += d_ncol
    # diagonal of R^T dA R
    d_ls = -2.0 * inv_s2 * np.sum(R * GR, axis=1)
    return rotmat_grad_to_quat(quats, dR), d_ls


def backward_alpha_geom(g: Gaussian, r: Ray, d_alpha: float, d_t: float = 0.0) -> dict:
    """Gradients of d_alpha * alpha + d_t * t* w.r.t. the primitive's geometry and opacity."""
    cloud = GaussianCloud.from_gaussians([g])
    prep = prepare(cloud)
    A = prep.inv_cov[0]
    d = r.direction
    Ad = A @ d
    s = d @ Ad
    t = Ad @ (g.position - r.origin) / s
    delta = r.origin + t * d - g.position
    m = delta @ A @ delta
    o = prep.opacity[0]
    e = math.exp(-0.5 * m)
    a = o * e
    if a > ALPHA_MAX:
        d_alpha = 0.0
    d_logit = d_alpha * e * o * (1 - o)
    dm = -0.5 * a * d_alpha
    d_mu = dm * (-2.0 * A @ delta) + d_t * Ad / s
    dA = dm * np.outer(delta, delta) + d_t * (-np.outer(d, delta) / s)
    dq, dls = _chain_covariance(cloud.quats, cloud.log_scales, prep.rot, dA[None],
                                np.zeros((1, 3)), prep.naxis)
    return {"mu": d_mu, "rotation": dq[0], "log_scale": dls[0], "opacity_logit": d_logit}


# ---------------------------------------------------------------------------
# fused image kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _backward_rays(p0, p1, origins, dirs, offsets, count, idx, w, alpha, t, color, normal,
                   means, inv_cov, opacity, conf, ncol, up_color, up_normal, up_depth, up_conf,
                   target, lam_cv, lam_nv, lam_dist, exact_normal,
                   d_mu, d_A, d_ncol, d_color, d_conft, d_logit):
    for p in range(p0, p1):
        s0 = offsets[p]
        n = count[p]
        if n == 0:
            continue
        sw = 0.0
        Nx = 0.0
        Ny = 0.0
        Nz = 0.0
        D = 0.0
        for j in range(s0, s0 + n):
            sw += w[j]
            Nx += w[j] * normal[j, 0]
            Ny += w[j] * normal[j, 1]
            Nz += w[j] * normal[j, 2]
            D += w[j] * t[j]
        uNx = up_normal[p, 0]
        uNy = up_normal[p, 1]
        uNz = up_normal[p, 2]
        if exact_normal:
            k = -2.0 * lam_nv * (1.0 - sw)
            uNx += k * Nx
            uNy += k * Ny
            uNz += k * Nz
        uD = up_depth[p]
        Dm = D / sw  # the distortion spread is taken around the normalised mean depth
        ucr = up_color[p, 0]
        ucg = up_color[p, 1]
        ucb = up_color[p, 2]
        uc = up_conf[p]
        tr = target[p, 0]
        tg = target[p, 1]
        tb = target[p, 2]
        total = 0.0
        for j in range(s0, s0 + n):
            g = idx[j]
            e0 = color[j, 0] - tr
            e1 = color[j, 1] - tg
            e2 = color[j, 2] - tb
            f0 = normal[j, 0] - Nx
            f1 = normal[j, 1] - Ny
            f2 = normal[j, 2] - Nz
            dt = t[j] - Dm
            gw = (ucr * color[j, 0] + ucg * color[j, 1] + ucb * color[j, 2]
                  + uNx * normal[j, 0] + uNy * normal[j, 1] + uNz * normal[j, 2]
                  + uD * t[j] + uc * conf[g]
                  + lam_cv * (e0 * e0 + e1 * e1 + e2 * e2)
                  + lam_nv * (f0 * f0 + f1 * f1 + f2 * f2)
                  + lam_dist * dt * dt)
            d_conft[j] = gw  # stash dL/dw_j; overwritten below
            total += gw * w[j]
        ox = origins[p, 0]
        oy = origins[p, 1]
        oz = origins[p, 2]
        dx = dirs[p, 0]
        dy = dirs[p, 1]
        dz = dirs[p, 2]
        T = 1.0
        acc = 0.0
        for j in range(s0, s0 + n):
            g = idx[j]
            wj = w[j]
            aj = alpha[j]
            gw = d_conft[j]
            acc += gw * wj
            d_alpha = gw * T - (total - acc) / (1.0 - aj)
            T *= 1.0 - aj

            dcol0 = wj * ucr + 2.0 * lam_cv * wj * (color[j, 0] - tr)
            dcol1 = wj * ucg + 2.0 * lam_cv * wj * (color[j, 1] - tg)
            dcol2 = wj * ucb + 2.0 * lam_cv * wj * (color[j, 2] - tb)
            d_color[j, 0] = dcol0 if color[j, 0] > 0.0 else 0.0
            d_color[j, 1] = dcol1 if color[j, 1] > 0.0 else 0.0
            d_color[j, 2] = dcol2 if color[j, 2] > 0.0 else 0.0
            sgn = normal[j, 0] * ncol[g, 0] + normal[j, 1] * ncol[g, 1] + normal[j, 2] * ncol[g, 2]
            d_ncol[j, 0] = sgn * (wj * uNx + 2.0 * lam_nv * wj * (normal[j, 0] - Nx))
            d_ncol[j, 1] = sgn * (wj * uNy + 2.0 * lam_nv * wj * (normal[j, 1] - Ny))
            d_ncol[j, 2] = sgn * (wj * uNz + 2.0 * lam_nv * wj * (normal[j, 2] - Nz))
            d_tj = wj * uD + 2.0 * lam_dist * wj * (t[j] - Dm)
            d_conft[j] = wj * uc

            A = inv_cov[g]
            adx = A[0, 0] * dx + A[0, 1] * dy + A[0, 2] * dz
            ady = A[1, 0] * dx + A[1, 1] * dy + A[1, 2] * dz
            adz = A[2, 0] * dx + A[2, 1] * dy + A[2, 2] * dz
            s = dx * adx + dy * ady + dz * adz
            ex = ox + t[j] * dx - means[g, 0]
            ey = oy + t[j] * dy - means[g, 1]
            ez = oz + t[j] * dz - means[g, 2]
            aex = A[0, 0] * ex + A[0, 1] * ey + A[0, 2] * ez
            aey = A[1, 0] * ex + A[1, 1] * ey + A[1, 2] * ez
            aez = A[2, 0] * ex + A[2, 1] * ey + A[2, 2] * ez
            m = ex * aex + ey * aey + ez * aez
            o = opacity[g]
            ee = math.exp(-0.5 * m)
            a_pre = o * ee
            if a_pre > ALPHA_MAX:
                d_alpha = 0.0
            d_logit[j] = d_alpha * ee * o * (1.0 - o)
            dm = -0.5 * a_pre * d_alpha
            ks = d_tj / s
            d_mu[j, 0] = -2.0 * dm * aex + ks * adx
            d_mu[j, 1] = -2.0 * dm * aey + ks * ady
            d_mu[j, 2] = -2.0 * dm * aez + ks * adz
            dvec0 = dx
            dvec1 = dy
            dvec2 = dz
            d_A[j, 0, 0] = dm * ex * ex - ks * dvec0 * ex
            d_A[j, 0, 1] = dm * ex * ey - ks * dvec0 * ey
            d_A[j, 0, 2] = dm * ex * ez - ks * dvec0 * ez
            d_A[j, 1, 0] = dm * ey * ex - ks * dvec1 * ex
            d_A[j, 1, 1] = dm * ey * ey - ks * dvec1 * ey
            d_A[j, 1, 2] = dm * ey * ez - ks * dvec1 * ez
            d_A[j, 2, 0] = dm * ez * ex - ks * dvec2 * ex
            d_A[j, 2, 1] = dm * ez * ey - ks * dvec2 * ey
            d_A[j, 2, 2] = dm * ez * ez - ks * dvec2 * ez


@njit(cache=True, nogil=True)
def _accumulate(offsets, count, idx, dirs, degree, d_mu, d_A, d_ncol, d_color, d_conft, d_logit,
                g_mu, g_A, g_ncol, g_sh, g_conft, g_logit, visible):
    """Sequential, fixed-order reduction of per-contributor gradients."""
    basis = np.empty(16)
    nb = (degree + 1) * (degree + 1)
    for p in range(count.shape[0]):
        s0 = offsets[p]
        n = count[p]
        if n == 0:
            continue
        sh_basis_into(basis, dirs[p, 0], dirs[p, 1], dirs[p, 2], degree)
        for j in range(s0, s0 + n):
            g = idx[j]
            visible[g] = True
            for a in range(3):
                g_mu[g, a] += d_mu[j, a]
                g_ncol[g, a] += d_ncol[j, a]
                for b in range(3):
                    g_A[g, a, b] += d_A[j, a, b]
            for k in range(nb):
                for c in range(3):
                    g_sh[g, k, c] += basis[k] * d_color[j, c]
            g_conft[g] += d_conft[j]
            g_logit[g] += d_logit[j]


def splat_backward(cloud: GaussianCloud, outputs: RenderOutputs, up_color, up_normal, up_depth,
                   up_conf, target, lam_cv: float = 0.0, lam_nv: float = 0.0,
                   lam_dist: float = 0.0, exact_normal: bool = False, prep=None,
                   workers: int = 1) -> GradientBuffer:
    """Back-propagate per-pixel upstream gradients and per-ray losses into the cloud.

    ``lam_*`` multiply per-ray sums and already include the mean reduction.
    """
    prep = prepare(cloud) if prep is None else prep
    r: Retained = outputs.retained
    if r is None:
        raise ValueError("backward needs a render with retain=True")
    P = outputs.dirs.shape[0]
    tot = len(r.idx)
    d_mu = np.zeros((tot, 3))
    d_A = np.zeros((tot, 3, 3))
    d_ncol = np.zeros((tot, 3))
    d_color = np.zeros((tot, 3))
    d_conft = np.zeros(tot)
    d_logit = np.zeros(tot)

    def flat(x, k):
        return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(P, k))

    uc, un, ud = flat(up_color, 3), flat(up_normal, 3), flat(up_depth, 1)[:, 0].copy()
    uf, tg = flat(up_conf, 1)[:, 0].copy(), flat(target, 3)

    def work(p0, p1):
        _backward_rays(p0, p1, outputs.origins, outputs.dirs, r.offsets, r.count, r.idx, r.w,
                       r.alpha, r.t, r.color, r.normal, prep.means, prep.inv_cov, prep.opacity,
                       prep.conf, prep.ncol, uc, un, ud, uf, tg, float(lam_cv), float(lam_nv),
                       float(lam_dist), bool(exact_normal), d_mu, d_A, d_ncol, d_color, d_conft,
                       d_logit)

    _run_chunks(work, P, workers)
    n = len(cloud)
    buf = GradientBuffer.zeros(n)
    g_A = np.zeros((n, 3, 3))
    g_ncol = np.zeros((n, 3))
    g_conft = np.zeros(n)
    _accumulate(r.offsets, r.count, r.idx, outputs.dirs, prep.degree, d_mu, d_A, d_ncol, d_color,
                d_conft, d_logit, buf.means, g_A, g_ncol, buf.sh, g_conft, buf.opacity_logits,
                buf.visible)
    if n:
        buf.quats, buf.log_scales = _chain_covariance(cloud.quats, cloud.log_scales, prep.rot,
                                                      g_A, g_ncol, prep.naxis)
        buf.gamma = g_conft * prep.conf
    return buf


# ---------------------------------------------------------------------------
# end-to-end
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    report: L.LossReport
    grads: GradientBuffer
    appearance_grads: dict | None
    outputs: RenderOutputs
    rendered_app: np.ndarray


def image_gradients(outputs: RenderOutputs, target, rendered_app, report: L.LossReport,
                    weights: L.LossWeights, iteration: int, mask=None):
    """Upstream gradients w.r.t. (I_hat, I_app, confidence) of the image-space terms."""
    target = np.asarray(target, dtype=np.float64)
    H, W = outputs.shape
    P = H * W
    I_hat = outputs.color
    I_app = rendered_app
    if weights.confidence_active(iteration):
        u = outputs.confidence / P
        d_conf = backward_confidence(report.rgb_map, outputs.confidence, weights.beta,
                                     outputs.confidence_raw)
        if mask is not None:
            u = np.where(mask, u, 1.0 / P)
            d_conf = np.where(mask, d_conf, 0.0)
    else:
        u = np.full((H, W), 1.0 / P)
        d_conf = np.zeros((H, W))
    u = u * weights.lambda_photometric
    d_conf = d_conf * weights.lambda_photometric
    C = target.shape[2]
    d_app = (1 - weights.lambda_rgb) / C * u[:, :, None] * np.sign(I_app - target)
    d_hat, d_app_ssim = L.decoupled_ssim_backward(target, I_hat, I_app, -weights.lambda_rgb * u)
    return d_hat, d_app + d_app_ssim, d_conf


def backward_full(cloud: GaussianCloud, cam: Camera, target, weights: L.LossWeights,
                  iteration: int = 0, appearance=None, workers: int = 1,
                  mask=None) -> StepResult:
    """Render, assemble every loss and back-propagate it to the cloud (and appearance)."""
    target = L._as3(target)
    prep = prepare(cloud)
    outputs = render_image(cloud, cam, retain=True, workers=workers, prep=prep)
    ctx = None
    if appearance is not None:
        rendered_app, ctx = appearance.forward(outputs.color, cam.image_id)
    else:
        rendered_app = outputs.color
    report = L.total_loss(outputs, target, weights, iteration, rendered_app, cam, mask)

    d_hat, d_app, d_conf = image_gradients(outputs, target, rendered_app, report, weights,
                                           iteration, mask)
    app_grads = None
    if appearance is not None:
        d_from_app, app_grads = appearance.backward(ctx, d_app)
        d_hat = d_hat + d_from_app
    else:
        d_hat = d_hat + d_app

    H, W = outputs.shape
    P = H * W
    lam_dn, lam_dist = weights.geometric(iteration)
    if lam_dn > 0:
        g_depth, g_normal = L.depth_normal_backward(outputs)
        g_depth, g_normal = lam_dn * g_depth, lam_dn * g_normal
    else:
        g_depth, g_normal = np.zeros((H, W)), np.zeros((H, W, 3))
    grads = splat_backward(cloud, outputs, d_hat, g_normal, g_depth, d_conf, target,
                           lam_cv=weights.lambda_color_var / P,
                           lam_nv=weights.lambda_normal_var / P,
                           lam_dist=lam_dist / P,
                           exact_normal=weights.normal_grad == "exact",
                           prep=prep, workers=workers)
    # a non-finite loss is the caller's to handle; only finite losses vouch for the gradients
    if math.isfinite(report.total):
        grads.check_finite()
    return StepResult(report, grads, app_grads, outputs, rendered_app)


def loss_only(cloud: GaussianCloud, cam: Camera, target, weights: L.LossWeights,
              iteration: int = 0, appearance=None, mask=None) -> L.LossReport:
    target = L._as3(target)
    outputs = render_image(cloud, cam, retain=True)
    rendered_app = outputs.color
    if appearance is not None:
        rendered_app, _ = appearance.forward(outputs.color, cam.image_id)
    return L.total_loss(outputs, target, weights, iteration, rendered_app, cam, mask)
