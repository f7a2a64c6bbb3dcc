"""Training losses: photometric with decoupled D-SSIM, confidence weighting,
blending-variance terms and the geometric regularizers.

Images are float64 arrays of shape (H, W, C). Every per-image scalar is a
mean over pixels, so losses are invariant under pixel replication.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from .render import CONF_MAX, CONF_MIN, RaySample, RenderOutputs

C1 = 0.01**2
C2 = 0.03**2
C3 = C2 / 2
WINDOW = 11
WINDOW_SIGMA = 1.5


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=64)
def _filter_matrix(n: int) -> np.ndarray:
    """(n, n) matrix applying the 1-D window with reflection padding."""
    half = WINDOW // 2
    padded = np.pad(np.eye(n), ((half, half), (0, 0)), mode="reflect")
    w = gaussian_window()
    K = np.zeros((n, n))
    for k in range(WINDOW):
        K += w[k] * padded[k:k + n]
    K.setflags(write=False)
    return K


def _separable(Kh: np.ndarray, Kw: np.ndarray, x: np.ndarray) -> np.ndarray:
    # contiguous operands keep both products on the BLAS path
    H, W = x.shape[:2]
    y = (Kh @ np.ascontiguousarray(x).reshape(H, -1)).reshape(x.shape)
    return np.matmul(Kw, y)


def blur(x: np.ndarray) -> np.ndarray:
    """Separable windowed mean of an (H, W, C) image."""
    return _separable(_filter_matrix(x.shape[0]), _filter_matrix(x.shape[1]), x)


def blur_adjoint(g: np.ndarray) -> np.ndarray:
    return _separable(_filter_matrix(g.shape[0]).T, _filter_matrix(g.shape[1]).T, g)


def _as3(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, None] if x.ndim == 2 else x


@dataclass
class SsimMaps:
    """Per-pixel, per-channel luminance, contrast and structure factors."""

    l: np.ndarray
    c: np.ndarray
    s: np.ndarray
    C1: float = C1
    C2: float = C2
    C3: float = C3

    @property
    def ssim(self) -> np.ndarray:
        """Channel-averaged l*c*s per pixel."""
        return (self.l * self.c * self.s).mean(axis=2)


@dataclass
class _Stats:
    mu_x: np.ndarray
    mu_y: np.ndarray
    var_x: np.ndarray
    var_y: np.ndarray
    cov: np.ndarray


def _stats(x, y) -> _Stats:
    C = x.shape[2]
    b = blur(np.concatenate([x, y, x * x, y * y, x * y], axis=2))
    mu_x, mu_y = b[..., :C], b[..., C:2 * C]
    return _Stats(mu_x, mu_y, b[..., 2 * C:3 * C] - mu_x**2, b[..., 3 * C:4 * C] - mu_y**2,
                  b[..., 4 * C:] - mu_x * mu_y)


def _check_shapes(*imgs):
    shape = imgs[0].shape
    for im in imgs[1:]:
        if im.shape != shape:
            raise ValueError(f"image shape mismatch: {shape} vs {im.shape}")


def ssim_components(I, I_hat) -> SsimMaps:
    I, I_hat = _as3(I), _as3(I_hat)
    _check_shapes(I, I_hat)
    st = _stats(I, I_hat)
    sx = np.sqrt(np.maximum(st.var_x, 0.0))
    sy = np.sqrt(np.maximum(st.var_y, 0.0))
    l = (2 * st.mu_x * st.mu_y + C1) / (st.mu_x**2 + st.mu_y**2 + C1)
    c = (2 * sx * sy + C2) / (st.var_x + st.var_y + C2)
    s = (st.cov + C3) / (sx * sy + C3)
    return SsimMaps(l, c, s)


def _luminance(mu_x, mu_a):
    return (2 * mu_x * mu_a + C1) / (mu_x**2 + mu_a**2 + C1)


def _contrast_structure(st: _Stats):
    # c*s with C3 = C2/2 collapses to this form, which has no square roots.
    return (2 * st.cov + C2) / (st.var_x + st.var_y + C2)


def ssim_map(I, I_hat) -> np.ndarray:
    """Classic SSIM per pixel, channel-averaged."""
    I, I_hat = _as3(I), _as3(I_hat)
    st = _stats(I, I_hat)
    return (_luminance(st.mu_x, st.mu_y) * _contrast_structure(st)).mean(axis=2)


def decoupled_ssim_map(I, I_hat, I_app) -> np.ndarray:
    I, I_hat, I_app = _as3(I), _as3(I_hat), _as3(I_app)
    _check_shapes(I, I_hat, I_app)
    st = _stats(I, I_hat)
    return (_luminance(st.mu_x, blur(I_app)) * _contrast_structure(st)).mean(axis=2)


def dssim_decoupled(I, I_hat, I_app) -> float:
    """1 - mean(l(I, I_app) * c(I, I_hat) * s(I, I_hat))."""
    return float(1.0 - decoupled_ssim_map(I, I_hat, I_app).mean())


def decoupled_ssim_backward(I, I_hat, I_app, g_map):
    """Gradients of sum(g_map * decoupled_ssim_map) w.r.t. (I_hat, I_app)."""
    I, I_hat, I_app = _as3(I), _as3(I_hat), _as3(I_app)
    C = I.shape[2]
    g = np.repeat(np.asarray(g_map)[:, :, None] / C, C, axis=2)
    st = _stats(I, I_hat)
    mu_a = blur(I_app)
    den_l = st.mu_x**2 + mu_a**2 + C1
    l = (2 * st.mu_x * mu_a + C1) / den_l
    den_cs = st.var_x + st.var_y + C2
    cs = (2 * st.cov + C2) / den_cs
    g_mu_a = g * cs * (2 * st.mu_x - 2 * mu_a * l) / den_l
    g_cs = g * l
    g_cov = g_cs * 2 / den_cs
    g_var_y = -g_cs * cs / den_cs
    g_mu_y = g_var_y * (-2 * st.mu_y) + g_cov * (-st.mu_x)
    d_hat = blur_adjoint(g_mu_y) + 2 * I_hat * blur_adjoint(g_var_y) + I * blur_adjoint(g_cov)
    d_app = blur_adjoint(g_mu_a)
    return d_hat, d_app


# ---------------------------------------------------------------------------
# photometric and confidence
# ---------------------------------------------------------------------------

def _photometric_maps(I, I_hat, I_app):
    I, I_hat = _as3(I), _as3(I_hat)
    I_app = I_hat if I_app is None else _as3(I_app)
    return np.abs(I - I_app).mean(axis=2), 1.0 - decoupled_ssim_map(I, I_hat, I_app)


def photometric(I, I_hat, I_app=None, lambda_rgb: float = 0.2):
    """Return (scalar, per-pixel map) of the L1 + decoupled D-SSIM loss."""
    l1_map, dssim_map = _photometric_maps(I, I_hat, I_app)
    m = (1 - lambda_rgb) * l1_map + lambda_rgb * dssim_map
    return float(m.mean()), m


def confidence_loss(rgb_map, conf_map, beta: float, mask=None) -> float:
    """Mean of L_rgb * C - beta log C.

    Pixels outside an optional foreground ``mask`` are scored as if C = 1,
    i.e. they contribute plain L_rgb.
    """
    conf_map = np.asarray(conf_map, dtype=np.float64)
    if conf_map.min() < CONF_MIN or conf_map.max() > CONF_MAX:
        raise ValueError("confidence outside the clamp range [0.001, 5.0]")
    rgb_map = np.asarray(rgb_map)
    per_pixel = rgb_map * conf_map - beta * np.log(conf_map)
    if mask is not None:
        per_pixel = np.where(mask, per_pixel, rgb_map)
    return float(np.mean(per_pixel))


def confidence_grad(rgb_map, conf_map, beta: float) -> np.ndarray:
    """Per-pixel d(L_rgb * C - beta log C)/dC, before mean reduction."""
    return np.asarray(rgb_map) - beta / np.asarray(conf_map)


# ---------------------------------------------------------------------------
# blending-variance terms (single ray)
# ---------------------------------------------------------------------------

def color_variance(weights, colors, target) -> float:
    d = np.asarray(colors) - np.asarray(target)
    return float(np.sum(np.asarray(weights) * np.sum(d * d, axis=-1)))


def color_variance_loss(sample: RaySample, target) -> float:
    return color_variance(sample.weights, sample.colors, target)


def normal_variance(weights, normals) -> float:
    """Explicit weighted spread of normals around their blend."""
    w = np.asarray(weights)
    n = np.asarray(normals)
    N = w @ n if len(w) else np.zeros(3)
    d = n - N
    return float(np.sum(w * np.sum(d * d, axis=-1)))


def normal_variance_loss(sample: RaySample) -> float:
    return normal_variance(sample.weights, sample.normals)


def normal_variance_fast(sample: RaySample) -> float:
    """1 - |N|^2; equal to the explicit sum only when the weights sum to one."""
    N = sample.weights @ sample.normals if len(sample.weights) else np.zeros(3)
    return float(1.0 - N @ N)


@njit(cache=True, nogil=True)
def _ray_terms(offsets, count, w, t, color, normal, target, out_cv, out_nv, out_dist):
    for p in range(count.shape[0]):
        s = offsets[p]
        n = count[p]
        nx = 0.0
        ny = 0.0
        nz = 0.0
        D = 0.0
        for j in range(s, s + n):
            nx += w[j] * normal[j, 0]
            ny += w[j] * normal[j, 1]
            nz += w[j] * normal[j, 2]
            D += w[j] * t[j]
        sw = 0.0
        for j in range(s, s + n):
            sw += w[j]
        Dm = D / sw if n > 0 else 0.0
        cv = 0.0
        nv = 0.0
        dist = 0.0
        for j in range(s, s + n):
            e0 = color[j, 0] - target[p, 0]
            e1 = color[j, 1] - target[p, 1]
            e2 = color[j, 2] - target[p, 2]
            cv += w[j] * (e0 * e0 + e1 * e1 + e2 * e2)
            f0 = normal[j, 0] - nx
            f1 = normal[j, 1] - ny
            f2 = normal[j, 2] - nz
            nv += w[j] * (f0 * f0 + f1 * f1 + f2 * f2)
            dt = t[j] - Dm
            dist += w[j] * dt * dt
        out_cv[p] = cv
        out_nv[p] = nv
        out_dist[p] = dist


def ray_terms(outputs: RenderOutputs, target) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-ray color variance, normal variance and depth distortion."""
    r = outputs.retained
    if r is None:
        raise ValueError("render with retain=True to evaluate per-ray losses")
    P = r.count.shape[0]
    cv, nv, dist = np.zeros(P), np.zeros(P), np.zeros(P)
    _ray_terms(r.offsets, r.count, r.w, r.t, r.color, r.normal,
               np.ascontiguousarray(_as3(target).reshape(P, -1)), cv, nv, dist)
    return cv, nv, dist


# ---------------------------------------------------------------------------
# geometric regularizers
# ---------------------------------------------------------------------------

COVERAGE_MIN = 0.5


def _depth_normal_terms(outputs: RenderOutputs):
    H, W = outputs.shape
    P = outputs.origins.reshape(H, W, 3) + outputs.depth[:, :, None] * outputs.dirs.reshape(H, W, 3)
    a = P[1:-1, 2:] - P[1:-1, :-2]
    b = P[2:, 1:-1] - P[:-2, 1:-1]
    c = np.cross(a, b)
    cn = np.linalg.norm(c, axis=-1)
    d = outputs.dirs.reshape(H, W, 3)[1:-1, 1:-1]
    sign = np.where(np.sum(c * d, axis=-1) > 0, -1.0, 1.0)
    N = outputs.normal[1:-1, 1:-1]
    Nn = np.linalg.norm(N, axis=-1)
    cov = 1.0 - outputs.transmittance
    covered = ((cov[1:-1, 1:-1] >= COVERAGE_MIN) & (cov[1:-1, 2:] >= COVERAGE_MIN)
               & (cov[1:-1, :-2] >= COVERAGE_MIN) & (cov[2:, 1:-1] >= COVERAGE_MIN)
               & (cov[:-2, 1:-1] >= COVERAGE_MIN))
    valid = (Nn >= 1e-6) & (cn > 1e-12) & covered
    return a, b, c, cn, sign, N, Nn, valid


def geometric_losses(outputs: RenderOutputs, cam=None) -> tuple[float, float]:
    """(depth-normal consistency, depth distortion) for one rendered view.

    Depth-normal compares the blended normal with the normal of the surface
    back-projected from the depth buffer (central differences); only interior
    pixels whose 3x3 cross is covered are used. Distortion is the mean over
    rays of sum_i w_i (t_i - D)^2 with D = sum w t / sum w, the weighted
    spread of the contributors around their normalised mean depth.
    """
    H, W = outputs.shape
    dn = 0.0
    if H >= 3 and W >= 3:
        a, b, c, cn, sign, N, Nn, valid = _depth_normal_terms(outputs)
        if valid.any():
            nd = sign[..., None] * c / np.maximum(cn, 1e-300)[..., None]
            Nh = N / np.maximum(Nn, 1e-300)[..., None]
            dn = float(np.mean(1.0 - np.sum(Nh * nd, axis=-1)[valid]))
    dist = 0.0
    if outputs.retained is not None:
        _, _, d = ray_terms(outputs, np.zeros((H, W, 3)))
        dist = float(d.mean())
    return dn, dist


def depth_normal_backward(outputs: RenderOutputs):
    """Gradients of the depth-normal term w.r.t. (depth (H, W), normal (H, W, 3))."""
    H, W = outputs.shape
    g_depth = np.zeros((H, W))
    g_normal = np.zeros((H, W, 3))
    if H < 3 or W < 3:
        return g_depth, g_normal
    a, b, c, cn, sign, N, Nn, valid = _depth_normal_terms(outputs)
    nv = int(valid.sum())
    if nv == 0:
        return g_depth, g_normal
    safe_cn = np.where(valid, cn, 1.0)[..., None]
    safe_Nn = np.where(valid, Nn, 1.0)[..., None]
    nd = sign[..., None] * c / safe_cn
    Nh = N / safe_Nn
    m = valid[..., None] / nv
    gN = -(nd - Nh * np.sum(Nh * nd, axis=-1, keepdims=True)) / safe_Nn * m
    cu = c / safe_cn
    gc = -sign[..., None] * (Nh - cu * np.sum(cu * Nh, axis=-1, keepdims=True)) / safe_cn * m
    ga = np.cross(b, gc)
    gb = np.cross(gc, a)
    gP = np.zeros((H, W, 3))
    gP[1:-1, 2:] += ga
    gP[1:-1, :-2] -= ga
    gP[2:, 1:-1] += gb
    gP[:-2, 1:-1] -= gb
    g_depth = np.sum(gP * outputs.dirs.reshape(H, W, 3), axis=-1)
    g_normal[1:-1, 1:-1] = gN
    return g_depth, g_normal


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    lambda_rgb: float = 0.2
    lambda_color_var: float = 0.5
    lambda_normal_var: float = 0.005
    beta: float = 0.075
    lambda_depth_normal: float = 0.05
    lambda_distortion: float = 1.0
    conf_start_iteration: int = 500
    depth_normal_start_iteration: int = 1600
    distortion_start_iteration: int = 700
    use_confidence: bool = True
    normal_grad: str = "fixed"
    lambda_photometric: float = 1.0

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_color_var", "lambda_normal_var", "beta",
                     "lambda_depth_normal", "lambda_distortion", "lambda_photometric"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.normal_grad not in ("fixed", "exact"):
            raise ValueError("normal_grad must be 'fixed' or 'exact'")

    def confidence_active(self, iteration: int) -> bool:
        return self.use_confidence and iteration >= self.conf_start_iteration

    def geometric(self, iteration: int) -> tuple[float, float]:
        dn = self.lambda_depth_normal if iteration >= self.depth_normal_start_iteration else 0.0
        dist = self.lambda_distortion if iteration >= self.distortion_start_iteration else 0.0
        return dn, dist

    @classmethod
    def photometric_only(cls, lambda_rgb: float = 0.2) -> "LossWeights":
        return cls(lambda_rgb=lambda_rgb, lambda_color_var=0.0, lambda_normal_var=0.0,
                   lambda_depth_normal=0.0, lambda_distortion=0.0, use_confidence=False)


TERMS = ("l1", "dssim", "rgb", "conf", "color_var", "normal_var", "depth_normal", "distortion")


@dataclass
class LossReport:
    total: float
    terms: dict[str, float]
    coefficients: dict[str, float]
    rgb_map: np.ndarray = field(repr=False, default=None)

    def weighted_sum(self) -> float:
        return float(sum(self.coefficients[k] * self.terms[k] for k in self.coefficients))

    def __getattr__(self, name):
        terms = self.__dict__.get("terms", {})
        if name in terms:
            return terms[name]
        raise AttributeError(name)

    def csv_row(self, iteration: int) -> list:
        return [iteration] + [self.terms[k] for k in TERMS] + [self.total]


def total_loss(outputs: RenderOutputs, target, weights: LossWeights, iteration: int,
               rendered_app=None, cam=None, mask=None) -> LossReport:
    """Assemble every training term for one rendered view.

    ``mask`` (H, W) optionally restricts confidence weighting to foreground pixels.
    """
    target = _as3(target)
    I_hat = outputs.color
    I_app = I_hat if rendered_app is None else rendered_app
    l1_map, dssim_map = _photometric_maps(target, I_hat, I_app)
    rgb_map = (1 - weights.lambda_rgb) * l1_map + weights.lambda_rgb * dssim_map
    rgb = float(rgb_map.mean())
    l1 = float(l1_map.mean())
    dssim = float(dssim_map.mean())
    conf = confidence_loss(rgb_map, outputs.confidence, weights.beta, mask)
    cv = nv = 0.0
    if outputs.retained is not None:
        cvs, nvs, _ = ray_terms(outputs, target)
        cv, nv = float(cvs.mean()), float(nvs.mean())
    dn, dist = geometric_losses(outputs, cam)
    lam_dn, lam_dist = weights.geometric(iteration)
    use_conf = weights.confidence_active(iteration)
    coeffs = {
        "conf": weights.lambda_photometric if use_conf else 0.0,
        "rgb": 0.0 if use_conf else weights.lambda_photometric,
        "color_var": weights.lambda_color_var,
        "normal_var": weights.lambda_normal_var,
        "depth_normal": lam_dn,
        "distortion": lam_dist,
    }
    terms = {"l1": l1, "dssim": dssim, "rgb": rgb, "conf": conf, "color_var": cv,
             "normal_var": nv, "depth_normal": dn, "distortion": dist}
    total = float(sum(coeffs[k] * terms[k] for k in coeffs))
    return LossReport(total, terms, coeffs, rgb_map)


__all__ = [
    "C1", "C2", "C3", "LossReport", "LossWeights", "SsimMaps", "color_variance",
    "color_variance_loss", "confidence_grad", "confidence_loss", "decoupled_ssim_backward",
    "decoupled_ssim_map", "depth_normal_backward", "dssim_decoupled", "geometric_losses",
    "normal_variance", "normal_variance_fast", "normal_variance_loss", "photometric",
    "ray_terms", "ssim_components", "ssim_map", "total_loss",
]

