"""Scene primitives: Gaussians, cameras, rays and image buffers.

Parameters are stored unconstrained (log scales, opacity logits, raw
confidence) and activated on use, so every optimizer step stays valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SH_MAX_DEGREE = 3
SH_COEFFS = (SH_MAX_DEGREE + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (w, x, y, z) quaternions, normalizing first.

    Accepts shape (4,) or (N, 4); returns (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - r * z)
    R[:, 0, 2] = 2 * (x * z + r * y)
    R[:, 1, 0] = 2 * (x * y + r * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - r * x)
    R[:, 2, 0] = 2 * (x * z - r * y)
    R[:, 2, 1] = 2 * (y * z + r * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to dL/dq through normalization and quat_to_rotmat."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    dR = dR.reshape(-1, 3, 3)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    r, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = dR
    dr = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0]
              - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - r * G[:, 1, 2] + z * G[:, 2, 0] + r * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + r * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - r * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - r * G[:, 0, 1] + x * G[:, 0, 2] + r * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dqn = np.stack([dr, dx, dy, dz], axis=1)
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


@dataclass(frozen=True)
class Gaussian:
    """A single primitive; see :class:`GaussianCloud` for the batched form."""

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS, 3)))
    gamma: float = 0.0

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def confidence(self) -> float:
        return float(np.exp(self.gamma))

    @property
    def rotmat(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)


def covariance(g: Gaussian) -> tuple[np.ndarray, np.ndarray]:
    """Return (Sigma, Sigma^-1) built from the same R, S factorization."""
    R = g.rotmat
    s = np.exp(np.asarray(g.log_scale, dtype=np.float64))
    sigma = (R * s**2) @ R.T
    inv = (R * s**-2) @ R.T
    return 0.5 * (sigma + sigma.T), 0.5 * (inv + inv.T)


def normal_axis(log_scale: np.ndarray) -> np.ndarray:
    """Index of the shortest principal axis; ties resolve to the lower index."""
    return np.argmin(np.atleast_2d(log_scale), axis=1)


def gaussian_normal(g: Gaussian, view_dir: np.ndarray) -> np.ndarray:
    """Shortest principal axis of the covariance, flipped to face the viewer."""
    R = g.rotmat
    n = R[:, int(normal_axis(g.log_scale)[0])]
    if np.dot(n, view_dir) > 0:
        n = -n
    return n


@dataclass
class GaussianCloud:
    """Batched primitives stored as structure-of-arrays.

    ``sh`` has shape (N, 16, 3): coefficient-major, RGB last.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    gamma: np.ndarray
    active_sh_degree: int = 0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, SH_COEFFS, 3)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(n)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.quats[i].copy(), self.log_scales[i].copy(),
                        float(self.opacity_logits[i]), self.sh[i].copy(), float(self.gamma[i]))

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, SH_COEFFS, 3)), np.zeros(0))

    @classmethod
    def from_gaussians(cls, gaussians, active_sh_degree: int = SH_MAX_DEGREE) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([np.asarray(g.sh_coeffs).reshape(SH_COEFFS, 3) for g in gaussians]),
            np.array([g.gamma for g in gaussians]),
            active_sh_degree=active_sh_degree,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.sh.copy(), self.gamma.copy(),
                             self.active_sh_degree, self.grad_accum.copy(), self.grad_count.copy())

    def select(self, keep: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(self.means[keep], self.quats[keep], self.log_scales[keep],
                             self.opacity_logits[keep], self.sh[keep], self.gamma[keep],
                             self.active_sh_degree, self.grad_accum[keep], self.grad_count[keep])

    def rotmats(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        return quat_to_rotmat(self.quats)

    def inverse_covariances(self, R: np.ndarray | None = None) -> np.ndarray:
        R = self.rotmats() if R is None else R
        inv_s2 = np.exp(-2.0 * self.log_scales)
        return (R * inv_s2[:, None, :]) @ np.transpose(R, (0, 2, 1))

    def covariances(self, R: np.ndarray | None = None) -> np.ndarray:
        R = self.rotmats() if R is None else R
        s2 = np.exp(2.0 * self.log_scales)
        return (R * s2[:, None, :]) @ np.transpose(R, (0, 2, 1))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def confidences(self) -> np.ndarray:
        return np.exp(self.gamma)

    def renormalize(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``R``/``t`` map world points to camera space (x_c = R x_w + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_id: int = 0
    image_path: str | None = None

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def ray_directions(self) -> np.ndarray:
        """Unit world-space directions through every pixel center, row-major (H*W, 3).

        Computed once per camera; the returned array is read-only.
        """
        cached = self.__dict__.get("_dirs")
        if cached is not None:
            return cached
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack([(u + 0.5 - self.cx) / self.fx,
                      (v + 0.5 - self.cy) / self.fy,
                      np.ones_like(u, dtype=np.float64)], axis=-1).reshape(-1, 3)
        d = d @ self.R  # R^T applied to row vectors
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        d.setflags(write=False)
        object.__setattr__(self, "_dirs", d)
        return d

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, image_id=0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, width / 2, height / 2, width, height, R, -R @ eye, image_id)


def pixel_ray(cam: Camera, px) -> Ray:
    x, y = px
    d = np.array([(x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0])
    return Ray(cam.center, cam.R.T @ d)


@dataclass
class ImageBuffer:
    """Row-major image data of shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) image, got {d.shape}")
        self.data = d

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]
