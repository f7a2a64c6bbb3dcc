"""Per-image appearance compensation.

The CNN variant predicts a per-pixel log-space correction M from a detached
32x-downsampled render, a per-image latent and a (u, v, r) positional
encoding; the corrected image is I_hat * exp(M). The final layer starts at
zero, so the module is the identity until it has been trained. Two global
affine baselines (PGSR-style exposure and H3DGS-style 3x3 colour map) share
the same forward/backward interface.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LATENT_DIM = 64
TILE = 32
N_STAGES = 5
LEAK = 0.01
INPUT_CHANNELS = 3 + LATENT_DIM + 3


def downsample32_reflect(img: np.ndarray) -> np.ndarray:
    """Reflection-pad (H, W, C) up to multiples of 32 and box-average 32x32 tiles."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    ph = -H % TILE
    pw = -W % TILE
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    h, w = img.shape[0] // TILE, img.shape[1] // TILE
    return img.reshape(h, TILE, w, TILE, -1).mean(axis=(1, 3))


def positional_encoding(width: int, height: int) -> np.ndarray:
    """(height, width, 3) buffer of u, v in [-1, 1] over pixel centers and r = sqrt(u^2 + v^2)."""
    u = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    v = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.sqrt(uu**2 + vv**2)], axis=-1)


def _conv3x3(x, W, b):
    """Zero-padded 3x3 convolution of (C, h, w); returns output and im2col patches."""
    C, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, h, w, 3, 3)
    cols = cols.transpose(0, 3, 4, 1, 2).reshape(C * 9, h * w)
    out = W.reshape(W.shape[0], -1) @ cols + b[:, None]
    return out.reshape(W.shape[0], h, w), cols


def _conv3x3_backward(g, cols, W, in_shape):
    C, h, w = in_shape
    g2 = g.reshape(g.shape[0], -1)
    dW = (g2 @ cols.T).reshape(W.shape)
    db = g2.sum(axis=1)
    dcols = (W.reshape(W.shape[0], -1).T @ g2).reshape(C, 3, 3, h, w)
    dxp = np.zeros((C, h + 2, w + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w] += dcols[:, ky, kx]
    return dxp[:, 1:-1, 1:-1], dW, db


def _up2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up2_backward(g):
    C, h, w = g.shape
    return g.reshape(C, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


class AppearanceNet:
    """Conv stack: 70 -> widths..., x2 nearest upsampling after each of the first 5 convs."""

    def __init__(self, widths=(64, 32, 16), seed: int = 0):
        rng = np.random.default_rng(seed)
        chans = [INPUT_CHANNELS, *widths]
        while len(chans) < N_STAGES + 1:
            chans.append(widths[-1])
        chans.append(3)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            last = i == len(chans) - 2
            if last:
                W = np.zeros((cout, cin, 3, 3))
            else:
                W = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
            self.weights.append(W)
            self.biases.append(np.zeros(cout))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x):
        """x: (70, h, w) -> (3, 32h, 32w); returns output and activation cache."""
        cache = []
        for i in range(self.n_layers):
            out, cols = _conv3x3(x, self.weights[i], self.biases[i])
            cache.append((x.shape, cols, out))
            if i == self.n_layers - 1:
                return out, cache
            x = np.where(out > 0, out, LEAK * out)
            if i < N_STAGES:
                x = _up2(x)
        return x, cache

    def backward(self, g, cache):
        """Returns (d_input, [dW], [db])."""
        dWs = [None] * self.n_layers
        dbs = [None] * self.n_layers
        for i in reversed(range(self.n_layers)):
            in_shape, cols, out = cache[i]
            if i < self.n_layers - 1:
                if i < N_STAGES:
                    g = _up2_backward(g)
                g = g * np.where(out > 0, 1.0, LEAK)
            g, dWs[i], dbs[i] = _conv3x3_backward(g, cols, self.weights[i], in_shape)
            if not (np.isfinite(dWs[i]).all() and np.isfinite(dbs[i]).all()):
                raise FloatingPointError(f"non-finite appearance gradient in layer {i}")
        return g, dWs, dbs


class AppearanceModel:
    """Per-image latents plus the shared corrective CNN."""

    kind = "cnn"

    def __init__(self, n_images: int, widths=(64, 32, 16), seed: int = 0):
        rng = np.random.default_rng(seed + 1)
        self.latents = rng.normal(0.0, 1.0, (n_images, LATENT_DIM))
        self.net = AppearanceNet(widths, seed)

    def network_input(self, image: np.ndarray, image_id: int, low=None) -> np.ndarray:
        """Stack the detached low-res render, the latent and the encoding.

        ``low`` overrides the downsampled render (it is treated as a constant).
        """
        if low is None:
            low = downsample32_reflect(image)  # detached: no gradient flows back through it
        h, w = low.shape[:2]
        rho = np.broadcast_to(self.latents[image_id], (h, w, LATENT_DIM))
        pe = positional_encoding(w, h)
        return np.concatenate([low, rho, pe], axis=-1).transpose(2, 0, 1)

    def correction(self, image: np.ndarray, image_id: int, low=None):
        H, W = image.shape[:2]
        x = self.network_input(image, image_id, low)
        out, cache = self.net.forward(x)
        return out[:, :H, :W].transpose(1, 2, 0), (cache, out.shape)

    def forward(self, image: np.ndarray, image_id: int, low=None):
        M, (cache, full_shape) = self.correction(image, image_id, low)
        scale = np.exp(M)
        return image * scale, (image, image_id, scale, cache, full_shape)

    def backward(self, ctx, d_out):
        image, image_id, scale, cache, full_shape = ctx
        H, W = image.shape[:2]
        d_image = d_out * scale
        dM = d_out * image * scale
        g = np.zeros(full_shape)
        g[:, :H, :W] = dM.transpose(2, 0, 1)
        d_in, dWs, dbs = self.net.backward(g, cache)
        d_lat = np.zeros_like(self.latents)
        d_lat[image_id] = d_in[3:3 + LATENT_DIM].sum(axis=(1, 2))
        grads = {"latents": d_lat}
        for i in range(self.net.n_layers):
            grads[f"w{i}"] = dWs[i]
            grads[f"b{i}"] = dbs[i]
        return d_image, grads

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"latents": self.latents}
        for i in range(self.net.n_layers):
            params[f"w{i}"] = self.net.weights[i]
            params[f"b{i}"] = self.net.biases[i]
        return params


class AffineAppearance:
    """Global per-image colour maps: 'pgsr' exp(a) I + b, 'h3dgs' A I + b."""

    def __init__(self, n_images: int, variant: str = "pgsr"):
        if variant not in ("pgsr", "h3dgs"):
            raise ValueError(f"unknown affine variant {variant!r}")
        self.kind = variant
        if variant == "pgsr":
            self.a = np.zeros(n_images)
            self.b = np.zeros(n_images)
        else:
            self.a = np.tile(np.eye(3), (n_images, 1, 1))
            self.b = np.zeros((n_images, 3))

    def forward(self, image: np.ndarray, image_id: int):
        if self.kind == "pgsr":
            out = np.exp(self.a[image_id]) * image + self.b[image_id]
        else:
            out = image @ self.a[image_id].T + self.b[image_id]
        return out, (image, image_id)

    def backward(self, ctx, d_out):
        image, i = ctx
        da = np.zeros_like(self.a)
        db = np.zeros_like(self.b)
        if self.kind == "pgsr":
            s = np.exp(self.a[i])
            da[i] = s * np.sum(d_out * image)
            db[i] = d_out.sum()
            d_image = s * d_out
        else:
            da[i] = np.einsum("hwi,hwj->ij", d_out, image)
            db[i] = d_out.sum(axis=(0, 1))
            d_image = d_out @ self.a[i]
        return d_image, {"a": da, "b": db}

    def parameters(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b}


def apply_appearance(image, image_id: int, model: AppearanceModel) -> np.ndarray:
    return model.forward(image, image_id)[0]


def apply_affine(image, params, variant: str) -> np.ndarray:
    """Apply explicit affine parameters: (a, b) scalars for pgsr, (A, b) for h3dgs."""
    a, b = params
    image = np.asarray(image, dtype=np.float64)
    if variant == "pgsr":
        return np.exp(a) * image + b
    if variant == "h3dgs":
        return image @ np.asarray(a).T + np.asarray(b)
    raise ValueError(f"unknown affine variant {variant!r}")


def make_appearance(kind: str, n_images: int, seed: int = 0):
    if kind == "none":
        return None
    if kind == "cnn":
        return AppearanceModel(n_images, seed=seed)
    return AffineAppearance(n_images, kind)


def appearance_from_parameters(kind: str, params: dict):
    """Rebuild a model from a parameter dict such as a loaded sidecar."""
    if kind == "cnn":
        n_layers = sum(1 for k in params if k.startswith("w"))
        widths = tuple(params[f"w{i}"].shape[0] for i in range(min(3, n_layers - 1)))
        model = AppearanceModel(params["latents"].shape[0], widths)
        model.latents = params["latents"].copy()
        model.net.weights = [params[f"w{i}"].copy() for i in range(n_layers)]
        model.net.biases = [params[f"b{i}"].copy() for i in range(n_layers)]
        return model
    model = AffineAppearance(params["a"].shape[0], kind)
    model.a = params["a"].copy()
    model.b = params["b"].copy()
    return model
