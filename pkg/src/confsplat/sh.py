"""Real spherical harmonics up to degree 3 (3DGS sign convention)."""

import numpy as np
from numba import njit

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
      -0.4570457994644658, 1.4453057213202769, -0.5900435899266435)


@njit(cache=True, nogil=True)
def sh_basis_into(out, x, y, z, degree):
    """Write the 16 basis values for unit direction (x, y, z); unused bands are zeroed."""
    for k in range(16):
        out[k] = 0.0
    out[0] = C0
    if degree < 1:
        return
    out[1] = -C1 * y
    out[2] = C1 * z
    out[3] = -C1 * x
    if degree < 2:
        return
    xx = x * x
    yy = y * y
    zz = z * z
    out[4] = C2[0] * x * y
    out[5] = C2[1] * y * z
    out[6] = C2[2] * (2.0 * zz - xx - yy)
    out[7] = C2[3] * x * z
    out[8] = C2[4] * (xx - yy)
    if degree < 3:
        return
    out[9] = C3[0] * y * (3.0 * xx - yy)
    out[10] = C3[1] * x * y * z
    out[11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[14] = C3[5] * z * (xx - yy)
    out[15] = C3[6] * x * (xx - 3.0 * yy)


def sh_basis(d, degree: int = 3) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    out = np.zeros(16)
    sh_basis_into(out, d[0], d[1], d[2], degree)
    return out


def sh_eval(coeffs, d, degree: int = 3) -> np.ndarray:
    """RGB radiance for direction ``d``: basis expansion plus 0.5, clamped at 0."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1, 3)
    basis = sh_basis(d, degree)[: coeffs.shape[0]]
    return np.maximum(basis @ coeffs + 0.5, 0.0)


def rgb_to_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0
