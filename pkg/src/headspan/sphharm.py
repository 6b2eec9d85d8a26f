"""Real spherical harmonics up to degree 3, with direction derivatives.

Surfel color is view-dependent: rgb = clip(coeffs . basis(dir) + 0.5, 0, 1)
where dir is the unit vector from the camera center to the surfel center.
"""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values, shape (..., (degree+1)^2); ``dirs`` must be unit."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full(x.shape, C0)]
    if degree >= 1:
        cols += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d(basis_k)/d(dir), shape (..., (degree+1)^2, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)

    def v(a, b, c):
        return np.stack([a + zero, b + zero, c + zero], axis=-1)

    rows = [v(zero, zero, zero)]
    if degree >= 1:
        rows += [v(zero, -C1, zero), v(zero, zero, C1), v(-C1, zero, zero)]
    if degree >= 2:
        rows += [
            v(C2[0] * y, C2[0] * x, zero),
            v(zero, C2[1] * z, C2[1] * y),
            v(-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            v(C2[3] * z, zero, C2[3] * x),
            v(2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            v(6 * C3[0] * x * y, 3 * C3[0] * (xx - yy), zero),
            v(C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            v(-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy),
              8 * C3[2] * y * z),
            v(-6 * C3[3] * x * z, -6 * C3[3] * y * z,
              C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            v(C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y,
              8 * C3[4] * x * z),
            v(2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            v(3 * C3[6] * (xx - yy), -6 * C3[6] * x * y, zero),
        ]
    return np.stack(rows, axis=-2)


def eval_colors(coeffs: np.ndarray, dirs: np.ndarray):
    """rgb in [0, 1] plus a cache for the backward pass.

    coeffs: (N, K, 3); dirs: (N, 3) unit. Returns (colors (N, 3), cache).
    """
    k = coeffs.shape[1]
    degree = int(np.sqrt(k)) - 1
    basis = sh_basis(degree, dirs)  # (N, K)
    raw = np.einsum("nk,nkc->nc", basis, coeffs) + 0.5
    colors = np.clip(raw, 0.0, 1.0)
    inside = (raw > 0.0) & (raw < 1.0)
    return colors, (degree, basis, dirs, coeffs, inside)


def eval_colors_backward(cache, d_colors: np.ndarray):
    """Gradients of eval_colors: (d_coeffs (N, K, 3), d_dirs (N, 3))."""
    degree, basis, dirs, coeffs, inside = cache
    d_raw = np.where(inside, d_colors, 0.0)
    d_coeffs = basis[:, :, None] * d_raw[:, None, :]
    dbasis = sh_basis_grad(degree, dirs)  # (N, K, 3)
    # d_raw[n, c] * coeffs[n, k, c] * dbasis[n, k, i]
    d_dirs = np.einsum("nc,nkc,nki->ni", d_raw, coeffs, dbasis)
    return d_coeffs, d_dirs
