"""Quaternion and rigid-transform helpers.

Quaternions are scalar-first ``(w, x, y, z)``. Batched functions accept
``(..., 4)`` arrays and operate on the last axis.
"""

import numpy as np

from .errors import InvalidParameterError


def normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit vectors along the last axis; zero vectors stay zero."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InvalidParameterError("cannot normalize a zero quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices ``(..., 3, 3)`` from unit quaternions ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R(q/|q|) back to the raw quaternion.

    ``q``: (..., 4) not necessarily unit. ``dR``: (..., 3, 3) upstream
    gradient. Returns (..., 4). Includes the normalization Jacobian, so
    callers may store non-unit quaternions between renormalizations.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / norm
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack(
            [np.stack(r, axis=-1) for r in rows], axis=-2
        )

    dRdw = 2 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRdx = 2 * mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = 2 * mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRdz = 2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    g_unit = np.stack(
        [
            np.sum(dR * dRdw, axis=(-2, -1)),
            np.sum(dR * dRdx, axis=(-2, -1)),
            np.sum(dR * dRdy, axis=(-2, -1)),
            np.sum(dR * dRdz, axis=(-2, -1)),
        ],
        axis=-1,
    )
    # chain through u = q/|q|:  J = (I - u u^T)/|q|
    proj = g_unit - u * np.sum(g_unit * u, axis=-1, keepdims=True)
    return proj / norm


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    v = aw * bv + bw * av + np.cross(av, bv)
    return np.concatenate([w, v], axis=-1)


def quat_from_rotmat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion from a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    Rb = R[None] if single else R.reshape(-1, 3, 3)
    out = np.empty((Rb.shape[0], 4), dtype=np.float64)
    for i, M in enumerate(Rb):
        tr = M[0, 0] + M[1, 1] + M[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            out[i] = (0.25 * s, (M[2, 1] - M[1, 2]) / s,
                      (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s)
        elif M[0, 0] >= M[1, 1] and M[0, 0] >= M[2, 2]:
            s = np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2]) * 2
            out[i] = ((M[2, 1] - M[1, 2]) / s, 0.25 * s,
                      (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s)
        elif M[1, 1] >= M[2, 2]:
            s = np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2]) * 2
            out[i] = ((M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s,
                      0.25 * s, (M[1, 2] + M[2, 1]) / s)
        else:
            s = np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1]) * 2
            out[i] = ((M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s,
                      (M[1, 2] + M[2, 1]) / s, 0.25 * s)
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    if single:
        return out[0]
    return out.reshape(R.shape[:-2] + (4,))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = normalize(np.asarray(axis, dtype=np.float64))
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def is_rigid(T: np.ndarray, tol: float = 1e-6) -> bool:
    """True when the upper 3x3 block is orthonormal and the last row is
    (0, 0, 0, 1) within ``tol``."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
        return False
    return bool(np.max(np.abs(T[3] - np.array([0, 0, 0, 1.0]))) <= tol)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rigid transform for a camera at ``eye`` looking at
    ``target``; camera axes are x-right, y-down, z-forward."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = normalize(target - eye)
    upv = np.asarray(up, dtype=np.float64)
    if abs(np.dot(upv, fwd[0] if fwd.ndim > 1 else fwd)) > 0.999:
        upv = np.array([1.0, 0.0, 0.0])
    right = normalize(np.cross(fwd, upv))
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit directions (deterministic)."""
    if n < 1:
        raise InvalidParameterError("need n >= 1 directions")
    i = np.arange(n, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=-1)
