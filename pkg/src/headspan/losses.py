"""Training objectives with forward values and analytic gradients.

Every loss returns ``(value, cache)`` and has a matching
``*_backward(cache, upstream=1.0)`` returning gradients w.r.t. its
prediction inputs. Masks are treated as constants.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .errors import ContractViolationError
from .networks import DeformDeltas

REGION_WEIGHTED_LABELS = (2, 3)  # mouth, eyes


@dataclass
class LossWeights:
    rgb_face_region: float = 40.0
    rgb_otherwise: float = 1.0
    ssim: float = 1.0
    perceptual: float = 1.0
    depth: float = 1.25
    normal: float = 1.0
    consistency: float = 1.0
    regulation: float = 0.01

    def __post_init__(self):
        for name in ("rgb_face_region", "rgb_otherwise", "ssim", "perceptual",
                     "depth", "normal", "consistency", "regulation"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in (
            "rgb_face_region", "rgb_otherwise", "ssim", "perceptual",
            "depth", "normal", "consistency", "regulation")}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


# --- weighted photometric L1 -------------------------------------------------

def rgb_loss(pred, target, region_labels, weights: LossWeights):
    """Mean over pixels of region weight x per-pixel L1 (channel mean).

    ``region_labels`` is an integer label map; mouth/eye labels get
    ``weights.rgb_face_region``, everything else ``weights.rgb_otherwise``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolationError("pred/target shapes differ")
    labels = np.asarray(region_labels)
    if labels.shape != pred.shape[:2]:
        raise ContractViolationError("region label map shape mismatch")
    wmap = np.where(np.isin(labels, REGION_WEIGHTED_LABELS),
                    weights.rgb_face_region, weights.rgb_otherwise)
    diff = pred - target
    value = float(np.mean(wmap[..., None] * np.abs(diff)))
    cache = {"diff": diff, "wmap": wmap, "n": diff.size}
    return value, cache


def rgb_loss_backward(cache, upstream: float = 1.0):
    return upstream * cache["wmap"][..., None] * np.sign(cache["diff"]) / cache["n"]


# --- SSIM ---------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2) if sigma > 0 else np.ones(size)
    return k / k.sum()


def _conv_valid(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    n = img.shape[axis] - len(k) + 1
    out = np.zeros(img.shape[:axis] + (n,) + img.shape[axis + 1:])
    sl = [slice(None)] * img.ndim
    for i, w in enumerate(k):
        sl[axis] = slice(i, i + n)
        out += w * img[tuple(sl)]
    return out


def _conv_adjoint(grad: np.ndarray, k: np.ndarray, axis: int,
                  full: int) -> np.ndarray:
    out = np.zeros(grad.shape[:axis] + (full,) + grad.shape[axis + 1:])
    n = grad.shape[axis]
    sl = [slice(None)] * grad.ndim
    for i, w in enumerate(k):
        sl[axis] = slice(i, i + n)
        out[tuple(sl)] += w * grad
    return out


def _window(img_hw: tuple) -> np.ndarray:
    """Gaussian window, shrunk (odd) when the image is smaller than 11."""
    size = min(SSIM_WINDOW, img_hw[0], img_hw[1])
    if size % 2 == 0:
        size -= 1
    size = max(size, 1)
    sigma = SSIM_SIGMA * size / SSIM_WINDOW
    return _gaussian_kernel(size, sigma)


def _blur(img, k):
    return _conv_valid(_conv_valid(img, k, 0), k, 1)


def ssim_loss(pred, target):
    """1 - mean SSIM over the valid window interior (channel mean)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolationError("pred/target shapes differ")
    x = pred if pred.ndim == 3 else pred[..., None]
    y = target if target.ndim == 3 else target[..., None]
    k = _window(x.shape[:2])
    mx = _blur(x, k)
    my = _blur(y, k)
    ex2 = _blur(x * x, k)
    ey2 = _blur(y * y, k)
    exy = _blur(x * y, k)
    vx = ex2 - mx * mx
    vy = ey2 - my * my
    vxy = exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    b1 = mx * mx + my * my + SSIM_C1
    a2 = 2 * vxy + SSIM_C2
    b2 = vx + vy + SSIM_C2
    lmap = a1 / b1
    smap = a2 / b2
    ssim_map = lmap * smap
    value = 1.0 - float(np.mean(ssim_map))
    cache = {"x": x, "y": y, "k": k, "mx": mx, "my": my,
             "a1": a1, "b1": b1, "a2": a2, "b2": b2,
             "lmap": lmap, "smap": smap, "count": ssim_map.size,
             "squeeze": pred.ndim == 2}
    return value, cache


def ssim_loss_backward(cache, upstream: float = 1.0):
    x, y, k = cache["x"], cache["y"], cache["k"]
    mx, my = cache["mx"], cache["my"]
    a1, b1, a2, b2 = cache["a1"], cache["b1"], cache["a2"], cache["b2"]
    lmap, smap = cache["lmap"], cache["smap"]
    g_map = -upstream / cache["count"] * np.ones_like(lmap)
    # map = l * s with l = a1/b1, s = a2/b2
    g_l = g_map * smap
    g_s = g_map * lmap
    g_mx = g_l * (2 * my * b1 - a1 * 2 * mx) / (b1 * b1)
    g_vx = g_s * (-a2 / (b2 * b2))
    g_vxy = g_s * 2.0 / b2
    # vx = E[x^2] - mx^2, vxy = E[xy] - mx*my
    g_mx = g_mx + g_vx * (-2 * mx) + g_vxy * (-my)
    g_ex2 = g_vx
    g_exy = g_vxy

    def adj(g):
        return _conv_adjoint(_conv_adjoint(g, k, 1, x.shape[1]), k, 0,
                             x.shape[0])

    d_x = adj(g_mx) + adj(g_ex2) * 2 * x + adj(g_exy) * y
    if cache["squeeze"]:
        d_x = d_x[..., 0]
    return d_x


# --- multi-scale SSIM (default perceptual term) -------------------------------

def _avg_pool2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    c = img[:h, :w]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def _avg_pool2_adjoint(grad, shape):
    out = np.zeros(shape)
    g = 0.25 * grad
    h, w = grad.shape[0] * 2, grad.shape[1] * 2
    out[0:h:2, 0:w:2] += g
    out[1:h:2, 0:w:2] += g
    out[0:h:2, 1:w:2] += g
    out[1:h:2, 1:w:2] += g
    return out


class MultiScaleSSIM:
    """Pluggable perceptual term: SSIM averaged over dyadic scales."""

    def __init__(self, scales: int = 3):
        self.scales = scales

    def __call__(self, pred, target):
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        value = 0.0
        caches = []
        shapes = []
        p, t = pred, target
        for s in range(self.scales):
            v, c = ssim_loss(p, t)
            value += v
            caches.append(c)
            shapes.append(p.shape)
            if s + 1 < self.scales:
                p = _avg_pool2(p)
                t = _avg_pool2(t)
        return value / self.scales, {"caches": caches, "shapes": shapes}

    def backward(self, cache, upstream: float = 1.0):
        caches, shapes = cache["caches"], cache["shapes"]
        up = upstream / self.scales
        grad = None
        for s in range(len(caches) - 1, -1, -1):
            g = ssim_loss_backward(caches[s], up)
            if grad is not None:
                grad = _avg_pool2_adjoint(grad, shapes[s])
                grad = grad + g
            else:
                grad = g
        return grad


# --- geometry supervision ------------------------------------------------------

def depth_loss(pred_depth, mesh_depth, face_region_mask):
    """Masked mean L1 between rendered and mesh-rasterized depth."""
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    mesh_depth = np.asarray(mesh_depth, dtype=np.float64)
    mask = np.asarray(face_region_mask, dtype=bool)
    if pred_depth.shape != mesh_depth.shape or mask.shape != pred_depth.shape:
        raise ContractViolationError("depth/mask shapes differ")
    n = int(mask.sum())
    if n == 0:
        warnings.warn("depth loss mask is empty; returning 0", RuntimeWarning)
        return 0.0, {"mask": mask, "n": 0, "diff": np.zeros_like(pred_depth)}
    diff = np.where(mask, pred_depth - mesh_depth, 0.0)
    value = float(np.sum(np.abs(diff)) / n)
    return value, {"mask": mask, "n": n, "diff": diff}


def depth_loss_backward(cache, upstream: float = 1.0):
    if cache["n"] == 0:
        return np.zeros_like(cache["diff"])
    return upstream * np.sign(cache["diff"]) / cache["n"]


NORMAL_ALIGN_WEIGHT = 0.04
NORMAL_SMOOTH_WEIGHT = 0.005


def normal_loss(rendered_normal, prior_normal, foreground_mask=None):
    """0.04 * mean(1 - dot) + 0.005 * mean |forward-difference gradient|,
    means over foreground pixels."""
    n = np.asarray(rendered_normal, dtype=np.float64)
    p = np.asarray(prior_normal, dtype=np.float64)
    if n.shape != p.shape:
        raise ContractViolationError("normal map shapes differ")
    if foreground_mask is None:
        foreground_mask = np.ones(n.shape[:2], dtype=bool)
    fg = np.asarray(foreground_mask, dtype=bool)
    cnt = int(fg.sum())
    align = float(np.sum(np.where(fg, 1.0 - np.sum(n * p, axis=-1), 0.0))
                  / max(cnt, 1))
    dx = n[:, 1:] - n[:, :-1]
    dy = n[1:] - n[:-1]
    mx = fg[:, 1:] & fg[:, :-1]
    my = fg[1:] & fg[:-1]
    total = int(mx.sum() + my.sum()) * n.shape[-1]
    smooth = 0.0
    if total:
        smooth = float((np.sum(np.abs(dx[mx])) + np.sum(np.abs(dy[my])))
                       / total)
    value = NORMAL_ALIGN_WEIGHT * align + NORMAL_SMOOTH_WEIGHT * smooth
    cache = {"n": n, "p": p, "fg": fg, "cnt": cnt, "dx": dx, "dy": dy,
             "mx": mx, "my": my, "total": total}
    return value, cache


def normal_loss_backward(cache, upstream: float = 1.0):
    n, p, fg = cache["n"], cache["p"], cache["fg"]
    grad = np.zeros_like(n)
    if cache["cnt"]:
        grad -= (NORMAL_ALIGN_WEIGHT * upstream / cache["cnt"]) * (
            fg[..., None] * p)
    if cache["total"]:
        c = NORMAL_SMOOTH_WEIGHT * upstream / cache["total"]
        sx = c * np.sign(cache["dx"]) * cache["mx"][..., None]
        sy = c * np.sign(cache["dy"]) * cache["my"][..., None]
        grad[:, 1:] += sx
        grad[:, :-1] -= sx
        grad[1:] += sy
        grad[:-1] -= sy
    return grad


def consistency_loss(rendered_normal, rendered_depth, camera: Camera,
                     foreground_mask=None):
    """1 - dot between the rendered normal and the normal implied by the
    rendered depth (cross product of back-projected pixel differences),
    averaged over foreground pixels whose right/down neighbors are also
    foreground."""
    n_world = np.asarray(rendered_normal, dtype=np.float64)
    d = np.asarray(rendered_depth, dtype=np.float64)
    H, W = d.shape
    if foreground_mask is None:
        foreground_mask = np.ones((H, W), dtype=bool)
    fg = np.asarray(foreground_mask, dtype=bool)
    K1 = camera.pixel_dirs_cam()  # (H, W, 3): (x/z, y/z, 1) per pixel
    V = d[..., None] * K1
    # differences toward the right/down neighbors
    a = V[:-1, 1:] - V[:-1, :-1]
    b = V[1:, :-1] - V[:-1, :-1]
    c = np.cross(b, a)  # faces the camera (-z) for a fronto-parallel plane
    clen = np.linalg.norm(c, axis=-1, keepdims=True)
    valid = (fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1]
             & (clen[..., 0] > 1e-12))
    n_est = np.where(valid[..., None], c / np.maximum(clen, 1e-300), 0.0)
    n_cam = n_world @ camera.rotation.T
    dot = np.sum(n_cam[:-1, :-1] * n_est, axis=-1)
    cnt = int(valid.sum())
    value = float(np.sum(np.where(valid, 1.0 - dot, 0.0)) / max(cnt, 1))
    cache = {"camera": camera, "K1": K1, "a": a, "b": b, "c": c,
             "clen": clen, "valid": valid, "n_est": n_est, "n_cam": n_cam,
             "cnt": cnt, "shape": d.shape}
    return value, cache


def consistency_loss_backward(cache, upstream: float = 1.0):
    """Returns (d_rendered_normal, d_rendered_depth)."""
    H, W = cache["shape"]
    cnt = max(cache["cnt"], 1)
    valid = cache["valid"]
    n_est = cache["n_est"]
    n_cam = cache["n_cam"]
    camera: Camera = cache["camera"]

    g = -upstream / cnt
    d_ncam = np.zeros_like(n_cam)
    d_ncam[:-1, :-1] += np.where(valid[..., None], g * n_est, 0.0)
    d_normal = d_ncam @ camera.rotation  # chain through R^T as row vectors

    d_nest = np.where(valid[..., None], g * n_cam[:-1, :-1], 0.0)
    c = cache["c"]
    clen = np.maximum(cache["clen"], 1e-300)
    # n_est = c/|c| : project out the radial part
    d_c = (d_nest - n_est * np.sum(d_nest * n_est, axis=-1, keepdims=True)) / clen
    d_c = np.where(valid[..., None], d_c, 0.0)
    a, b = cache["a"], cache["b"]
    # c = b x a
    d_a = np.cross(d_c, b)
    d_b = np.cross(a, d_c)
    dV = np.zeros((H, W, 3))
    dV[:-1, 1:] += d_a
    dV[:-1, :-1] -= d_a
    dV[1:, :-1] += d_b
    dV[:-1, :-1] -= d_b
    d_depth = np.sum(dV * cache["K1"], axis=-1)
    return d_normal, d_depth


# --- deformation regularization ------------------------------------------------

def deform_regularization(deltas: DeformDeltas):
    """Mean L1 norm over every attribute-delta scalar."""
    flat = deltas.flat_concat()
    n = flat.size
    value = float(np.mean(np.abs(flat))) if n else 0.0
    return value, {"deltas": deltas, "n": n}


def deform_regularization_backward(cache, upstream: float = 1.0):
    d: DeformDeltas = cache["deltas"]
    n = max(cache["n"], 1)
    c = upstream / n
    return DeformDeltas(
        centers=c * np.sign(d.centers),
        orientations=c * np.sign(d.orientations),
        log_scales=c * np.sign(d.log_scales),
        opacity_logits=c * np.sign(d.opacity_logits),
        color_coeffs=c * np.sign(d.color_coeffs),
    )


# --- total ----------------------------------------------------------------------

TERM_NAMES = ("rgb", "ssim", "perceptual", "depth", "normal", "consistency",
              "regulation")


def total_loss(terms: dict, weights: LossWeights, phase: str = "formal"):
    """Weighted sum of the term values; the warm-up phase excludes the
    regulation term. The rgb term's region weighting is applied per
    pixel inside rgb_loss, so its coefficient here is 1.

    Returns (total, report) where report maps term -> (raw, weighted).
    """
    if phase not in ("warmup", "formal"):
        raise ValueError("phase must be 'warmup' or 'formal'")
    coeff = {
        "rgb": 1.0,
        "ssim": weights.ssim,
        "perceptual": weights.perceptual,
        "depth": weights.depth,
        "normal": weights.normal,
        "consistency": weights.consistency,
        "regulation": 0.0 if phase == "warmup" else weights.regulation,
    }
    total = 0.0
    report = {}
    for name in TERM_NAMES:
        raw = float(terms.get(name, 0.0))
        weighted = coeff[name] * raw
        report[name] = {"raw": raw, "weighted": weighted}
        total += weighted
    return total, report
