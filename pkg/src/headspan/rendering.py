"""Differentiable surfel renderer.

``render`` composites surfels front-to-back (global sort by camera-space
center depth) into color / normal / depth / alpha images, keeping a
compositing tape so ``render_backward`` can return analytic gradients
for every surfel parameter. ``reference_render`` is the unoptimized
per-pixel oracle the fast path is tested against.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backend
from .cameras import Camera
from .errors import ContractViolationError, InvalidParameterError
from .geometry import quat_to_rotmat, rotmat_grad_quat
from .sphharm import eval_colors, eval_colors_backward
from .surfels import Surfel, SurfelSet, activate_opacity, activate_scales

Z_NEAR = 1e-6
STOP_T = 1e-7
R_CUT = 3.0


def _kernels():
    if backend.active_backend() == "numba":
        from . import _splat_nb as k
    else:
        from . import _splat_np as k
    return k


@dataclass
class CompositingTape:
    """Per-pixel record of contributing surfels, in composition order."""

    pixel_ptr: np.ndarray      # (H*W + 1,) CSR offsets
    surfel_idx: np.ndarray     # (M,) int32
    alpha: np.ndarray          # (M,) post-clamp alpha values
    weight: np.ndarray         # (M,) blend weights T_i * alpha_i
    camera: Camera = None
    background: np.ndarray = None
    far: float = 0.0
    surfel_count: int = 0
    # cached forward state needed by the backward pass
    _arrays: dict = field(default_factory=dict, repr=False)


@dataclass
class RenderOutput:
    color: np.ndarray    # (H, W, 3) in [0, 1]
    normal: np.ndarray   # (H, W, 3) unit or zero vectors
    depth: np.ndarray    # (H, W) camera-space z
    alpha: np.ndarray    # (H, W) in [0, 1]
    compositing_tape: Optional[CompositingTape] = None


@dataclass
class GradientBuffer:
    """Per-surfel gradient accumulators matching SurfelSet fields."""

    centers: np.ndarray
    orientations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    color_coeffs: np.ndarray
    deltas: Optional["GradientBuffer"] = None

    @classmethod
    def zeros_like(cls, s: SurfelSet) -> "GradientBuffer":
        return cls(
            np.zeros_like(s.centers), np.zeros_like(s.orientations),
            np.zeros_like(s.log_scales), np.zeros_like(s.opacity_logits),
            np.zeros_like(s.color_coeffs),
        )

    def __iadd__(self, other: "GradientBuffer") -> "GradientBuffer":
        self.centers += other.centers
        self.orientations += other.orientations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.color_coeffs += other.color_coeffs
        return self

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.centers, self.orientations, self.log_scales,
                      self.opacity_logits, self.color_coeffs)
        )


def intersect_and_evaluate(surfel: Surfel, ray_origin, ray_dir):
    """Gaussian value in (0, 1] and the ray parameter at the hit, or
    ``None`` on a miss (plane behind the camera, near-parallel ray, or
    beyond the 3-sigma cutoff)."""
    ray_origin = np.asarray(ray_origin, dtype=np.float64)
    ray_dir = np.asarray(ray_dir, dtype=np.float64)
    if not (np.all(np.isfinite(ray_origin)) and np.all(np.isfinite(ray_dir))):
        raise InvalidParameterError("non-finite ray")
    R = quat_to_rotmat(np.asarray(surfel.orientation, dtype=np.float64))
    n = R[:, 2]
    nw = float(n @ ray_dir)
    if abs(nw) < 1e-9:
        return None
    t = float(n @ (np.asarray(surfel.center) - ray_origin)) / nw
    if t < 1e-9:
        return None
    h = ray_origin + t * ray_dir - surfel.center
    s = activate_scales(np.asarray(surfel.log_scale, dtype=np.float64))
    r2 = (h @ R[:, 0] / s[0]) ** 2 + (h @ R[:, 1] / s[1]) ** 2
    if r2 > R_CUT * R_CUT:
        return None
    return float(np.exp(-0.5 * r2)), t


def _prepare(surfels: SurfelSet, camera: Camera):
    q = surfels.orientations
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    R = quat_to_rotmat(qn)
    t1 = np.ascontiguousarray(R[:, :, 0])
    t2 = np.ascontiguousarray(R[:, :, 1])
    nrm = np.ascontiguousarray(R[:, :, 2])
    scales = activate_scales(surfels.log_scales)
    opac = activate_opacity(surfels.opacity_logits)
    origin = camera.origin
    rel = surfels.centers - origin
    dist = np.linalg.norm(rel, axis=-1, keepdims=True)
    dirs = rel / np.maximum(dist, 1e-12)
    colors, sh_cache = eval_colors(surfels.color_coeffs, dirs)
    cam_pts = camera.to_camera(surfels.centers)
    return {
        "t1": t1, "t2": t2, "nrm": nrm, "scales": scales, "opac": opac,
        "colors": colors, "sh_cache": sh_cache, "cam_pts": cam_pts,
        "origin": origin, "dirs": dirs, "dist": dist,
    }


def _bboxes(camera: Camera, cam_pts, radius):
    """Conservative integer pixel bounds of each surfel's 3-sigma support."""
    n = len(cam_pts)
    bbox = np.zeros((n, 4), dtype=np.int32)
    if n == 0:
        return bbox
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    pts = cam_pts[:, None, :] + corners[None, :, :] * radius[:, None, None]
    z = pts[:, :, 2]
    safe = z.min(axis=1) > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * pts[:, :, 0] / z + camera.cx
        py = camera.fy * pts[:, :, 1] / z + camera.cy
    x0 = np.floor(px.min(axis=1)) - 1
    x1 = np.ceil(px.max(axis=1)) + 1
    y0 = np.floor(py.min(axis=1)) - 1
    y1 = np.ceil(py.max(axis=1)) + 1
    # a surfel whose bounding sphere crosses the near plane gets the full
    # image as its support
    x0 = np.where(safe, x0, 0)
    y0 = np.where(safe, y0, 0)
    x1 = np.where(safe, x1, camera.width)
    y1 = np.where(safe, y1, camera.height)
    bbox[:, 0] = np.clip(x0, 0, camera.width)
    bbox[:, 1] = np.clip(x1, 0, camera.width)
    bbox[:, 2] = np.clip(y0, 0, camera.height)
    bbox[:, 3] = np.clip(y1, 0, camera.height)
    return bbox


def render(
    surfels: SurfelSet,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    far: float = 0.0,
    build_tape: bool = True,
) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64)
    H, W = camera.height, camera.width
    if surfels.count == 0:
        tape = CompositingTape(
            pixel_ptr=np.zeros(H * W + 1, dtype=np.int64),
            surfel_idx=np.zeros(0, dtype=np.int32),
            alpha=np.zeros(0), weight=np.zeros(0),
            camera=camera, background=bg, far=far, surfel_count=0,
        ) if build_tape else None
        return RenderOutput(
            color=np.broadcast_to(bg, (H, W, 3)).copy(),
            normal=np.zeros((H, W, 3)),
            depth=np.full((H, W), far, dtype=np.float64),
            alpha=np.zeros((H, W)),
            compositing_tape=tape,
        )
    pre = _prepare(surfels, camera)
    zc = pre["cam_pts"][:, 2]
    radius = R_CUT * pre["scales"].max(axis=1)
    visible = zc > Z_NEAR
    idx = np.nonzero(visible)[0]
    order = idx[np.argsort(zc[idx], kind="stable")].astype(np.int64)
    bbox = _bboxes(camera, pre["cam_pts"], radius)
    areas = (bbox[:, 1] - bbox[:, 0]).astype(np.int64) * (
        bbox[:, 3] - bbox[:, 2])
    cap = int(areas[order].sum()) if build_tape else 1

    k = _kernels()
    Rcw = np.ascontiguousarray(camera.rotation.T)
    o = pre["origin"]
    cacc, nacc, dacc, Wimg, tpx, tidx, talp, twgt = k.composite_forward(
        H, W, camera.fx, camera.fy, camera.cx, camera.cy, Rcw,
        o[0], o[1], o[2],
        surfels.centers, pre["t1"], pre["t2"], pre["nrm"],
        np.ascontiguousarray(pre["scales"][:, 0]),
        np.ascontiguousarray(pre["scales"][:, 1]),
        pre["opac"], pre["colors"], order, bbox,
        STOP_T, build_tape, max(cap, 1),
    )

    alpha = Wimg.reshape(H, W)
    color = cacc.reshape(H, W, 3) + (1.0 - alpha)[..., None] * bg
    nacc_img = nacc.reshape(H, W, 3)
    nlen = np.linalg.norm(nacc_img, axis=-1, keepdims=True)
    covered = alpha > 0
    normal = np.where(
        covered[..., None] & (nlen > 1e-12), nacc_img / np.maximum(nlen, 1e-12), 0.0
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(covered, dacc.reshape(H, W) / np.maximum(Wimg.reshape(H, W), 1e-300), far)

    tape = None
    if build_tape:
        srt = np.argsort(tpx, kind="stable")
        tpx_s = tpx[srt]
        pptr = np.zeros(H * W + 1, dtype=np.int64)
        np.add.at(pptr, tpx_s + 1, 1)
        np.cumsum(pptr, out=pptr)
        tape = CompositingTape(
            pixel_ptr=pptr,
            surfel_idx=tidx[srt],
            alpha=talp[srt],
            weight=twgt[srt],
            camera=camera,
            background=bg,
            far=far,
            surfel_count=surfels.count,
        )
        tape._arrays = {
            "surfels": surfels,
            "pre": pre,
            "nacc": nacc_img,
            "dacc": dacc.reshape(H, W),
            "Wimg": alpha,
            "normal_out": normal,
            "nlen": nlen[..., 0],
        }
    return RenderOutput(color=color, normal=normal, depth=depth, alpha=alpha,
                        compositing_tape=tape)


def render_backward(output_grads: dict, tape: CompositingTape) -> GradientBuffer:
    """Analytic gradients of a scalar loss w.r.t. every surfel parameter.

    ``output_grads`` maps any of 'color', 'normal', 'depth', 'alpha' to
    the upstream gradient image of the matching render output.
    """
    if not isinstance(tape, CompositingTape) or "surfels" not in tape._arrays:
        raise ContractViolationError("tape was not produced by render()")
    surfels: SurfelSet = tape._arrays["surfels"]
    if tape.surfel_count != surfels.count:
        raise ContractViolationError("tape does not match the surfel set")
    camera = tape.camera
    H, W = camera.height, camera.width
    pre = tape._arrays["pre"]
    bg = tape.background

    def grad_of(name, shape):
        g = output_grads.get(name)
        if g is None:
            return np.zeros(shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ContractViolationError(
                f"gradient for {name!r} has shape {g.shape}, expected {shape}")
        return g

    g_color = grad_of("color", (H, W, 3))
    g_normal = grad_of("normal", (H, W, 3))
    g_depth = grad_of("depth", (H, W))
    g_alpha = grad_of("alpha", (H, W))

    Wimg = tape._arrays["Wimg"]
    nacc = tape._arrays["nacc"]
    dacc = tape._arrays["dacc"]
    nlen = tape._arrays["nlen"]
    n_out = tape._arrays["normal_out"]

    gC = g_color
    gW = g_alpha - np.sum(g_color * bg, axis=-1)
    # normal output = nacc / |nacc| wherever alpha > 0
    valid_n = (Wimg > 0) & (nlen > 1e-12)
    gdot = np.sum(g_normal * n_out, axis=-1, keepdims=True)
    gAN = np.where(
        valid_n[..., None],
        (g_normal - n_out * gdot) / np.maximum(nlen[..., None], 1e-12),
        0.0,
    )
    covered = Wimg > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        gAD = np.where(covered, g_depth / np.maximum(Wimg, 1e-300), 0.0)
        gW = gW + np.where(
            covered, -dacc * g_depth / np.maximum(Wimg, 1e-300) ** 2, 0.0)

    k = _kernels()
    Rcw = np.ascontiguousarray(camera.rotation.T)
    o = pre["origin"]
    dcen, dt1, dt2, dnr, dsx, dsy, dop, dcol = k.composite_backward(
        H, W, camera.fx, camera.fy, camera.cx, camera.cy, Rcw,
        o[0], o[1], o[2],
        surfels.centers, pre["t1"], pre["t2"], pre["nrm"],
        np.ascontiguousarray(pre["scales"][:, 0]),
        np.ascontiguousarray(pre["scales"][:, 1]),
        pre["opac"], pre["colors"],
        tape.pixel_ptr, tape.surfel_idx, tape.alpha, tape.weight,
        np.ascontiguousarray(gC.reshape(-1, 3)),
        np.ascontiguousarray(gAN.reshape(-1, 3)),
        np.ascontiguousarray(gAD.ravel()),
        np.ascontiguousarray(gW.ravel()),
    )

    # chain: per-surfel rgb -> SH coefficients and view direction
    dcoeffs, ddirs = eval_colors_backward(pre["sh_cache"], dcol)
    dirs = pre["dirs"]
    dist = pre["dist"]
    dcen = dcen + (ddirs - dirs * np.sum(ddirs * dirs, axis=-1, keepdims=True)
                   ) / np.maximum(dist, 1e-12)

    # chain: world frame columns -> quaternion (incl. normalization)
    dR = np.stack([dt1, dt2, dnr], axis=-1)
    dquat = rotmat_grad_quat(surfels.orientations, dR)

    scales = pre["scales"]
    dlog = np.stack([dsx * scales[:, 0], dsy * scales[:, 1]], axis=-1)
    opac = pre["opac"]
    dlogit = dop * opac * (1.0 - opac)

    return GradientBuffer(
        centers=dcen, orientations=dquat, log_scales=dlog,
        opacity_logits=dlogit, color_coeffs=dcoeffs,
    )


def reference_render(
    surfels: SurfelSet,
    camera: Camera,
    background=(0.0, 0.0, 0.0),
    far: float = 0.0,
) -> RenderOutput:
    """Brute-force oracle: per-pixel loop over all surfels with exact
    sorting. Semantics match ``render``; no tape, no early termination."""
    bg = np.asarray(background, dtype=np.float64)
    H, W = camera.height, camera.width
    color = np.empty((H, W, 3))
    normal = np.zeros((H, W, 3))
    depth = np.full((H, W), far, dtype=np.float64)
    alpha = np.zeros((H, W))
    if surfels.count == 0:
        color[:] = bg
        return RenderOutput(color, normal, depth, alpha, None)
    pre = _prepare(surfels, camera)
    zc = pre["cam_pts"][:, 2]
    visible = zc > Z_NEAR
    idx = np.nonzero(visible)[0]
    order = idx[np.argsort(zc[idx], kind="stable")]
    cen = surfels.centers[order]
    t1 = pre["t1"][order]
    t2 = pre["t2"][order]
    nrm = pre["nrm"][order]
    s = pre["scales"][order]
    op = pre["opac"][order]
    col = pre["colors"][order]
    origin = pre["origin"]
    Rcw = camera.rotation.T
    ox, oy, oz = origin
    pcx = cen[:, 0] - ox
    pcy = cen[:, 1] - oy
    pcz = cen[:, 2] - oz
    # n . (c - o), in the same operation order as the fast kernel so a
    # single-surfel scene reproduces it bit-for-bit
    ndotpc = nrm[:, 0] * pcx + nrm[:, 1] * pcy + nrm[:, 2] * pcz
    for iy in range(H):
        b = (iy + 0.5 - camera.cy) / camera.fy
        for ix in range(W):
            a = (ix + 0.5 - camera.cx) / camera.fx
            L = np.sqrt(a * a + b * b + 1.0)
            wx = (Rcw[0, 0] * a + Rcw[0, 1] * b + Rcw[0, 2]) / L
            wy = (Rcw[1, 0] * a + Rcw[1, 1] * b + Rcw[1, 2]) / L
            wz = (Rcw[2, 0] * a + Rcw[2, 1] * b + Rcw[2, 2]) / L
            nw = nrm[:, 0] * wx + nrm[:, 1] * wy + nrm[:, 2] * wz
            ok = np.abs(nw) >= 1e-9
            t = np.where(ok, ndotpc / np.where(ok, nw, 1.0), -1.0)
            ok &= t >= 1e-9
            hx = ox + t * wx - cen[:, 0]
            hy = oy + t * wy - cen[:, 1]
            hz = oz + t * wz - cen[:, 2]
            u = hx * t1[:, 0] + hy * t1[:, 1] + hz * t1[:, 2]
            v = hx * t2[:, 0] + hy * t2[:, 1] + hz * t2[:, 2]
            ru = u / s[:, 0]
            rv = v / s[:, 1]
            r2 = ru * ru + rv * rv
            ok &= r2 <= R_CUT * R_CUT
            al = np.minimum(op * np.exp(-0.5 * np.where(ok, r2, 0.0)), 0.999)
            ok &= al >= 1e-14
            if not ok.any():
                color[iy, ix] = bg
                continue
            al = np.where(ok, al, 0.0)
            T = np.cumprod(np.concatenate([[1.0], 1.0 - al[:-1]]))
            wgt = T * al
            Wp = wgt.sum()
            color[iy, ix] = wgt @ col + (1.0 - Wp) * bg
            nv = wgt @ nrm
            nl = np.linalg.norm(nv)
            normal[iy, ix] = nv / nl if nl > 1e-12 else 0.0
            depth[iy, ix] = (wgt @ (t / L)) / Wp
            alpha[iy, ix] = Wp
    return RenderOutput(color, normal, depth, alpha, None)
