"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_backends.py [--repeat 5]

Each hot kernel is timed on a representative desk-scale workload; the
numba lane is warmed once so JIT compilation does not pollute timings.
"""

import argparse
import time

import numpy as np


def timeit(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def splat_case(size=64, n=2000):
    from headspan import _splat_nb, _splat_np
    from headspan.cameras import orbit_camera
    from headspan.rendering import _bboxes, _prepare
    from headspan.surfels import SurfelSet

    rng = np.random.default_rng(0)
    centers = rng.normal(0, 0.4, (n, 3))
    q = rng.normal(0, 1, (n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    s = SurfelSet(centers, q, np.log(rng.uniform(0.02, 0.08, (n, 2))),
                  rng.normal(0, 1, n), rng.normal(0, 0.2, (n, 4, 3)))
    cam = orbit_camera((0, 0, 0), 15, 5, 3.0, size, size)
    pre = _prepare(s, cam)
    zc = pre["cam_pts"][:, 2]
    idx = np.nonzero(zc > 1e-6)[0]
    order = idx[np.argsort(zc[idx], kind="stable")].astype(np.int64)
    bbox = _bboxes(cam, pre["cam_pts"], 3.0 * pre["scales"].max(axis=1))
    cap = int(((bbox[:, 1] - bbox[:, 0])
               * (bbox[:, 3] - bbox[:, 2]))[order].sum() or 1)
    o = pre["origin"]
    args = (size, size, cam.fx, cam.fy, cam.cx, cam.cy,
            np.ascontiguousarray(cam.rotation.T), o[0], o[1], o[2],
            s.centers, pre["t1"], pre["t2"], pre["nrm"],
            np.ascontiguousarray(pre["scales"][:, 0]),
            np.ascontiguousarray(pre["scales"][:, 1]),
            pre["opac"], pre["colors"], order, bbox, 1e-7, True, cap)

    out = _splat_nb.composite_forward(*args)
    H = W = size
    tpx, tidx, talp, twgt = out[4:]
    srt = np.argsort(tpx, kind="stable")
    pptr = np.zeros(H * W + 1, dtype=np.int64)
    np.add.at(pptr, tpx[srt] + 1, 1)
    np.cumsum(pptr, out=pptr)
    rng2 = np.random.default_rng(1)
    grads = (rng2.normal(0, 1, (H * W, 3)), rng2.normal(0, 1, (H * W, 3)),
             rng2.normal(0, 1, H * W), rng2.normal(0, 1, H * W))
    bargs = args[:18] + (pptr, tidx[srt], talp[srt], twgt[srt]) + grads
    return [
        ("splat forward 64x64 x 2k surfels",
         lambda: _splat_nb.composite_forward(*args),
         lambda: _splat_np.composite_forward(*args)),
        ("splat backward 64x64 x 2k surfels",
         lambda: _splat_nb.composite_backward(*bargs),
         lambda: _splat_np.composite_backward(*bargs)),
    ]


def hash_case(points=4000):
    from headspan import _hashenc_nb, _hashenc_np
    from headspan.encoding import HashGrid, HashGridConfig

    cfg = HashGridConfig(levels=8, table_size=2 ** 14, features_per_entry=4,
                         coarsest_resolution=4, finest_resolution=128)
    g = HashGrid.random_init(cfg, np.random.default_rng(2), scale=1e-2)
    pos = np.random.default_rng(3).uniform(0, 1, (points, 3))
    up = np.random.default_rng(4).normal(0, 1, (points, cfg.output_dim))

    def fwd(mod):
        out = np.zeros((points, cfg.output_dim))
        mod.encode_forward(g.tables, g._res, g._dense, pos, out)

    def bwd(mod):
        dt = np.zeros_like(g.tables)
        dp = np.zeros_like(pos)
        mod.encode_backward(g.tables, g._res, g._dense, pos, up, dt, dp)

    return [
        (f"hash encode fwd {points} pts x 8 levels",
         lambda: fwd(_hashenc_nb), lambda: fwd(_hashenc_np)),
        (f"hash encode bwd {points} pts x 8 levels",
         lambda: bwd(_hashenc_nb), lambda: bwd(_hashenc_np)),
    ]


def bvh_case(points=4000):
    from headspan import _bvh_nb, _bvh_np
    from headspan.template import build_procedural_template
    from headspan.warping import NearestTriangleIndex

    mesh = build_procedural_template(3).mean_mesh()
    idx = NearestTriangleIndex(mesh)
    pts = np.ascontiguousarray(
        np.random.default_rng(5).normal(0, 0.7, (points, 3)))
    args = (idx.node_min, idx.node_max, idx.left, idx.right, idx.start,
            idx.count, idx.tri_order, idx._v0, idx._v1, idx._v2, pts)
    return [(f"nearest triangle {points} pts vs {mesh.num_faces} tris",
             lambda: _bvh_nb.query_nearest(*args),
             lambda: _bvh_np.query_nearest(*args))]


def meshrast_case(size=128):
    from headspan import _meshrast_nb, _meshrast_np
    from headspan.cameras import orbit_camera
    from headspan.template import build_procedural_template

    mesh = build_procedural_template(3).mean_mesh()
    cam = orbit_camera((0, 0, 0), 20, 5, 2.8, size, size)
    cam_pts = cam.to_camera(mesh.vertices)
    z = np.ascontiguousarray(cam_pts[:, 2])
    px = np.ascontiguousarray(cam.fx * cam_pts[:, 0] / z + cam.cx)
    py = np.ascontiguousarray(cam.fy * cam_pts[:, 1] / z + cam.cy)

    def run(mod):
        zbuf = np.full((size, size), np.inf)
        fid = np.full((size, size), -1, np.int32)
        mod.rasterize(px, py, z, mesh.triangles, size, size, zbuf, fid)

    return [(f"mesh z-buffer {mesh.num_faces} tris at {size}x{size}",
             lambda: run(_meshrast_nb), lambda: run(_meshrast_np))]


def tsdf_case(res=96):
    from headspan import _tsdf_nb, _tsdf_np
    from headspan.cameras import orbit_camera

    cam = orbit_camera((0, 0, 0), 30, 10, 2.5, 128, 128)
    rng = np.random.default_rng(6)
    depth = rng.uniform(1.5, 3.0, (128, 128))
    alpha = (rng.uniform(0, 1, (128, 128)) > 0.3).astype(np.float64)
    R = np.ascontiguousarray(cam.rotation)
    t = np.ascontiguousarray(cam.translation)

    def run(mod):
        values = np.zeros((res, res, res))
        weights = np.zeros((res, res, res))
        mod.integrate(values, weights, depth, alpha, cam.fx, cam.fy,
                      cam.cx, cam.cy, 128, 128, R, t, -1.2, -1.2, -1.2,
                      2.4 / res, 3 * 2.4 / res)

    return [(f"tsdf integrate {res}^3 grid, one view",
             lambda: run(_tsdf_nb), lambda: run(_tsdf_np))]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    cases = (splat_case() + hash_case() + bvh_case() + meshrast_case()
             + tsdf_case())
    print(f"{'case':45s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    print("-" * 78)
    for name, nb, npf in cases:
        nb()  # warm the JIT
        t_nb = timeit(nb, args.repeat)
        t_np = timeit(npf, max(1, args.repeat // 2))
        print(f"{name:45s} {t_nb * 1e3:9.2f}ms {t_np * 1e3:9.2f}ms "
              f"{t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
