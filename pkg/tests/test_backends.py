"""Numba-vs-numpy lane parity for every hot kernel, plus an end-to-end
subprocess run on the numpy lane."""

import os
import subprocess
import sys

import numpy as np

from conftest import random_surfels
from headspan.cameras import orbit_camera


def _splat_inputs(seed=0, size=24, n=16):
    from headspan.rendering import _bboxes, _prepare

    s = random_surfels(n, seed=seed)
    cam = orbit_camera((0, 0, 0), 18, -7, 3.0, size, size)
    pre = _prepare(s, cam)
    zc = pre["cam_pts"][:, 2]
    idx = np.nonzero(zc > 1e-6)[0]
    order = idx[np.argsort(zc[idx], kind="stable")].astype(np.int64)
    radius = 3.0 * pre["scales"].max(axis=1)
    bbox = _bboxes(cam, pre["cam_pts"], radius)
    o = pre["origin"]
    Rcw = np.ascontiguousarray(cam.rotation.T)
    args = (size, size, cam.fx, cam.fy, cam.cx, cam.cy, Rcw,
            o[0], o[1], o[2], s.centers, pre["t1"], pre["t2"], pre["nrm"],
            np.ascontiguousarray(pre["scales"][:, 0]),
            np.ascontiguousarray(pre["scales"][:, 1]),
            pre["opac"], pre["colors"], order, bbox, 1e-7, True,
            int(((bbox[:, 1] - bbox[:, 0]) * (bbox[:, 3] - bbox[:, 2]))
                [order].sum() or 1))
    return args


class TestSplatParity:
    def test_forward(self):
        from headspan import _splat_nb, _splat_np

        args = _splat_inputs()
        a = _splat_nb.composite_forward(*args)
        b = _splat_np.composite_forward(*args)
        for x, y, name in zip(a[:4], b[:4],
                              ("color", "normal", "depth", "alpha")):
            assert np.max(np.abs(x - y)) < 1e-12, name
        # tapes carry the same entries once sorted per pixel
        for lane in (a, b):
            assert len(lane[4]) == len(a[4])
        sa = np.lexsort((a[5], a[4]))
        sb = np.lexsort((b[5], b[4]))
        np.testing.assert_array_equal(a[4][sa], b[4][sb])
        np.testing.assert_array_equal(a[5][sa], b[5][sb])
        np.testing.assert_allclose(a[6][sa], b[6][sb], atol=1e-13)
        np.testing.assert_allclose(a[7][sa], b[7][sb], atol=1e-13)

    def test_backward(self):
        from headspan import _splat_nb, _splat_np

        args = _splat_inputs(seed=4)
        H = W = args[0]
        cacc, nacc, dacc, Wimg, tpx, tidx, talp, twgt = \
            _splat_nb.composite_forward(*args)
        srt = np.argsort(tpx, kind="stable")
        pptr = np.zeros(H * W + 1, dtype=np.int64)
        np.add.at(pptr, tpx[srt] + 1, 1)
        np.cumsum(pptr, out=pptr)
        rng = np.random.default_rng(1)
        gC = rng.normal(0, 1, (H * W, 3))
        gAN = rng.normal(0, 1, (H * W, 3))
        gAD = rng.normal(0, 1, H * W)
        gW = rng.normal(0, 1, H * W)
        bargs = args[:18] + (pptr, tidx[srt], talp[srt], twgt[srt],
                             gC, gAN, gAD, gW)
        outs_nb = _splat_nb.composite_backward(*bargs)
        outs_np = _splat_np.composite_backward(*bargs)
        for x, y in zip(outs_nb, outs_np):
            assert np.max(np.abs(x - y)) < 1e-8


class TestTsdfParity:
    def test_integrate(self):
        from headspan import _tsdf_nb, _tsdf_np

        rng = np.random.default_rng(2)
        cam = orbit_camera((0, 0, 0), 25, 10, 2.5, 20, 20)
        depth = rng.uniform(1.5, 3.0, (20, 20))
        alpha = (rng.uniform(0, 1, (20, 20)) > 0.3).astype(np.float64)
        R = np.ascontiguousarray(cam.rotation)
        t = np.ascontiguousarray(cam.translation)
        out = []
        for mod in (_tsdf_nb, _tsdf_np):
            values = np.zeros((12, 12, 12))
            weights = np.zeros((12, 12, 12))
            mod.integrate(values, weights, depth, alpha, cam.fx, cam.fy,
                          cam.cx, cam.cy, 20, 20, R, t,
                          -0.6, -0.6, -0.6, 0.1, 0.3)
            out.append((values, weights))
        np.testing.assert_allclose(out[0][0], out[1][0], atol=1e-12)
        np.testing.assert_array_equal(out[0][1], out[1][1])


class TestBvhParity:
    def test_query(self):
        from headspan import _bvh_nb, _bvh_np
        from headspan.template import build_procedural_template
        from headspan.warping import NearestTriangleIndex

        mesh = build_procedural_template(2).mean_mesh()
        idx = NearestTriangleIndex(mesh)
        pts = np.ascontiguousarray(
            np.random.default_rng(3).normal(0, 0.8, (200, 3)))
        a = _bvh_nb.query_nearest(idx.node_min, idx.node_max, idx.left,
                                  idx.right, idx.start, idx.count,
                                  idx.tri_order, idx._v0, idx._v1, idx._v2,
                                  pts)
        b = _bvh_np.query_nearest(idx.node_min, idx.node_max, idx.left,
                                  idx.right, idx.start, idx.count,
                                  idx.tri_order, idx._v0, idx._v1, idx._v2,
                                  pts)
        np.testing.assert_array_equal(a, b)


class TestHashParity:
    def test_forward_backward(self):
        from headspan import _hashenc_nb, _hashenc_np
        from headspan.encoding import HashGrid, HashGridConfig

        cfg = HashGridConfig(levels=5, table_size=2 ** 10,
                             features_per_entry=3, coarsest_resolution=3,
                             finest_resolution=64)
        g = HashGrid.random_init(cfg, np.random.default_rng(5), scale=0.4)
        pos = np.random.default_rng(6).uniform(-0.1, 1.1, (40, 3))
        up = np.random.default_rng(7).normal(0, 1, (40, cfg.output_dim))
        oa = np.zeros((40, cfg.output_dim))
        ob = np.zeros_like(oa)
        _hashenc_nb.encode_forward(g.tables, g._res, g._dense, pos, oa)
        _hashenc_np.encode_forward(g.tables, g._res, g._dense, pos, ob)
        np.testing.assert_allclose(oa, ob, atol=1e-13)
        ta = np.zeros_like(g.tables)
        pa = np.zeros_like(pos)
        tb = np.zeros_like(g.tables)
        pb = np.zeros_like(pos)
        _hashenc_nb.encode_backward(g.tables, g._res, g._dense, pos, up, ta, pa)
        _hashenc_np.encode_backward(g.tables, g._res, g._dense, pos, up, tb, pb)
        np.testing.assert_allclose(ta, tb, atol=1e-12)
        np.testing.assert_allclose(pa, pb, atol=1e-10)


def test_numpy_lane_runs_end_to_end(tmp_path):
    """HEADSPAN_BACKEND=numpy renders the same image as the numba lane."""
    script = (
        "import numpy as np\n"
        "import headspan.backend as b\n"
        "from conftest import random_surfels\n"
        "from headspan.cameras import orbit_camera\n"
        "from headspan.rendering import render\n"
        "assert b.active_backend() == %r\n"
        "s = random_surfels(12, seed=3)\n"
        "cam = orbit_camera((0,0,0), 9, 4, 3.0, 20, 20)\n"
        "out = render(s, cam, background=(0.2, 0.1, 0.4))\n"
        "np.save(%r, out.color)\n"
    )
    outs = {}
    for lane in ("numba", "numpy"):
        path = str(tmp_path / f"{lane}.npy")
        env = dict(os.environ, HEADSPAN_BACKEND=lane,
                   PYTHONPATH=os.path.dirname(__file__))
        proc = subprocess.run(
            [sys.executable, "-c", script % (lane, path)],
            capture_output=True, text=True, env=env,
            cwd=os.path.dirname(__file__))
        assert proc.returncode == 0, proc.stderr
        outs[lane] = np.load(path)
    assert np.max(np.abs(outs["numba"] - outs["numpy"])) < 1e-12
