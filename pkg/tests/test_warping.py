import numpy as np
import pytest

from headspan.cameras import Camera
from headspan.errors import InvalidParameterError
from headspan.geometry import look_at, quat_from_axis_angle, quat_to_rotmat
from headspan.meshes import TriangleMesh
from headspan.meshrast import rasterize_mesh_depth
from headspan.template import (build_icosphere, build_procedural_template,
                               evaluate_template)
from headspan.warping import (NearestTriangleIndex, deformation_gradient,
                              nearest_triangle_brute, triangle_frame,
                              warp_points, warp_surfels,
                              warp_surfels_backward)


@pytest.fixture(scope="module")
def template():
    return build_procedural_template(2)


@pytest.fixture(scope="module")
def canon(template):
    return template.mean_mesh()


def rigid(axis, angle, t):
    T = np.eye(4)
    T[:3, :3] = quat_to_rotmat(quat_from_axis_angle(axis, angle))
    T[:3, 3] = t
    return T


class TestEvaluateTemplate:
    def test_zero_coefficients_identity_pose(self, template):
        mesh = evaluate_template(template, np.zeros(4), np.zeros(6), np.eye(4))
        np.testing.assert_array_equal(mesh.vertices, template.mean_vertices)
        np.testing.assert_array_equal(mesh.triangles, template.triangles)

    def test_one_hot_shape(self, template):
        mesh = evaluate_template(template, np.eye(4)[0], np.zeros(6),
                                 np.eye(4))
        np.testing.assert_allclose(
            mesh.vertices, template.mean_vertices + template.shape_basis[0],
            atol=1e-12)

    def test_linear_superposition(self, template):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 0.5, 4)
        b = rng.normal(0, 0.5, 4)
        ea = evaluate_template(template, a, np.zeros(6), np.eye(4)).vertices
        eb = evaluate_template(template, b, np.zeros(6), np.eye(4)).vertices
        eab = evaluate_template(template, a + b, np.zeros(6),
                                np.eye(4)).vertices
        np.testing.assert_allclose(eab, ea + eb - template.mean_vertices,
                                   atol=1e-9)

    def test_length_mismatch(self, template):
        with pytest.raises(InvalidParameterError):
            evaluate_template(template, np.zeros(3), np.zeros(6), np.eye(4))
        with pytest.raises(InvalidParameterError):
            evaluate_template(template, np.zeros(4), np.zeros(5), np.eye(4))

    def test_non_rigid_pose_rejected(self, template):
        bad = np.eye(4)
        bad[0, 0] = 2.0
        with pytest.raises(InvalidParameterError):
            evaluate_template(template, np.zeros(4), np.zeros(6), bad)


class TestTriangleFrame:
    def test_canonical_triangle(self):
        fr = triangle_frame((0, 0, 0), (1, 0, 0), (0, 1, 0))
        np.testing.assert_allclose(fr.axes, np.eye(3), atol=1e-15)
        assert abs(fr.area - 0.5) < 1e-15
        np.testing.assert_array_equal(fr.origin, [0, 0, 0])

    def test_uniform_scale_keeps_axes(self):
        fr = triangle_frame((0, 0, 0), (2, 0, 0), (0, 2, 0))
        np.testing.assert_allclose(fr.axes, np.eye(3), atol=1e-15)
        assert abs(fr.area - 2.0) < 1e-15

    def test_rigid_transform_rotates_axes(self):
        rng = np.random.default_rng(1)
        v = rng.normal(0, 1, (3, 3))
        base = triangle_frame(*v)
        T = rigid((0.5, 1, -0.3), .8, (0.1, 0.2, 0.3))
        vt = v @ T[:3, :3].T + T[:3, 3]
        moved = triangle_frame(*vt)
        np.testing.assert_allclose(moved.axes, T[:3, :3] @ base.axes,
                                   atol=1e-9)
        assert abs(moved.area - base.area) < 1e-12

    def test_orthonormality(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            fr = triangle_frame(*rng.normal(0, 1, (3, 3)))
            np.testing.assert_allclose(fr.axes.T @ fr.axes, np.eye(3),
                                       atol=1e-9)

    def test_degenerate_flagged(self):
        fr = triangle_frame((0, 0, 0), (1, 0, 0), (2, 0, 0))
        assert fr.degenerate
        assert fr.area == 0.0
        np.testing.assert_allclose(fr.axes.T @ fr.axes, np.eye(3), atol=1e-9)


class TestDeformationGradient:
    def test_identical_frames_identity(self):
        fr = triangle_frame((0.2, 0.1, -0.4), (1.1, 0.2, 0), (0.3, 0.9, 0.2))
        F = deformation_gradient(fr, fr)
        np.testing.assert_allclose(F, np.eye(4), atol=1e-12)

    def test_pure_translation(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        t = np.array([0.3, -0.2, 0.7])
        F = deformation_gradient(triangle_frame(*v), triangle_frame(*(v + t)))
        expect = np.eye(4)
        expect[:3, 3] = t
        np.testing.assert_allclose(F, expect, atol=1e-12)

    def test_similarity_reproduces_vertices(self):
        rng = np.random.default_rng(3)
        v = rng.normal(0, 1, (3, 3))
        R = quat_to_rotmat(quat_from_axis_angle((1, 2, 3), 1.1))
        anchor = v[0]
        vd = (v - anchor) * 2.0 @ R.T + anchor + np.array([0.5, 1.0, -0.3])
        F = deformation_gradient(triangle_frame(*v), triangle_frame(*vd))
        mapped = v @ F[:3, :3].T + F[:3, 3]
        np.testing.assert_allclose(mapped, vd, atol=1e-6)

    def test_zero_canon_area_rejected(self):
        degenerate = triangle_frame((0, 0, 0), (1, 0, 0), (2, 0, 0))
        good = triangle_frame((0, 0, 0), (1, 0, 0), (0, 1, 0))
        with pytest.raises(InvalidParameterError):
            deformation_gradient(degenerate, good)

    def test_zero_deformed_area_clamps_scale(self):
        good = triangle_frame((0, 0, 0), (1, 0, 0), (0, 1, 0))
        flat = triangle_frame((0, 0, 0), (1, 0, 0), (2, 0, 0))
        F = deformation_gradient(good, flat, max_scale=50.0)
        s = np.linalg.norm(F[:3, 0])
        assert abs(s - 1.0 / 50.0) < 1e-12


class TestWarpPoints:
    def test_identity(self, canon):
        rng = np.random.default_rng(4)
        pts = canon.face_centroids() + rng.normal(0, 0.01,
                                                  (canon.num_faces, 3))
        w, _ = warp_points(pts, canon, canon)
        assert np.max(np.linalg.norm(w - pts, axis=1)) < 1e-6

    def test_rigid_equivariance(self, canon):
        rng = np.random.default_rng(5)
        pts = canon.face_centroids() + rng.normal(0, 0.02,
                                                  (canon.num_faces, 3))
        T = rigid((0.3, 1, 0.2), 0.7, (0.2, -0.1, 0.4))
        moved = canon.transformed(T)
        w, _ = warp_points(pts, canon, moved)
        direct = pts @ T[:3, :3].T + T[:3, 3]
        assert np.max(np.linalg.norm(w - direct, axis=1)) < 1e-5

    def test_centroid_assignment_matches_brute(self, canon):
        idx = NearestTriangleIndex(canon)
        got = idx.query(canon.face_centroids())
        np.testing.assert_array_equal(got, np.arange(canon.num_faces))

    @pytest.mark.parametrize("seed", range(3))
    def test_bvh_matches_brute_scan(self, canon, seed):
        assert canon.num_faces <= 500
        rng = np.random.default_rng(seed)
        pts = rng.normal(0, 0.9, (250, 3))
        idx = NearestTriangleIndex(canon)
        np.testing.assert_array_equal(idx.query(pts),
                                      nearest_triangle_brute(pts, canon))

    def test_empty_mesh_rejected(self, canon):
        empty = TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), np.int32))
        with pytest.raises(InvalidParameterError):
            warp_points(np.zeros((1, 3)), empty, empty)

    def test_topology_mismatch_rejected(self, canon):
        other = build_icosphere(1)
        with pytest.raises(InvalidParameterError):
            warp_points(np.zeros((1, 3)), canon, other)


class TestWarpSurfels:
    def test_rigid_rotates_orientations(self, canon):
        from conftest import random_surfels

        s = random_surfels(30, seed=6, scale_range=(0.05, 0.1))
        s.centers[:] = canon.face_centroids()[:30]
        T = rigid((0, 1, 0), 0.9, (0.1, 0, -0.2))
        moved = canon.transformed(T)
        out, tri, cache = warp_surfels(s, canon, moved)
        np.testing.assert_allclose(out.centers,
                                   s.centers @ T[:3, :3].T + T[:3, 3],
                                   atol=1e-5)
        n_before = quat_to_rotmat(s.orientations)[:, :, 2]
        n_after = quat_to_rotmat(
            out.orientations
            / np.linalg.norm(out.orientations, axis=-1, keepdims=True)
        )[:, :, 2]
        np.testing.assert_allclose(n_after, n_before @ T[:3, :3].T, atol=1e-5)

    def test_backward_matches_fd(self, canon, template):
        from conftest import random_surfels

        s = random_surfels(8, seed=7, scale_range=(0.05, 0.1))
        mesh_e = evaluate_template(template, np.zeros(4),
                                   0.5 * np.ones(6), np.eye(4))
        out, tri, cache = warp_surfels(s, canon, mesh_e)
        rng = np.random.default_rng(8)
        gc = rng.normal(0, 1, (8, 3))
        gq = rng.normal(0, 1, (8, 4))
        from headspan.rendering import GradientBuffer

        g = GradientBuffer.zeros_like(out)
        g.centers[:] = gc
        g.orientations[:] = gq
        back = warp_surfels_backward(cache, g)

        def loss():
            o, _, _ = warp_surfels(s, canon, mesh_e)
            return float(np.sum(o.centers * gc) + np.sum(o.orientations * gq))

        h = 1e-6
        for (arr, gar, idx) in ((s.centers, back.centers, (3, 1)),
                                (s.orientations, back.orientations, (5, 2))):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss()
            arr[idx] = orig - h
            lm = loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gar[idx]) / max(abs(fd), 1e-9) < 1e-5


class TestMeshRaster:
    def front_cam(self, size=33, f=40.0):
        return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size,
                      height=size,
                      world_to_camera=look_at((0, 0, 3), (0, 0, 0)))

    def test_parallel_triangle_depth(self):
        cam = self.front_cam()
        # triangle at z = 1 in world, 2 in front of the camera at z = 3
        mesh = TriangleMesh(
            np.array([[-1.0, -1, 1], [1, -1, 1], [0, 1.5, 1]]),
            np.array([[0, 1, 2]], np.int32))
        depth, region = rasterize_mesh_depth(mesh, cam, np.array([2],
                                                                 np.int32))
        covered = region == 2
        assert covered.sum() > 10
        np.testing.assert_allclose(depth[covered], 2.0, atol=1e-9)
        assert np.all(depth[~covered] == 0.0)
        assert np.all(region[~covered] == 0)

    def test_nearer_triangle_wins(self):
        cam = self.front_cam()
        big = np.array([[-1.0, -1, 0], [1, -1, 0], [0, 1.5, 0]])
        near = big * 0.6 + np.array([0, 0, 1.0])
        mesh = TriangleMesh(np.vstack([big, near]),
                            np.array([[0, 1, 2], [3, 4, 5]], np.int32))
        depth, region = rasterize_mesh_depth(mesh, cam,
                                             np.array([1, 2], np.int32))
        c = 16
        assert region[c, c] == 2
        np.testing.assert_allclose(depth[c, c], 2.0, atol=1e-9)

    def test_sphere_center_depth(self):
        cam = self.front_cam(size=65, f=80.0)
        sphere = build_icosphere(3)  # radius 1 at origin, camera at z=3
        depth, region = rasterize_mesh_depth(sphere, cam)
        assert abs(depth[32, 32] - 2.0) < 0.02

    def test_lane_parity(self):
        from headspan import _meshrast_nb, _meshrast_np

        # generic-position camera: no pixel center sits exactly on a mesh
        # edge, where one-ulp rounding could flip the coverage test
        cam = Camera(fx=41.3, fy=40.7, cx=10.47, cy=10.31, width=21,
                     height=21,
                     world_to_camera=look_at((0.13, 0.21, 3.0), (0, 0, 0)))
        sphere = build_icosphere(2)
        cam_pts = cam.to_camera(sphere.vertices)
        z = np.ascontiguousarray(cam_pts[:, 2])
        px = np.ascontiguousarray(cam.fx * cam_pts[:, 0] / z + cam.cx)
        py = np.ascontiguousarray(cam.fy * cam_pts[:, 1] / z + cam.cy)
        z1 = np.full((21, 21), np.inf)
        f1 = np.full((21, 21), -1, np.int32)
        z2 = np.full((21, 21), np.inf)
        f2 = np.full((21, 21), -1, np.int32)
        _meshrast_nb.rasterize(px, py, z, sphere.triangles, 21, 21, z1, f1)
        _meshrast_np.rasterize(px, py, z, sphere.triangles, 21, 21, z2, f2)
        np.testing.assert_array_equal(f1, f2)
        np.testing.assert_allclose(np.where(np.isinf(z1), 0, z1),
                                   np.where(np.isinf(z2), 0, z2), atol=1e-12)
