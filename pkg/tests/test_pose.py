import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from surfdist.correspondence import CorrespondenceTable, QueryImage, log_denominator, maxpool3
from surfdist.errors import (AllZeroMask, DegenerateConfiguration, EmptyVisibleSet, NoConfidentPixels,
                             NoDepthOverlap, NoRealSolution)
from surfdist.geometry import (Camera, Pose, box_mesh, project, raycast_mesh, rotation_angle,
                               sample_surface_even, visible_coordinates)
from surfdist.geometry.render import zbuffer_indices
from surfdist.oracle import oracle_models
from surfdist.pose import (RansacConfig, RefineObjective, ap3p, combined_score, corr_score, corr_scores,
                           depth_adjust, mask_score, mask_scores, quartic_roots, ransac, refine, score_poses,
                           visibility_check)
from surfdist.pose.ap3p import reprojection_error
from surfdist.synthetic import render_features, sample_scene

CAM = Camera(200.0, 200.0, 112.0, 112.0, 224, 224)


def _random_instance(rng, spread=50.0):
    R = Rotation.random(random_state=rng).as_matrix()
    t = np.array([rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(400, 800)])
    pose = Pose(R, t)
    w = rng.uniform(-spread, spread, size=(3, 3))
    uv, _ = project(pose, CAM, w)
    return pose, w, uv


def _closest(poses, truth):
    return min(poses, key=lambda p: rotation_angle(p.rotation, truth.rotation)
               + np.linalg.norm(p.translation - truth.translation))


class TestQuartic:
    def test_known_roots(self):
        roots = np.sort(quartic_roots(np.poly([1.0, -2.0, 0.5, 3.0])))
        np.testing.assert_allclose(roots, [-2.0, 0.5, 1.0, 3.0], atol=1e-12)

    def test_complex_roots_dropped(self):
        roots = quartic_roots(np.real(np.poly([1j, -1j, 2.0, -1.0])))
        np.testing.assert_allclose(np.sort(roots), [-1.0, 2.0], atol=1e-12)

    def test_zero_polynomial(self):
        assert len(quartic_roots(np.zeros(5))) == 0


class TestAp3p:
    def test_recovers_generating_pose(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose, w, uv = _random_instance(rng)
            best = _closest(ap3p(uv, w, CAM), pose)
            assert rotation_angle(best.rotation, pose.rotation) < 1e-6
            np.testing.assert_allclose(best.translation, pose.translation, atol=1e-6)

    def test_every_solution_reprojects(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            _, w, uv = _random_instance(rng)
            for p in ap3p(uv, w, CAM):
                assert reprojection_error(p, CAM, w, uv).max() < 1e-6
                assert np.all(p.apply(w)[:, 2] > 0)

    def test_collinear_points(self):
        w = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]])
        uv = np.array([[100.0, 100], [120, 110], [90, 130]])
        with pytest.raises(DegenerateConfiguration):
            ap3p(uv, w, CAM)

    def test_coincident_rays(self):
        w = np.array([[0.0, 0, 0], [10, 0, 0], [0, 10, 0]])
        uv = np.array([[100.0, 100], [100, 100], [90, 130]])
        with pytest.raises(DegenerateConfiguration):
            ap3p(uv, w, CAM)

    def test_equilateral_on_axis_has_multiple_solutions(self):
        ang = np.radians([90.0, 210.0, 330.0])
        w = np.column_stack([30 * np.cos(ang), 30 * np.sin(ang), np.zeros(3)])
        pose = Pose.from_rotvec([0.0, 0.0, 0.0], [0.0, 0.0, 100.0])
        uv, _ = project(pose, CAM, w)
        sols = ap3p(uv, w, CAM)
        assert len(sols) >= 2
        for p in sols:
            assert reprojection_error(p, CAM, w, uv).max() < 1e-6
        assert min(rotation_angle(p.rotation, pose.rotation) for p in sols) < 1e-6

    def test_no_solution_in_front(self):
        # All three pixels identical in bearing space up to tiny offsets cannot
        # fit a large triangle in front of the camera with positive depth.
        w = np.array([[0.0, 0, 0], [100, 0, 0], [0, 100, 0]])
        uv = np.array([[112.0, 112], [112.5, 112], [112, 112.5]])
        try:
            sols = ap3p(uv, w, CAM)
        except (NoRealSolution, DegenerateConfiguration):
            return
        for p in sols:
            assert reprojection_error(p, CAM, w, uv).max() < 1e-6

    @staticmethod
    def _well_conditioned(uv):
        """Image triangle inside the crop with sides of at least 60 px and angles of at least 30 degrees."""
        e = [uv[1] - uv[0], uv[2] - uv[1], uv[0] - uv[2]]
        lengths = [np.linalg.norm(x) for x in e]
        if min(lengths) < 60 or np.any(uv < 0) or np.any(uv > 224):
            return False
        return max(-(e[i] @ e[i - 1]) / (lengths[i] * lengths[i - 1]) for i in range(3)) < np.cos(np.radians(30))

    def test_noise_robustness(self):
        rng = np.random.default_rng(2)
        errors = []
        while len(errors) < 300:
            pose, w, uv = _random_instance(rng, spread=150.0)
            if not self._well_conditioned(uv):
                continue
            try:
                sols = ap3p(uv + rng.normal(0, 0.5, uv.shape), w, CAM, max_residual=np.inf)
            except (NoRealSolution, DegenerateConfiguration):
                continue
            errors.append(min(rotation_angle(p.rotation, pose.rotation) for p in sols))
        assert np.degrees(np.median(errors)) < 2.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_property_reprojection(self, seed):
        _, w, uv = _random_instance(np.random.default_rng(seed))
        try:
            sols = ap3p(uv, w, CAM)
        except (NoRealSolution, DegenerateConfiguration):
            return
        for p in sols:
            assert reprojection_error(p, CAM, w, uv).max() < 1e-6


@pytest.fixture(scope="module")
def cube_surface():
    return sample_surface_even(box_mesh(100.0), 3000, rng=0)


class TestVisibility:
    def test_front_facing_center(self):
        assert visibility_check(Pose.identity(), [[0.0, 0, -1]], [[112.0, 112.0]], CAM)

    def test_back_facing_center(self):
        assert not visibility_check(Pose.identity(), [[0.0, 0, 1]], [[112.0, 112.0]], CAM)

    def test_agrees_with_ray_cast_on_convex_object(self, cube_surface):
        """A cube sample is visible iff the ray through it first hits the cube at that sample."""
        rng = np.random.default_rng(0)
        mesh = box_mesh(100.0)
        agree = checked = 0
        while checked < 1000:
            pose = Pose(Rotation.random(random_state=rng).as_matrix(),
                        [rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(350, 600)])
            for i in rng.integers(0, len(cube_surface), 10):
                x, n = cube_surface.points[i], cube_surface.normals[i]
                uv, z = project(pose, CAM, x[None])
                ray = CAM.rays(uv)[0]
                if abs((pose.rotation @ n) @ ray) < 1e-3 * np.linalg.norm(ray):
                    continue
                # Shift the principal point so the sample projects onto a pixel center.
                col, row = np.rint(uv[0]).astype(int)
                if not (0 <= col < 224 and 0 <= row < 224):
                    continue
                cam = Camera(200.0, 200.0, 112.0 + col - uv[0, 0], 112.0 + row - uv[0, 1], 224, 224)
                hits = raycast_mesh(mesh, pose, cam)
                seen = bool(hits.mask[row, col] and abs(hits.depth[row, col] - z[0]) < 1e-6)
                agree += seen == visibility_check(pose, n[None], uv, CAM)
                checked += 1
        assert agree == checked


class TestScores:
    def _index_image(self, mask):
        return np.where(mask, 0, -1)[None]

    def test_perfect_mask(self):
        m = np.zeros((6, 7), dtype=bool)
        m[2:4, 1:5] = True
        s = mask_scores(self._index_image(m), m.astype(float), clamp=0.0)
        assert s[0] == 0.0

    def test_uninformative_mask(self):
        m = np.zeros((6, 7), dtype=bool)
        m[1:3, 2:6] = True
        s = mask_scores(self._index_image(m), np.full((6, 7), 0.5))
        assert s[0] / np.log(2) == pytest.approx(-1.0, abs=1e-15)

    def test_complement_swaps_terms(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, (5, 5))
        m = rng.random((5, 5)) < 0.5
        a = mask_scores(self._index_image(m), p)[0]
        b = mask_scores(self._index_image(~m), p)[0]
        expected_a = np.where(m, np.log(p), np.log1p(-p)).mean()
        expected_b = np.where(m, np.log1p(-p), np.log(p)).mean()
        assert a == pytest.approx(expected_a) and b == pytest.approx(expected_b)

    def test_corr_one_hot_and_uniform(self):
        idx = np.full((1, 4, 4), -1)
        idx[0, 1:3, 1:3] = [[0, 1], [2, 3]]
        one_hot = np.zeros((4, 4, 5))
        for r, c in zip(*np.nonzero(idx[0] >= 0)):
            one_hot[r, c, idx[0, r, c]] = 1.0
        assert corr_scores(idx, one_hot)[0] == 0.0
        uniform = np.full((4, 4, 5), 0.2)
        assert corr_scores(idx, uniform)[0] / np.log(5) == pytest.approx(-1.0)

    def test_empty_hypothesis_gets_floor(self):
        assert corr_scores(np.full((1, 3, 3), -1), np.full((3, 3, 2), 0.5), floor=-7.0)[0] == -7.0

    def test_combined(self):
        assert combined_score(np.log(0.5), -np.log(100), 100) == pytest.approx(-2.0)
        assert combined_score(0.0, 0.0, 100) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_combined_non_positive(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((4, 4))
        idx = np.where(rng.random((1, 4, 4)) < 0.5, rng.integers(0, 6, (1, 4, 4)), -1)
        table = rng.dirichlet(np.ones(6), size=(4, 4))
        s = combined_score(mask_scores(idx, p), corr_scores(idx, table), 6)
        assert s[0] <= 0.0

    def test_single_pose_wrappers(self, cube_surface):
        cam = Camera(200 / 3, 200 / 3, 37.0, 37.0, 74, 74)
        pose = Pose.from_rotvec([0.3, 0.2, 0.1], [0, 0, 500.0])
        idx, _ = zbuffer_indices(pose.rotation[None], pose.translation[None], cam, cube_surface, warn=False)
        p = np.where(idx[0] >= 0, 0.9, 0.1)
        assert mask_score(pose, cam, cube_surface, p) == pytest.approx(mask_scores(idx, p)[0])
        pooled = np.full((74, 74, len(cube_surface)), 1.0 / len(cube_surface), dtype=np.float32)
        assert corr_score(pose, cam, cube_surface, pooled) == pytest.approx(-np.log(len(cube_surface)), rel=1e-6)


def _oracle_table(pose, cam, surface, eps=1e-6):
    """One-hot table at the ground-truth visible samples and a matching mask."""
    idx, _ = zbuffer_indices(pose.rotation[None], pose.translation[None], cam, surface, warn=False)
    idx = idx[0]
    H, W = idx.shape
    probs = np.full((H, W, len(surface)), 1.0 / len(surface), dtype=np.float32)
    rows, cols = np.nonzero(idx >= 0)
    probs[rows, cols] = 0.0
    probs[rows, cols, idx[rows, cols]] = 1.0
    mask = np.where(idx >= 0, 1 - eps, eps)
    return CorrespondenceTable(probs, np.zeros((H, W)), np.zeros((len(surface), 1))), mask


class TestRansac:
    @pytest.fixture(scope="class")
    @staticmethod
    def setup(blob):
        cam = CAM.downscaled(3)
        pose = Pose.from_rotvec([0.4, -1.1, 0.6], [5.0, -8.0, 450.0])
        table, mask = _oracle_table(pose, cam, blob.surface)
        return cam, pose, table, mask

    def test_oracle_table_recovers_pose(self, blob, setup):
        # At 74 px the blob spans about 15 px, so pixel-quantised triples limit
        # the hypothesis to sub-pixel reprojection rather than exact depth.
        cam, pose, table, mask = setup
        res = ransac(table, mask, cam, blob.surface, RansacConfig(iterations=500))
        best = res.best.pose
        assert np.degrees(rotation_angle(best.rotation, pose.rotation)) < 5.0
        _, x, _, _ = visible_coordinates(pose, cam, blob.surface, warn=False)
        uv_true, _ = project(pose, cam, x)
        uv_best, _ = project(best, cam, x)
        assert np.linalg.norm(uv_best - uv_true, axis=1).mean() < 1.0

    def test_ground_truth_scores_highest(self, blob, setup):
        cam, pose, table, mask = setup
        res = ransac(table, mask, cam, blob.surface, RansacConfig(iterations=200))
        s_true, s_m, s_c = score_poses(pose.rotation, pose.translation, cam, blob.surface, mask, maxpool3(table))
        assert s_c[0] == 0.0 and s_m[0] == pytest.approx(-1e-6, rel=1e-3)
        assert s_true[0] >= res.best.score

    def test_best_is_maximum(self, blob, setup):
        cam, _, table, mask = setup
        res = ransac(table, mask, cam, blob.surface, RansacConfig(iterations=100, rng_seed=3))
        assert res.best.score == np.max(res.scores)
        n = len(blob.surface)
        assert res.best.score == pytest.approx(res.best.mask_score / np.log(2) + res.best.corr_score / np.log(n))
        assert [h.score for h in res.top] == sorted([h.score for h in res.top], reverse=True)

    def test_single_iteration_reproducible(self, blob, setup):
        cam, _, table, mask = setup
        cfg = RansacConfig(iterations=1, rng_seed=11)
        try:
            a = ransac(table, mask, cam, blob.surface, cfg)
        except Exception as exc:  # a single triple may legitimately fail
            with pytest.raises(type(exc)):
                ransac(table, mask, cam, blob.surface, cfg)
            return
        b = ransac(table, mask, cam, blob.surface, cfg)
        np.testing.assert_array_equal(a.best.pose.matrix(), b.best.pose.matrix())
        assert a.best.triple == b.best.triple

    def test_all_zero_mask(self, blob, setup):
        cam, _, table, _ = setup
        with pytest.raises(AllZeroMask):
            ransac(table, np.zeros(table.shape), cam, blob.surface, RansacConfig(iterations=5))

    def test_pooled_default_matches_explicit(self, blob, setup):
        cam, _, table, mask = setup
        cfg = RansacConfig(iterations=50, rng_seed=4)
        a = ransac(table, mask, cam, blob.surface, cfg)
        b = ransac(table, mask, cam, blob.surface, cfg, pooled=maxpool3(table))
        assert a.best.score == b.best.score


def _bowl_problem(pose, coords, cam, a=0.5):
    """Field q·k_j - logZ = -a/2 |u - p_j|² with p_j the projection under ``pose``."""
    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    Q = np.stack([uu, vv, uu ** 2 + vv ** 2, np.ones_like(uu)], axis=-1)
    uv, _ = project(pose, cam, coords)
    proj = {tuple(c): p for c, p in zip(map(tuple, coords), uv)}

    def keys(x):
        p = np.array([proj[tuple(c)] for c in x])
        return a * np.column_stack([p[:, 0], p[:, 1], -0.5 * np.ones(len(p)), -0.5 * (p ** 2).sum(axis=1)])

    return Q, np.zeros((H, W)), keys


class TestRefine:
    @pytest.fixture(scope="class")
    @staticmethod
    def grid_points():
        # A fronto-parallel grid whose points project exactly onto pixel centers.
        Z = 400.0
        g = np.arange(-10, 11, 2.0)
        gx, gy = np.meshgrid(g, g)
        x = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]) * Z / 200.0
        return Pose.from_rotvec([0.0, 0.0, 0.0], [0.0, 0.0, Z]), x

    def test_ground_truth_is_stationary(self, grid_points):
        pose, x = grid_points
        Q, L, keys = _bowl_problem(pose, x, CAM)
        res = refine(pose, Q, L, keys, x, CAM)
        assert rotation_angle(res.pose.rotation, pose.rotation) < 1e-3
        assert np.abs(res.pose.translation - pose.translation).max() < 1e-3
        assert res.objective == pytest.approx(0.0, abs=1e-12)

    def test_three_pixel_offset_recovered(self, blob):
        pose = Pose.from_rotvec([0.3, 0.5, -0.2], [0.0, 0.0, 450.0])
        _, x, _, _ = visible_coordinates(pose, CAM, blob.surface, warn=False)
        Q, L, keys = _bowl_problem(pose, x, CAM)
        start = Pose(pose.rotation, pose.translation + np.array([3.0 * 450.0 / 200.0, 0.0, 0.0]))
        res = refine(start, Q, L, keys, x, CAM)
        uv_true, _ = project(pose, CAM, x)
        uv_est, _ = project(res.pose, CAM, x)
        assert np.mean(np.linalg.norm(uv_est - uv_true, axis=1)) < 0.1

    def test_trace_non_decreasing(self, blob):
        pose = Pose.from_rotvec([0.3, 0.5, -0.2], [0.0, 0.0, 450.0])
        _, x, _, _ = visible_coordinates(pose, CAM, blob.surface, warn=False)
        Q, L, keys = _bowl_problem(pose, x, CAM)
        start = Pose.from_rotvec([0.33, 0.48, -0.2], [4.0, -3.0, 455.0])
        res = refine(start, Q, L, keys, x, CAM)
        assert res.trace[-1] >= res.trace[0] - 1e-9
        assert res.iterations <= 100

    def test_gradient_matches_finite_differences(self, blob, camera):
        rng = np.random.default_rng(5)
        orc = oracle_models(blob)
        errs = []
        for _ in range(10):
            scene = sample_scene(blob, camera, rng)
            crop = render_features(scene, blob)
            qi = orc.query_image(crop)
            L = log_denominator(qi.queries, orc.keys(blob.surface.points))
            _, x, _, _ = visible_coordinates(scene.pose, camera, blob.surface, warn=False)
            fun = RefineObjective(scene.pose, qi.queries, L, orc.keys(x), x, camera)
            p = rng.normal(0, 0.01, 6)
            _, g = fun.value_and_grad(p)
            h = 1e-5
            g_fd = np.array([(fun.value(p + h * e) - fun.value(p - h * e)) / (2 * h) for e in np.eye(6)])
            errs.append(np.linalg.norm(g - g_fd) / np.linalg.norm(g_fd))
        assert np.median(errs) < 1e-3

    def test_empty_visible_set(self):
        with pytest.raises(EmptyVisibleSet):
            refine(Pose.identity(), np.zeros((4, 4, 2)), np.zeros((4, 4)), lambda x: np.zeros((0, 2)),
                   np.zeros((0, 3)), CAM)


class TestDepthAdjust:
    @pytest.fixture(scope="class")
    @staticmethod
    def rendered(blob):
        cam = Camera(200.0, 200.0, 112.0, 112.0, 224, 224)
        pose = Pose.from_rotvec([0.2, -0.4, 0.1], [0.0, 0.0, 450.0])
        _, depth = zbuffer_indices(pose.rotation[None], pose.translation[None], cam, blob.surface, warn=False)
        return cam, pose, depth[0]

    def _queries(self, shape):
        return QueryImage(np.ones(shape + (3,)), np.full(shape, 0.5))

    def test_no_offset_unchanged(self, blob, rendered):
        cam, pose, depth = rendered
        out = depth_adjust(pose, self._queries(depth.shape), depth, cam, blob.surface)
        np.testing.assert_allclose(out.translation, pose.translation, atol=1e-12)

    def test_constant_offset(self, blob, rendered):
        cam, pose, depth = rendered
        obs = np.where(depth > 0, depth + 10.0, 0.0)
        out = depth_adjust(pose, self._queries(depth.shape), obs, cam, blob.surface)
        assert out.translation[2] - pose.translation[2] == pytest.approx(10.0, abs=0.1)
        np.testing.assert_array_equal(out.rotation, pose.rotation)

    def test_outliers(self, blob, rendered):
        cam, pose, depth = rendered
        rng = np.random.default_rng(0)
        obs = np.where(depth > 0, depth + 10.0, 0.0)
        bad = (depth > 0) & (rng.random(depth.shape) < 0.3)
        obs[bad] += rng.choice([-100.0, 100.0], bad.sum())
        out = depth_adjust(pose, self._queries(depth.shape), obs, cam, blob.surface)
        assert out.translation[2] - pose.translation[2] == pytest.approx(10.0, abs=1.0)

    def test_coarse_query_image(self, blob, rendered):
        cam, pose, depth = rendered
        obs = np.where(depth > 0, depth + 10.0, 0.0)
        out = depth_adjust(pose, self._queries((74, 74)), obs, cam, blob.surface)
        assert out.translation[2] - pose.translation[2] == pytest.approx(10.0, abs=0.1)

    def test_zero_queries(self, blob, rendered):
        cam, pose, depth = rendered
        with pytest.raises(NoConfidentPixels):
            depth_adjust(pose, np.zeros(depth.shape + (3,)), depth, cam, blob.surface)

    def test_no_overlap(self, blob, rendered):
        cam, pose, depth = rendered
        with pytest.raises(NoDepthOverlap):
            depth_adjust(pose, self._queries(depth.shape), np.zeros_like(depth), cam, blob.surface)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.0, 0.45))
    def test_minority_corruption_is_ignored(self, seed, frac):
        """Median property: corrupting fewer than half the differences leaves the shift exact."""
        cam, pose, depth = self._cached
        rng = np.random.default_rng(seed)
        obs = np.where(depth > 0, depth + 7.0, 0.0)
        valid = np.flatnonzero(depth > 0)
        bad = rng.choice(valid, int(frac * len(valid)), replace=False)
        obs.flat[bad] += rng.uniform(-500, 500, len(bad))
        out = depth_adjust(pose, self._queries(depth.shape), obs, cam, _BLOB_SURFACE[0])
        assert out.translation[2] - pose.translation[2] == pytest.approx(7.0, abs=1e-9)

    @pytest.fixture(autouse=True)
    def _cache(self, blob, rendered, request):
        type(self)._cached = rendered
        _BLOB_SURFACE[:] = [blob.surface]


_BLOB_SURFACE = []
