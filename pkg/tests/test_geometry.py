import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import IDENTITY_X, random_scene, rot_z
from corrprune import geometry as g
from corrprune.geometry import CameraPose


def frob_gap(E_hat, E_gt):
    a = E_hat / np.linalg.norm(E_hat)
    b = E_gt / np.linalg.norm(E_gt)
    return min(np.linalg.norm(a - b), np.linalg.norm(a + b))


finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


class TestEssentialFromPose:
    def test_pure_x_translation(self):
        E = g.essential_from_pose(IDENTITY_X)
        np.testing.assert_array_equal(E, [[0, 0, 0], [0, 0, -1], [0, 1, 0]])

    def test_pure_z_translation(self):
        E = g.essential_from_pose(CameraPose(np.eye(3), [0, 0, 1.0]))
        np.testing.assert_array_equal(E, [[0, -1, 0], [1, 0, 0], [0, 0, 0]])

    def test_projected_points_satisfy_constraint(self):
        # independent route: raw 3D points pushed through both cameras by hand
        rng = np.random.default_rng(3)
        pose, _ = random_scene(3)
        X = np.column_stack([rng.uniform(-1, 1, (50, 2)), rng.uniform(2, 5, 50)])
        X2 = X @ pose.R.T + pose.t
        p = X / X[:, 2:]
        q = X2 / X2[:, 2:]
        E = g.essential_from_pose(pose)
        assert np.max(np.abs(np.einsum("ni,ij,nj->n", q, E, p))) < 1e-12


class TestSymmetricDistance:
    def test_exact_projection_is_zero(self, scene):
        pose, c = scene
        d = g.symmetric_epipolar_distance(g.essential_from_pose(pose), c)
        assert np.max(d) < 1e-24

    def test_hand_value(self):
        E = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0.0]])
        assert g.symmetric_epipolar_distance(E, [0, 0, 0, 0.1]) == pytest.approx(0.005, rel=1e-12)

    @given(arrays(np.float64, (3, 3), elements=finite), arrays(np.float64, 4, elements=finite),
           st.floats(0.1, 10) | st.floats(-10, -0.1))
    def test_scale_invariance(self, E, c, s):
        try:
            d = g.symmetric_epipolar_distance(E, c)
        except g.DegenerateDenominatorError:
            return
        assert g.symmetric_epipolar_distance(s * E, c) == pytest.approx(d, rel=1e-12, abs=1e-300)

    def test_degenerate_denominator(self):
        # view-1 point at the epipole of E=[t]x with t along z, view-2 point likewise
        E = g.essential_from_pose(CameraPose(np.eye(3), [0, 0, 1.0]))
        with pytest.raises(g.DegenerateDenominatorError):
            g.symmetric_epipolar_distance(E, [0, 0, 0, 0])


class TestLabelsAndVerify:
    def test_exact_inliers_all_ones(self, scene):
        pose, c = scene
        assert g.label_correspondences(g.essential_from_pose(pose), c, 1e-4).all()

    def test_strict_threshold(self):
        E = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0.0]])
        eps = 0.005
        # v chosen so that distance = v^2 / 2 gives 0, 2 eps, eps / 2
        rows = np.array([[0, 0, 0, 0], [0, 0, 0, np.sqrt(4 * eps)], [0, 0, 0, np.sqrt(eps)]])
        np.testing.assert_array_equal(g.label_correspondences(E, rows, eps), [1, 0, 1])

    def test_labels_match_loop(self):
        rng = np.random.default_rng(5)
        pose, c = random_scene(5, n=60)
        c = np.concatenate([c, rng.uniform(-1, 1, (60, 4))])
        E = g.essential_from_pose(pose)
        expected = [1 if g.symmetric_epipolar_distance(E, row) < 1e-4 else 0 for row in c]
        np.testing.assert_array_equal(g.label_correspondences(E, c, 1e-4), expected)
        np.testing.assert_array_equal(g.verify(E, c, 1e-4), expected)

    def test_verify_binary(self):
        rng = np.random.default_rng(6)
        E = g.enforce_essential(rng.normal(size=(3, 3)))
        P = g.verify(E, rng.uniform(-1, 1, (200, 4)))
        assert set(np.unique(P)) <= {0, 1}

    def test_verify_with_ground_truth_equals_labels(self, scene):
        pose, c = scene
        E = g.essential_from_pose(pose)
        np.testing.assert_array_equal(g.verify(E, c), g.label_correspondences(E, c))

    def test_rejects_bad_threshold(self, scene):
        pose, c = scene
        with pytest.raises(ValueError):
            g.verify(g.essential_from_pose(pose), c, 0.0)


class TestEightPoint:
    @pytest.mark.parametrize("seed", range(5))
    def test_exact_recovery(self, seed):
        pose, c = random_scene(seed, n=100)
        E = g.weighted_eight_point(c, np.ones(100))
        assert frob_gap(E, g.essential_from_pose(pose)) < 1e-6

    def test_zero_weight_outliers(self):
        rng = np.random.default_rng(11)
        pose, c = random_scene(11, n=50)
        rows = np.concatenate([c, rng.uniform(-1, 1, (50, 4))])
        w = np.r_[np.ones(50), np.zeros(50)]
        E = g.weighted_eight_point(rows, w)
        assert frob_gap(E, g.essential_from_pose(pose)) < 1e-6

    def test_weight_nullity(self):
        rng = np.random.default_rng(12)
        rows = rng.uniform(-1, 1, (40, 4))
        w = rng.uniform(0.1, 1, 40)
        w[::3] = 0
        full = g.weighted_eight_point(rows, w)
        kept = g.weighted_eight_point(rows[w > 0], w[w > 0])
        np.testing.assert_allclose(full, kept, atol=1e-12)

    def test_insufficient_support(self):
        _, c = random_scene(1, n=20)
        w = np.zeros(20)
        w[:7] = 1
        with pytest.raises(g.InsufficientSupportError):
            g.weighted_eight_point(c, w)

    def test_rank_deficiency(self):
        # all rows identical: G has rank 1
        c = np.tile([[0.1, 0.2, 0.3, 0.4]], (10, 1))
        with pytest.raises(g.RankDeficiencyError):
            g.weighted_eight_point(c, np.ones(10))

    def test_canonical_form(self, scene):
        _, c = scene
        E = g.weighted_eight_point(c, np.ones(len(c)))
        assert np.linalg.norm(E) == pytest.approx(np.sqrt(2), abs=1e-12)
        assert E.ravel()[np.argmax(np.abs(E))] > 0

    def test_runtime(self, scene):
        _, c = scene
        w = np.ones(len(c))
        t0 = time.perf_counter()
        for _ in range(200):
            g.weighted_eight_point(c, w)
        assert (time.perf_counter() - t0) / 200 < 1e-3


class TestEnforce:
    def test_idempotent_on_valid_input(self):
        rng = np.random.default_rng(0)
        U, _, Vt = np.linalg.svd(rng.normal(size=(3, 3)))
        if np.linalg.det(U) < 0:
            U[:, 2] *= -1
        if np.linalg.det(Vt) < 0:
            Vt[2] *= -1
        E = U @ np.diag([1, 1, 0.0]) @ Vt
        np.testing.assert_allclose(g.enforce_essential(E), E, atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(g.enforce_essential(np.diag([3.0, 2.0, 1.0])), np.diag([1.0, 1.0, 0.0]), atol=1e-15)

    @given(arrays(np.float64, (3, 3), elements=st.floats(-5, 5)))
    def test_singular_values(self, m):
        try:
            E = g.enforce_essential(m)
        except g.RankDeficiencyError:
            return
        np.testing.assert_allclose(np.linalg.svd(E, compute_uv=False), [1, 1, 0], atol=1e-9)
        assert abs(np.linalg.det(E)) < 1e-9
        np.testing.assert_allclose(g.enforce_essential(E), E, atol=1e-12)

    def test_rank_one_rejected(self):
        with pytest.raises(g.RankDeficiencyError):
            g.enforce_essential(np.outer([1, 2, 3.0], [1, 0, 0.0]))


class TestDecompose:
    @pytest.mark.parametrize("seed", range(5))
    def test_roundtrip(self, seed):
        pose, c = random_scene(seed, n=100)
        est = g.decompose_essential(g.essential_from_pose(pose), c)
        est.check()
        rot, tr = g.pose_error(est, pose)
        assert rot < 1e-6 and tr < 1e-6

    def test_forward_motion(self):
        pose = CameraPose(np.eye(3), [0, 0, 1.0])
        rng = np.random.default_rng(2)
        X = np.column_stack([rng.uniform(-1, 1, (50, 2)), rng.uniform(3, 6, 50)])
        X2 = X + pose.t
        c = np.column_stack([X[:, :2] / X[:, 2:], X2[:, :2] / X2[:, 2:]])
        est = g.decompose_essential(g.essential_from_pose(pose), c)
        np.testing.assert_allclose(est.R, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(est.t, pose.t, atol=1e-6)

    def test_tie_when_every_depth_is_zero(self):
        # view-1 point at the origin of the image plane: every candidate either
        # has parallel rays or places the point behind a camera
        E = g.essential_from_pose(IDENTITY_X)
        counts = g.cheirality_counts(E, [[0.0, 0.0, 0.0, 0.0]] * 4)
        assert counts.max() == 0
        with pytest.raises(g.CheiralityTieError):
            g.decompose_essential(E, [[0.0, 0.0, 0.0, 0.0]] * 4)


class TestPoseError:
    def test_identity(self):
        pose = CameraPose(rot_z(20), [0.6, 0.8, 0])
        assert g.pose_error(pose, pose) == (0.0, 0.0)

    def test_rotation_about_z(self):
        rot, tr = g.pose_error(CameraPose(rot_z(10), [1, 0, 0]), IDENTITY_X)
        assert rot == pytest.approx(10.0, abs=1e-9)
        assert tr == 0.0

    def test_arccos_form(self):
        # independent evaluation of arccos((trace - 1) / 2)
        rng = np.random.default_rng(0)
        for _ in range(20):
            pa, _ = random_scene(int(rng.integers(1000)), n=8, max_angle=90)
            pb, _ = random_scene(int(rng.integers(1000)), n=8, max_angle=90)
            cos = np.clip((np.trace(pb.R.T @ pa.R) - 1) / 2, -1, 1)
            assert g.pose_error(pa, pb)[0] == pytest.approx(np.degrees(np.arccos(cos)), abs=1e-6)

    def test_translation_sign_ignored(self):
        a = CameraPose(np.eye(3), [0, 0.6, 0.8])
        b = CameraPose(np.eye(3), [0, -0.6, -0.8])
        assert g.pose_error(a, b)[1] == 0.0
