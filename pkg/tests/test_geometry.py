import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicematch.geometry import (RigidPose, apply, compose, invert, load_pose,
                                 pose_error, rotation_angle_deg, save_pose,
                                 CalibrationSpec)


def rot_z(deg):
    return RigidPose.from_axis_angle([0, 0, 1], math.radians(deg))


def random_pose(seed):
    rng = np.random.default_rng(seed)
    return RigidPose.from_axis_angle(rng.standard_normal(3),
                                     rng.uniform(-np.pi, np.pi),
                                     rng.uniform(-50, 50, 3))


pose_seeds = st.integers(min_value=0, max_value=10_000)


class TestRigidPose:
    def test_identity(self):
        p = RigidPose.identity()
        np.testing.assert_array_equal(p.rotation, np.eye(3))
        np.testing.assert_array_equal(p.translation, np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            RigidPose(np.eye(3) * 1.01, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError, match="det"):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_matrix_roundtrip(self):
        p = random_pose(3)
        q = RigidPose.from_matrix(p.matrix())
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-15)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-15)


class TestCompose:
    def test_identity_neutral(self):
        t = random_pose(0)
        c = compose(RigidPose.identity(), t)
        np.testing.assert_allclose(c.rotation, t.rotation, atol=1e-15)
        np.testing.assert_allclose(c.translation, t.translation, atol=1e-15)

    def test_two_quarter_turns(self):
        c = compose(rot_z(90), rot_z(90))
        # oracle: direct matrix product of the two rotations
        expected = rot_z(90).rotation @ rot_z(90).rotation
        np.testing.assert_allclose(c.rotation, expected, atol=1e-12)
        np.testing.assert_allclose(c.rotation, rot_z(180).rotation, atol=1e-12)
        np.testing.assert_allclose(c.translation, np.zeros(3), atol=1e-12)

    def test_inverse_cancels(self):
        t = random_pose(1)
        c = compose(t, invert(t))
        np.testing.assert_allclose(c.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(c.translation, np.zeros(3), atol=1e-12)

    @given(pose_seeds, pose_seeds, pose_seeds)
    @settings(max_examples=40, deadline=None)
    def test_associative(self, sa, sb, sc):
        a, b, c = random_pose(sa), random_pose(sb), random_pose(sc)
        lhs = compose(compose(a, b), c)
        rhs = compose(a, compose(b, c))
        assert np.abs(lhs.rotation - rhs.rotation).max() < 1e-10
        assert np.abs(lhs.translation - rhs.translation).max() < 1e-10

    @given(pose_seeds, pose_seeds)
    @settings(max_examples=40, deadline=None)
    def test_apply_compose_consistent(self, sa, sb):
        a, b = random_pose(sa), random_pose(sb)
        p = np.random.default_rng(sa + sb).uniform(-30, 30, 3)
        lhs = apply(compose(a, b), p)
        rhs = apply(a, apply(b, p))
        assert np.abs(lhs - rhs).max() < 1e-10


class TestApply:
    def test_identity(self):
        np.testing.assert_array_equal(
            apply(RigidPose.identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]
        )

    def test_quarter_turn_z(self):
        # Rz(90): x-axis maps onto y-axis
        out = apply(rot_z(90), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-12)

    def test_translation_only(self):
        p = RigidPose(np.eye(3), [5.0, 0.0, 0.0])
        np.testing.assert_array_equal(apply(p, [1.0, 1.0, 1.0]), [6.0, 1.0, 1.0])

    def test_batch(self):
        t = random_pose(9)
        pts = np.random.default_rng(2).uniform(-10, 10, (7, 3))
        batch = apply(t, pts)
        for k in range(7):
            np.testing.assert_allclose(batch[k], apply(t, pts[k]), atol=1e-12)


class TestPoseError:
    def test_zero_for_equal(self):
        t = random_pose(4)
        err = pose_error(t, t)
        assert err.rotation_deg == 0.0
        assert err.translation_mm == 0.0
        assert err.success_5 and err.success_15

    def test_quarter_turn_is_90(self):
        # trace(Rz(90)) = 1 so arccos((1-1)/2) = 90 degrees
        err = pose_error(rot_z(90), RigidPose.identity())
        assert abs(err.rotation_deg - 90.0) < 1e-12

    def test_paper_median_case(self):
        # 11.51 deg / 7.62 mm: inside the 15/15 box, outside the 5/5 box
        est = RigidPose.from_axis_angle([0, 0, 1], math.radians(11.51),
                                        [7.62, 0.0, 0.0])
        err = pose_error(est, RigidPose.identity())
        assert abs(err.rotation_deg - 11.51) < 1e-9
        assert abs(err.translation_mm - 7.62) < 1e-12
        assert err.success_15 and not err.success_5

    def test_strict_threshold_boundary(self):
        est = RigidPose(np.eye(3), [5.0, 0.0, 0.0])
        err = pose_error(est, RigidPose.identity())
        assert err.translation_mm == 5.0
        assert not err.success_5  # exactly 5 mm is not < 5
        assert err.success_15

    @given(pose_seeds, pose_seeds)
    @settings(max_examples=40, deadline=None)
    def test_rotation_error_symmetric(self, sa, sb):
        a, b = random_pose(sa), random_pose(sb)
        assert abs(rotation_angle_deg(a.rotation, b.rotation)
                   - rotation_angle_deg(b.rotation, a.rotation)) < 1e-10

    def test_success_5_implies_15_invariant(self):
        with pytest.raises(ValueError):
            from slicematch.geometry import PoseError
            PoseError(rotation_deg=1.0, translation_mm=1.0,
                      success_15=False, success_5=True)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        t = random_pose(5)
        path = tmp_path / "pose.json"
        save_pose(t, path)
        back = load_pose(path)
        np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-15)
        np.testing.assert_allclose(back.translation, t.translation, atol=1e-15)

    def test_units_checked(self, tmp_path):
        path = tmp_path / "pose.json"
        path.write_text('{"matrix": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]], "units": "m"}')
        with pytest.raises(ValueError, match="units"):
            load_pose(path)


class TestCalibrationSpec:
    def test_defaults_valid(self):
        CalibrationSpec()

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            CalibrationSpec(pixel_spacing=(0.5, 0.0))
