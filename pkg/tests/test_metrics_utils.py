import numpy as np
import pytest

from artigauss.errors import InvalidParameterError
from artigauss.geometry import PartTransform, axis_angle_to_quat
from artigauss.metrics_utils import (JointEstimate, axis_angle_error, chamfer, extract_joint, joint_errors,
                                     line_distance, penetration)
from artigauss.synthetic_objects import JointSpec


def test_extract_pure_translation():
    est = extract_joint(PartTransform([1., 0., 0., 0.], [1., 0., 0.]))
    assert est.kind == "prismatic" and not est.no_motion
    np.testing.assert_allclose(est.axis, [1., 0., 0.])
    assert est.motion == pytest.approx(1.)


def test_extract_revolute_about_offset_pivot():
    joint = JointSpec("revolute", [0., 0., 1.], np.deg2rad(30.), [2., 0., 0.])
    est = extract_joint(joint.to_transform())
    assert est.kind == "revolute"
    np.testing.assert_allclose(est.axis, [0., 0., 1.], atol=1e-12)
    np.testing.assert_allclose(est.pivot[:2], [2., 0.], atol=1e-9)
    assert est.motion == pytest.approx(30., abs=1e-9)


def test_extract_identity_is_no_motion():
    est = extract_joint(PartTransform.identity())
    assert est.no_motion
    assert est.axis is None
    assert est.to_dict()["no_motion"] is True


def test_extract_recovers_sampled_revolute_joints():
    rng = np.random.default_rng(0)
    for _ in range(100):
        axis = rng.normal(size=3)
        joint = JointSpec("revolute", axis, np.deg2rad(rng.uniform(1., 179.)), rng.uniform(-2., 2., size=3))
        est = extract_joint(joint.to_transform())
        assert est.kind == "revolute"
        assert axis_angle_error(est.axis, joint.axis) < 1e-6
        assert line_distance(est.pivot, est.axis, joint.pivot, joint.axis) < 1e-9


def test_small_rotation_is_prismatic():
    t = PartTransform(axis_angle_to_quat([0., 0., 1.], 5e-4), [0., 0.3, 0.])
    assert extract_joint(t).kind == "prismatic"


def test_joint_errors_exact_estimate():
    for joint in (JointSpec("revolute", [0., 1., 0.], 0.7, [0.5, 0., -0.2]),
                  JointSpec("prismatic", [0., 0., 1.], 0.4)):
        errors = joint_errors(extract_joint(joint.to_transform()), joint)
        assert errors.ang_err == pytest.approx(0., abs=1e-6)
        assert errors.motion_err == pytest.approx(0., abs=1e-9)
        assert not errors.kind_mismatch
        if joint.kind == "revolute":
            assert errors.pos_err == pytest.approx(0., abs=1e-9)
        else:
            assert errors.pos_err is None


def test_joint_errors_sign_and_offset():
    gt = JointSpec("revolute", [0., 0., 1.], np.deg2rad(30.), [0., 0., 0.])
    # -30 degrees about -z is the same rotation
    equivalent = JointEstimate("revolute", np.array([0., 0., -1.]), np.array([0., 0., 3.]), 30., angle_deg=-30.)
    errors = joint_errors(equivalent, gt)
    assert errors.ang_err == pytest.approx(0., abs=1e-12)
    assert errors.pos_err == pytest.approx(0., abs=1e-12)
    assert errors.motion_err == pytest.approx(0., abs=1e-12)

    # +30 degrees about -z swings the other way
    opposite = JointEstimate("revolute", np.array([0., 0., -1.]), np.array([0., 0., 3.]), 30., angle_deg=30.)
    errors = joint_errors(opposite, gt)
    assert errors.ang_err == pytest.approx(0., abs=1e-12)
    assert errors.motion_err == pytest.approx(60.)

    offset = JointEstimate("revolute", np.array([0., 0., 1.]), np.array([0.2, 0., 0.]), 30., angle_deg=30.)
    assert joint_errors(offset, gt).pos_err == pytest.approx(0.2)


def test_reversed_swing_is_a_motion_error():
    gt = JointSpec("revolute", [0., 0., 1.], np.deg2rad(30.), [2., 0., 0.])
    reversed_ = JointSpec("revolute", [0., 0., 1.], np.deg2rad(-30.), [2., 0., 0.])
    errors = joint_errors(extract_joint(reversed_.to_transform()), gt)
    assert errors.ang_err == pytest.approx(0., abs=1e-9)
    assert errors.pos_err == pytest.approx(0., abs=1e-9)
    assert errors.motion_err == pytest.approx(60., abs=1e-9)


def test_joint_errors_kind_mismatch():
    gt = JointSpec("prismatic", [1., 0., 0.], 0.5)
    est = extract_joint(PartTransform(axis_angle_to_quat([0., 0., 1.], 0.2), [0.5, 0., 0.]))
    errors = joint_errors(est, gt)
    assert errors.kind_mismatch
    assert errors.ang_err is None and errors.pos_err is None
    assert errors.motion_err == pytest.approx(0., abs=1e-12)


def test_line_distance_skew_lines():
    assert line_distance(np.zeros(3), np.array([1., 0., 0.]), np.array([0., 0., 1.5]),
                         np.array([0., 1., 0.])) == pytest.approx(1.5)


def test_chamfer_examples():
    x = np.random.default_rng(1).normal(size=(50, 3))
    assert chamfer(x, x) == 0.
    assert chamfer(np.zeros([1, 3]), np.array([[0.1, 0., 0.]])) == pytest.approx(20.)
    y = np.random.default_rng(2).normal(size=(30, 3))
    assert chamfer(x, y) == chamfer(y, x)
    with pytest.raises(InvalidParameterError):
        chamfer(x, np.zeros([0, 3]))


def test_chamfer_does_not_grow_when_target_grows_toward_source():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=(20, 3)) + 1.
    grown = np.concatenate([y, x[:10]])
    assert chamfer(x, grown) <= chamfer(x, y)


def test_penetration():
    static = np.zeros([1, 3])
    movable = np.array([[0.01, 0., 0.], [1., 0., 0.]])
    assert penetration(movable, static, 0.04) == pytest.approx(0.015)
    assert penetration(movable, np.zeros([0, 3]), 0.04) == 0.
