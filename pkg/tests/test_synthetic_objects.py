import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from artigauss.errors import InvalidInputError, InvalidParameterError
from artigauss.synthetic_objects import (JointSpec, ObjectSpec, PartSpec, list_presets, load_object_spec,
                                         make_object, perturb, sample_box_surface)


def _two_part(joint, samples=200, seed=0):
    return ObjectSpec([PartSpec("body", (1., 1., 1.), (0., 0., 0.), samples),
                       PartSpec("door", (0.05, 1., 1.), (0.55, 0., 0.), samples, joint)], seed=seed)


def test_zero_motion_gives_identical_states():
    obj = make_object(_two_part(JointSpec("revolute", [0., 0., 1.], 0., [0.5, 0., 0.])))
    np.testing.assert_array_equal(obj.state0.centers, obj.state1.centers)
    np.testing.assert_array_equal(obj.state0.rotations, obj.state1.rotations)


def test_prismatic_translates_part():
    obj = make_object(_two_part(JointSpec("prismatic", [1., 0., 0.], 0.5)))
    mask = obj.state0.gt_labels == 1
    np.testing.assert_array_equal(obj.state1.centers[mask], obj.state0.centers[mask] + [0.5, 0., 0.])
    np.testing.assert_array_equal(obj.state1.centers[~mask], obj.state0.centers[~mask])


def test_revolute_rotates_about_pivot():
    pivot = np.array([0.5, -0.5, 0.])
    obj = make_object(_two_part(JointSpec("revolute", [0., 0., 1.], np.deg2rad(30.), pivot)))
    mask = obj.state0.gt_labels == 1
    rot = Rotation.from_euler("z", 30., degrees=True).as_matrix()
    expected = (obj.state0.centers[mask] - pivot) @ rot.T + pivot
    np.testing.assert_allclose(obj.state1.centers[mask], expected, atol=1e-12)


@pytest.mark.parametrize("preset", ["door", "drawer", "flush_drawer", "table5"])
def test_ground_truth_transforms_reproduce_state1(preset):
    obj = make_object(load_object_spec(preset).with_samples(100))
    labels = obj.state0.gt_labels
    assert obj.static_part == obj.spec.static_part
    for k, transform in enumerate(obj.gt_transforms):
        mask = labels == k
        np.testing.assert_allclose(transform.apply(obj.state0.centers[mask]), obj.state1.centers[mask],
                                   atol=1e-10)
    static = labels == obj.static_part
    np.testing.assert_array_equal(obj.state0.centers[static], obj.state1.centers[static])
    np.testing.assert_array_equal(obj.state1.gt_labels, labels)
    assert len(obj.movable_parts) == len(obj.gt_transforms) - 1


def test_same_seed_is_bit_identical():
    spec = load_object_spec("table5").with_samples(50)
    a, b = make_object(spec), make_object(spec)
    np.testing.assert_array_equal(a.state0.centers, b.state0.centers)
    np.testing.assert_array_equal(a.state1.centers, b.state1.centers)
    c = make_object(spec.with_seed(1))
    assert not np.array_equal(a.state0.centers, c.state0.centers)


def test_overlap_is_a_warning():
    spec = ObjectSpec([PartSpec("body", (1., 1., 1.), (0., 0., 0.), 20),
                       PartSpec("lid", (1., 1., 1.), (0.5, 0., 0.), 20, JointSpec("prismatic", [0., 0., 1.], 0.2))])
    obj = make_object(spec)
    assert len(obj.warnings) == 1
    assert "overlap" in obj.warnings[0]


def test_spec_validation():
    with pytest.raises(InvalidParameterError):
        ObjectSpec([PartSpec("a", (1., 1., 1.)), PartSpec("b", (1., 1., 1.))])
    with pytest.raises(InvalidParameterError):
        ObjectSpec([PartSpec("a", (1., 1., 1.), samples=0)])
    with pytest.raises(InvalidParameterError):
        JointSpec("revolute", [0., 0., 1.], 4.)
    with pytest.raises(InvalidParameterError):
        JointSpec("screw", [0., 0., 1.], 0.1)
    with pytest.raises(InvalidParameterError):
        JointSpec("prismatic", [0., 0., 0.], 0.1)


def test_joint_axis_is_normalized():
    joint = JointSpec("prismatic", [0., 3., 4.], 1.)
    assert abs(np.linalg.norm(joint.axis) - 1.) < 1e-9
    assert JointSpec.from_dict({"kind": "revolute", "axis": [0, 0, 1], "magnitude_deg": 90.}).magnitude == \
        pytest.approx(np.pi / 2)


def test_presets_and_spec_round_trip():
    assert {"door", "drawer", "flush_drawer", "table5"} <= set(list_presets())
    spec = load_object_spec("door")
    again = ObjectSpec.from_dict(spec.to_dict())
    assert again.to_dict() == spec.to_dict()
    with pytest.raises(InvalidInputError):
        load_object_spec("no_such_object")
    with pytest.raises(InvalidInputError):
        ObjectSpec.from_dict({"parts": [{"dims": [1, 1, 1]}]})


def test_box_surface_samples_lie_on_faces():
    points = sample_box_surface(np.random.default_rng(0), (1., 2., 3.), (1., 1., 1.), 500)
    local = np.abs(points - 1.) / np.array([0.5, 1., 1.5])
    assert np.all(local <= 1. + 1e-12)
    np.testing.assert_allclose(local.max(axis=1), 1., atol=1e-12)


def test_perturb():
    obj = make_object(_two_part(JointSpec("prismatic", [1., 0., 0.], 0.5), samples=5000))
    state = obj.state0
    np.testing.assert_array_equal(perturb(state, 0., 3).centers, state.centers)

    noisy = perturb(state, 0.01, 3)
    std = np.std(noisy.centers - state.centers, axis=0)
    assert np.all(np.abs(std - 0.01) < 0.001)
    np.testing.assert_array_equal(perturb(state, 0.01, 3).centers, noisy.centers)
    np.testing.assert_array_equal(noisy.gt_labels, state.gt_labels)

    with pytest.raises(InvalidParameterError):
        perturb(state, -0.1, 0)


def test_noise_sigma_perturbs_both_states():
    spec = _two_part(JointSpec("prismatic", [1., 0., 0.], 0.5))
    clean = make_object(spec)
    noisy = make_object(ObjectSpec(spec.parts, spec.gaussian_scale, 0.01, spec.seed))
    assert not np.array_equal(clean.state0.centers, noisy.state0.centers)
    assert not np.array_equal(noisy.state0.centers[noisy.state0.gt_labels == 0],
                              noisy.state1.centers[noisy.state1.gt_labels == 0])
