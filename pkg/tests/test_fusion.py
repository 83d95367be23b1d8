import itertools

import numpy as np
import pytest

from artigauss.errors import InvalidParameterError
from artigauss.fusion import MatchResult, compute_beta, fuse, fuse_states, match_states, motion_richness
from artigauss.gaussians import SceneState
from artigauss.geometry import axis_angle_to_quat
from artigauss.synthetic_objects import load_object_spec, make_object


def _brute_force_cost(a, b):
    perms = np.array(list(itertools.permutations(range(len(b)))))
    return np.min(np.sum((a[None, :, :] - b[perms]) ** 2, axis=(1, 2)))


def test_match_coincident_sets():
    a = np.random.default_rng(0).normal(size=(10, 3))
    match = match_states(a, a.copy())
    np.testing.assert_array_equal(match.pairs, np.stack([np.arange(10), np.arange(10)], axis=1))
    assert match.total_cost == 0.
    assert match.exact


def test_match_permuted_duplicate():
    a = np.array([[0., 0., 0.], [10., 0., 0.]])
    match = match_states(a, a[::-1].copy())
    np.testing.assert_array_equal(match.pairs, [[0, 1], [1, 0]])
    assert match.total_cost == 0.


def test_match_equals_exhaustive_optimum():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        a, b = rng.uniform(size=(n, 3)), rng.uniform(size=(n, 3))
        match = match_states(a, b)
        assert match.total_cost == pytest.approx(_brute_force_cost(a, b), rel=1e-12, abs=1e-15)
        assert len(set(match.pairs[:, 0])) == n and len(set(match.pairs[:, 1])) == n


def test_match_unequal_counts():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(4, 3))
    match = match_states(a, b)
    assert len(match) == 4
    assert len(match.unmatched_a) == 3 and len(match.unmatched_b) == 0
    assert set(match.unmatched_a) | set(match.pairs[:, 0]) == set(range(7))


def test_greedy_matching_above_cutoff():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(300, 3))
    b = a[rng.permutation(300)] + rng.normal(0., 1e-4, size=(300, 3))
    match = match_states(a, b, hungarian_cutoff=100)
    assert not match.exact
    assert len(set(match.pairs[:, 0])) == 300 and len(set(match.pairs[:, 1])) == 300
    exact = match_states(a, b)
    assert match.total_cost == pytest.approx(exact.total_cost, rel=1e-9)


def test_match_rejects_empty_input():
    with pytest.raises(InvalidParameterError):
        match_states(np.zeros([0, 3]), np.zeros([3, 3]))


def test_motion_richness_examples():
    a = np.random.default_rng(4).normal(size=(30, 3))
    assert motion_richness(a, a) == 0.
    assert motion_richness(np.array([[0., 0., 0.]]), np.array([[1., 0., 0.]])) == pytest.approx(1.)
    assert motion_richness(np.zeros([0, 3]), a) == 0.
    with pytest.raises(InvalidParameterError):
        motion_richness(a, np.zeros([0, 3]))


def test_motion_richness_matches_exhaustive_scan():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3)) + 0.5
    expected = np.mean(np.min(np.linalg.norm(a[:, None] - b[None], axis=-1), axis=1))
    assert motion_richness(a, b) == pytest.approx(expected, abs=1e-12)
    assert motion_richness(a, b) != pytest.approx(motion_richness(b, a))


def test_beta_examples():
    assert compute_beta(2., 2.) == 0.5
    assert compute_beta(0., 1.) == 0.
    assert compute_beta(3., 1.) == 0.75
    assert compute_beta(0., 0.) == 0.5
    with pytest.raises(InvalidParameterError):
        compute_beta(-1., 1.)


def test_beta_symmetry():
    rng = np.random.default_rng(6)
    for _ in range(100):
        x, y = rng.uniform(0., 5., size=2)
        assert abs(compute_beta(x, y) + compute_beta(y, x) - 1.) <= 1e-9


def _random_state(rng, n, state_tag=0):
    q = rng.normal(size=(n, 4))
    return SceneState(rng.normal(size=(n, 3)), q, rng.uniform(0.01, 0.1, size=(n, 3)), rng.uniform(size=n),
                      rng.uniform(size=(n, 3)), rng.normal(size=(n, 8)), state_tag=state_tag)


def test_fuse_endpoints_are_lossless():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(2, 20))
        s0, s1 = _random_state(rng, n), _random_state(rng, n, 1)
        match = match_states(s0, s1)
        pairs = match.pairs
        np.testing.assert_array_equal(fuse(s0, s1, match, 1.).canonical.centers, s0.centers[pairs[:, 0]])
        np.testing.assert_array_equal(fuse(s0, s1, match, 0.).canonical.centers, s1.centers[pairs[:, 1]])


def test_fuse_midpoint_and_attributes():
    s0 = SceneState(np.array([[0., 0., 0.]]), scales=[[0.1, 0.1, 0.1]], opacities=[0.2], colors=[[0., 0., 0.]],
                    embeddings=np.ones([1, 8]))
    s1 = SceneState(np.array([[2., 0., 0.]]), rotations=[axis_angle_to_quat([0., 0., 1.], np.pi / 2)],
                    scales=[[0.3, 0.3, 0.3]], opacities=[0.6], colors=[[1., 1., 1.]], state_tag=1)
    report = fuse(s0, s1, match_states(s0, s1), 0.5, 1., 1.)
    canonical = report.canonical
    np.testing.assert_allclose(canonical.centers, [[1., 0., 0.]])
    np.testing.assert_allclose(canonical.scales, [[0.2, 0.2, 0.2]])
    np.testing.assert_allclose(canonical.opacities, [0.4])
    np.testing.assert_allclose(canonical.colors, [[0.5, 0.5, 0.5]])
    np.testing.assert_allclose(canonical.rotations, [axis_angle_to_quat([0., 0., 1.], np.pi / 4)], atol=1e-12)
    np.testing.assert_array_equal(canonical.embeddings, np.ones([1, 8]))
    assert canonical.state_tag is None
    assert report.to_json()["beta"] == 0.5


def test_fuse_door_centers_lie_on_segments():
    obj = make_object(load_object_spec("door").with_samples(150))
    report = fuse_states(obj.state0, obj.state1)
    pairs = report.match.pairs
    mu0, mu1 = obj.state0.centers[pairs[:, 0]], obj.state1.centers[pairs[:, 1]]
    c = report.canonical.centers
    gap = np.linalg.norm(c - mu0, axis=1) + np.linalg.norm(c - mu1, axis=1) - np.linalg.norm(mu1 - mu0, axis=1)
    assert np.all(np.abs(gap) < 1e-12)
    assert 0. <= report.beta <= 1.
    np.testing.assert_array_equal(report.canonical.gt_labels, obj.state0.gt_labels[pairs[:, 0]])


def test_fuse_drops_unmatched_gaussians():
    rng = np.random.default_rng(8)
    s0, s1 = _random_state(rng, 9), _random_state(rng, 6, 1)
    report = fuse(s0, s1, match_states(s0, s1), 0.3)
    assert len(report.canonical) == 6
    summary = report.to_json()
    assert summary["n_unmatched_state0"] == 3 and summary["n_unmatched_state1"] == 0


def test_fuse_validation():
    rng = np.random.default_rng(9)
    s0, s1 = _random_state(rng, 3), _random_state(rng, 3, 1)
    bad = MatchResult(np.array([[0, 0], [1, 5]]), 0., np.array([], int), np.array([], int))
    with pytest.raises(InvalidParameterError):
        fuse(s0, s1, bad, 0.5)
    with pytest.raises(InvalidParameterError):
        fuse(s0, s1, match_states(s0, s1), 1.5)


def test_uniform_beta_switch():
    obj = make_object(load_object_spec("drawer").with_samples(100))
    assert fuse_states(obj.state0, obj.state1, motion_aware=False).beta == 0.5
    report = fuse_states(obj.state0, obj.state1)
    assert report.beta == pytest.approx(compute_beta(report.d01, report.d10))
