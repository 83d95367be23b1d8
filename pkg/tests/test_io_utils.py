import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from artigauss.errors import InvalidInputError
from artigauss.gaussians import SceneState
from artigauss.io_utils import (SH_C0, RunManifest, load_ground_truth, load_model, read_ply, save_ground_truth,
                                save_model, sha256_file, write_ply, write_repel_ply)
from artigauss.repel_field import RepelField


def _random_state(n, state_tag=0, labelled=True):
    rng = np.random.default_rng(n)
    q = rng.normal(size=(n, 4))
    return SceneState(rng.normal(size=(n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                      rng.uniform(0.01, 0.1, size=(n, 3)), rng.uniform(size=n), rng.uniform(size=(n, 3)),
                      rng.normal(size=(n, 8)), state_tag=state_tag,
                      gt_labels=rng.integers(0, 3, size=n) if labelled else None)


def _assert_states_equal(a, b):
    for name in ("centers", "rotations", "scales", "opacities", "colors", "embeddings"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.state_tag == b.state_tag


def test_ply_round_trip_is_bit_exact(tmp_path):
    state = _random_state(1000, state_tag=1)
    path = str(tmp_path / "state.ply")
    write_ply(path, state)
    loaded = read_ply(path)
    _assert_states_equal(loaded, state)
    np.testing.assert_array_equal(loaded.gt_labels, state.gt_labels)


def test_ply_canonical_tag_and_missing_labels(tmp_path):
    state = _random_state(20, state_tag=None, labelled=False)
    path = str(tmp_path / "canonical.ply")
    write_ply(path, state)
    loaded = read_ply(path, default_state_tag=1)
    assert loaded.state_tag is None
    assert loaded.gt_labels is None


def test_empty_ply(tmp_path):
    path = str(tmp_path / "empty.ply")
    write_ply(path, SceneState(np.zeros([0, 3])))
    assert len(read_ply(path)) == 0


def test_ascii_ply(tmp_path):
    state = _random_state(30)
    path = str(tmp_path / "ascii.ply")
    write_ply(path, state, text=True)
    loaded = read_ply(path)
    np.testing.assert_allclose(loaded.centers, state.centers, rtol=1e-12)
    np.testing.assert_array_equal(loaded.gt_labels, state.gt_labels)


def test_splatting_export_is_converted(tmp_path):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"]
    vertex = np.zeros(2, dtype=[(n, "<f4") for n in names])
    vertex["x"] = [1., 2.]
    vertex["f_dc_0"] = [0., 1.]
    vertex["opacity"] = [0., 2.]
    for n in ("scale_0", "scale_1", "scale_2"):
        vertex[n] = np.log(0.05)
    vertex["rot_0"] = 1.
    path = str(tmp_path / "splat.ply")
    PlyData([PlyElement.describe(vertex, "vertex")]).write(path)

    state = read_ply(path)
    np.testing.assert_allclose(state.centers[:, 0], [1., 2.])
    np.testing.assert_allclose(state.colors[:, 0], [0.5, 0.5 + SH_C0], rtol=1e-6)
    np.testing.assert_allclose(state.opacities, [0.5, 1. / (1. + np.exp(-2.))], rtol=1e-6)
    np.testing.assert_allclose(state.scales, 0.05, rtol=1e-6)
    np.testing.assert_allclose(state.rotations, [[1., 0., 0., 0.]] * 2)
    assert state.gt_labels is None
    np.testing.assert_array_equal(state.embeddings, np.zeros([2, 8]))


def test_plain_point_cloud_uses_defaults(tmp_path):
    vertex = np.array([(0., 0., 0., 255, 0, 0)], dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                                        ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    path = str(tmp_path / "points.ply")
    PlyData([PlyElement.describe(vertex, "vertex")], text=True).write(path)
    state = read_ply(path)
    np.testing.assert_allclose(state.colors, [[1., 0., 0.]])
    np.testing.assert_array_equal(state.opacities, [1.])


def test_malformed_ply(tmp_path):
    path = tmp_path / "broken.ply"
    path.write_bytes(b"not a ply file\n")
    with pytest.raises(InvalidInputError):
        read_ply(str(path))
    with pytest.raises(InvalidInputError):
        read_ply(str(tmp_path / "missing.ply"))

    vertex = np.zeros(3, dtype=[("x", "<f4"), ("y", "<f4")])
    PlyData([PlyElement.describe(vertex, "vertex")]).write(str(path))
    with pytest.raises(InvalidInputError):
        read_ply(str(path))


def test_partially_labelled_ply(tmp_path):
    state = _random_state(5)
    path = str(tmp_path / "state.ply")
    write_ply(path, state)
    data = PlyData.read(path, mmap=False)
    data["vertex"].data["label"][0] = -1
    data.write(path)
    with pytest.raises(InvalidInputError):
        read_ply(path)


def test_checkpoint_round_trip(tmp_path, drawer, oracle_model):
    model = oracle_model(drawer)
    path = str(tmp_path / "model.h5")
    save_model(path, model)
    loaded = load_model(path)

    _assert_states_equal(loaded.canonical, model.canonical)
    np.testing.assert_array_equal(loaded.assignment.probs, model.assignment.probs)
    np.testing.assert_array_equal(loaded.labels, model.labels)
    np.testing.assert_array_equal(loaded.pairs, model.pairs)
    np.testing.assert_array_equal(loaded.source_centers, model.source_centers)
    for a, b in zip(loaded.transforms, model.transforms):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
    assert loaded.static_part == model.static_part
    assert len(loaded.repel_field) == 0
    assert loaded.fusion == model.fusion
    assert loaded.final_loss == 0.5
    assert loaded.config["k_parts"] == model.config["k_parts"]


def test_identical_models_give_identical_files(tmp_path, drawer, oracle_model):
    model = oracle_model(drawer)
    a, b = str(tmp_path / "a.h5"), str(tmp_path / "b.h5")
    save_model(a, model)
    save_model(b, model)
    assert sha256_file(a) == sha256_file(b)


def test_bad_checkpoint(tmp_path):
    path = tmp_path / "model.h5"
    path.write_bytes(b"\x00" * 64)
    with pytest.raises(InvalidInputError):
        load_model(str(path))


def test_ground_truth_round_trip(tmp_path, door):
    paths = [str(tmp_path / name) for name in ("state0.ply", "state1.ply", "gt.json")]
    write_ply(paths[0], door.state0)
    write_ply(paths[1], door.state1)
    save_ground_truth(paths[2], door)

    state0, state1 = read_ply(paths[0]), read_ply(paths[1])
    gt = load_ground_truth(paths[2], state0, state1)
    assert gt.static_part == door.static_part
    assert [j.kind if j is not None else None for j in gt.joints] == [None, "revolute"]
    np.testing.assert_array_equal(gt.labels, door.state0.gt_labels)
    for a, b in zip(gt.transforms, door.gt_transforms):
        np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-15)

    with pytest.raises(InvalidInputError):
        load_ground_truth(paths[2], state0.subset(np.arange(10)), state1)


def test_manifest_round_trip_and_compare(tmp_path):
    output = tmp_path / "out.txt"
    output.write_text("a")
    manifest = RunManifest(command=["synth", "--spec", "door"], seeds={"object": 0})
    manifest.add_output(str(output))
    path = str(tmp_path / "manifest.json")
    manifest.save(path)

    loaded = RunManifest.load(path)
    assert loaded.command == manifest.command
    assert loaded.compare_outputs() == []
    output.write_text("b")
    assert loaded.compare_outputs() == [str(output)]
    output.unlink()
    assert loaded.compare_outputs() == [str(output)]


def test_repel_points_export(tmp_path):
    field_ = RepelField(np.array([[0., 0., 0.], [1., 2., 3.]]))
    path = str(tmp_path / "repel.ply")
    write_repel_ply(path, field_)
    state = read_ply(path)
    np.testing.assert_array_equal(state.centers, field_.points)
    assert state.state_tag is None


def test_checkpoint_keeps_repel_radius(tmp_path, drawer, oracle_model):
    model = oracle_model(drawer)
    model.repel_field = RepelField(np.array([[0., 0., 0.], [0.1, 0., 0.]]), radius=0.05)
    path = str(tmp_path / "model.h5")
    save_model(path, model)
    loaded = load_model(path).repel_field
    assert loaded.radius == 0.05
    np.testing.assert_array_equal(loaded.points, model.repel_field.points)

    model.repel_field = RepelField(model.repel_field.points)
    save_model(path, model)
    assert load_model(path).repel_field.radius is None
