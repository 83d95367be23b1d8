"""File formats: Gaussian PLY, JSON reports, h5py checkpoints and run manifests.

PLY files are binary little-endian with one `vertex` element. Native properties are
x, y, z, qw, qx, qy, qz, sx, sy, sz, opacity, red, green, blue (float64), label (int32,
-1 = unlabelled) and e0..e{E-1} for the embedding. The state tag is stored in a header
comment (`artigauss state 0|1|canonical`).

Reading also accepts ASCII files and 3D Gaussian Splatting exports:
rot_0..rot_3 -> quaternion (w first), exp(scale_i) -> scale, sigmoid(opacity) -> opacity,
0.5 + C0 * f_dc_i -> color. Integer red/green/blue are divided by 255. Missing
properties default to identity rotation, scale 0.01, opacity 1, grey color, no label and
zero embeddings.
"""
import os
import json
import hashlib
import logging
import dataclasses
from dataclasses import dataclass, field

import h5py
import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError
from scipy.special import expit

from artigauss import __version__
from artigauss.errors import ArtigaussError, InvalidInputError
from artigauss.evaluate import GroundTruth
from artigauss.gaussians import DEFAULT_EMBEDDING_DIM, DEFAULT_SCALE, SceneState
from artigauss.geometry import PartTransform, stack_transforms, unstack_transforms
from artigauss.part_field import AssignmentField, PartProjection
from artigauss.repel_field import RepelField
from artigauss.synthetic_objects import JointSpec
from artigauss.training import TrainedModel

logger = logging.getLogger(__name__)

PLY_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1
GROUND_TRUTH_FORMAT_VERSION = 1

FORMAT_VERSIONS = {
    "ply": PLY_FORMAT_VERSION,
    "checkpoint": CHECKPOINT_FORMAT_VERSION,
    "manifest": MANIFEST_FORMAT_VERSION,
    "ground_truth": GROUND_TRUTH_FORMAT_VERSION,
}

# zeroth-order spherical harmonic constant
SH_C0 = 0.28209479177387814

_STATE_COMMENT = "artigauss state"
_BASE_PROPERTIES = ["x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "red", "green", "blue"]


def write_ply(path, state: SceneState, text=False):
    dtype = [(name, "<f8") for name in _BASE_PROPERTIES] + [("label", "<i4")]
    dtype += [("e{}".format(i), "<f8") for i in range(state.embedding_dim)]

    vertex = np.empty(len(state), dtype=dtype)
    columns = np.concatenate([state.centers, state.rotations, state.scales, state.opacities[:, None],
                              state.colors], axis=1)
    for i, name in enumerate(_BASE_PROPERTIES):
        vertex[name] = columns[:, i]
    vertex["label"] = state.gt_labels if state.gt_labels is not None else -1
    for i in range(state.embedding_dim):
        vertex["e{}".format(i)] = state.embeddings[:, i]

    tag = "canonical" if state.state_tag is None else str(state.state_tag)
    comments = ["{} {}".format(_STATE_COMMENT, tag), "artigauss ply format {}".format(PLY_FORMAT_VERSION)]
    el = PlyElement.describe(vertex, "vertex")
    PlyData([el], text=text, byte_order="<", comments=comments).write(path)


def write_repel_ply(path, field_: RepelField, color=(1., 0., 1.)):
    """Repel points as a canonical-tagged PLY with tiny isotropic Gaussians, for viewing next to the field."""
    n = len(field_)
    write_ply(path, SceneState(field_.points, scales=np.full([n, 3], DEFAULT_SCALE), colors=np.tile(color, [n, 1]),
                               state_tag=None))


def _state_tag(comments, default):
    for comment in comments:
        if comment.startswith(_STATE_COMMENT):
            tag = comment[len(_STATE_COMMENT):].strip()
            if tag == "canonical":
                return None
            if tag in ("0", "1"):
                return int(tag)
            raise InvalidInputError(f"[artigauss] Unknown state tag '{tag}' in PLY header.")
    return default


def _indexed(names, prefix):
    found = [n for n in names if n.startswith(prefix) and n[len(prefix):].isdigit()]
    return sorted(found, key=lambda n: int(n[len(prefix):]))


def _columns(data, names):
    return np.stack([np.asarray(data[n], dtype=np.float64) for n in names], axis=1)


def read_ply(path, default_state_tag=0, embedding_dim=DEFAULT_EMBEDDING_DIM):
    try:
        plydata = PlyData.read(path, mmap=False)
    except (OSError, PlyParseError, ValueError, IndexError) as exc:
        raise InvalidInputError(f"[artigauss] Cannot parse PLY file {path}: {exc}") from exc

    if "vertex" not in [el.name for el in plydata.elements]:
        raise InvalidInputError(f"[artigauss] PLY file {path} has no vertex element.")
    data = plydata["vertex"].data
    names = data.dtype.names or ()
    if not all(n in names for n in ("x", "y", "z")):
        raise InvalidInputError(f"[artigauss] PLY file {path} lacks x/y/z properties.")
    n = len(data)
    splatting = any(n_.startswith(("rot_", "scale_", "f_dc_")) for n_ in names)

    centers = _columns(data, ["x", "y", "z"])
    rotations = scales = colors = embeddings = labels = None
    opacities = None

    if all(n_ in names for n_ in ("qw", "qx", "qy", "qz")):
        rotations = _columns(data, ["qw", "qx", "qy", "qz"])
    elif len(_indexed(names, "rot_")) == 4:
        rotations = _columns(data, _indexed(names, "rot_"))

    if all(n_ in names for n_ in ("sx", "sy", "sz")):
        scales = _columns(data, ["sx", "sy", "sz"])
    elif len(_indexed(names, "scale_")) == 3:
        scales = np.exp(_columns(data, _indexed(names, "scale_")))

    if "opacity" in names:
        opacities = np.asarray(data["opacity"], dtype=np.float64)
        if splatting:
            opacities = expit(opacities)

    if all(n_ in names for n_ in ("red", "green", "blue")):
        colors = _columns(data, ["red", "green", "blue"])
        if np.issubdtype(data.dtype["red"], np.integer):
            colors = colors / 255.
    elif len(_indexed(names, "f_dc_")) >= 3:
        colors = 0.5 + SH_C0 * _columns(data, _indexed(names, "f_dc_")[:3])

    embedding_names = _indexed(names, "e")
    if embedding_names:
        embeddings = _columns(data, embedding_names)
    else:
        embeddings = np.zeros([n, embedding_dim])

    if "label" in names:
        labels = np.asarray(data["label"], dtype=np.int64)
        unlabelled = labels == -1
        if np.all(unlabelled):
            labels = None
        elif np.any(unlabelled) or np.any(labels < -1):
            raise InvalidInputError(f"[artigauss] PLY file {path} is only partially labelled.")

    if rotations is None and n > 0:
        logger.debug("[artigauss] %s has no rotations, using identity.", path)
    if scales is None:
        scales = np.full([n, 3], DEFAULT_SCALE)

    try:
        return SceneState(centers, rotations, scales, opacities, colors, embeddings,
                          state_tag=_state_tag(plydata.comments, default_state_tag), gt_labels=labels)
    except ArtigaussError as exc:
        raise InvalidInputError(f"[artigauss] Invalid Gaussian data in {path}: {exc}") from exc


def save_json(path, data):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"[artigauss] Cannot read JSON file {path}: {exc}") from exc


def save_ground_truth(path, obj):
    """Joint and transform ground truth of a SyntheticObject; labels live in the PLY files."""
    save_json(path, {
        "format_version": GROUND_TRUTH_FORMAT_VERSION,
        "name": obj.spec.name if obj.spec is not None else None,
        "n_gaussians": len(obj.state0),
        "static_part": obj.static_part,
        "transforms": [t.to_dict() for t in obj.gt_transforms],
        "joints": [j.to_dict() if j is not None else None for j in obj.joints],
        "warnings": list(obj.warnings),
    })


def load_ground_truth(path, state0: SceneState, state1: SceneState):
    data = load_json(path)
    try:
        transforms = [PartTransform.from_dict(t) for t in data["transforms"]]
        joints = [JointSpec.from_dict(j) if j is not None else None for j in data["joints"]]
        static_part = int(data["static_part"])
        n = int(data["n_gaussians"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"[artigauss] Malformed ground truth {path}: {exc}") from exc
    if n != len(state0) or n != len(state1):
        raise InvalidInputError(f"[artigauss] Ground truth {path} describes {n} Gaussians, the states hold "
                                f"{len(state0)} and {len(state1)}.")
    if state0.gt_labels is None:
        raise InvalidInputError("[artigauss] State-0 PLY carries no part labels.")
    if len(joints) != len(transforms) or not 0 <= static_part < len(transforms):
        raise InvalidInputError(f"[artigauss] Inconsistent parts in ground truth {path}.")
    return GroundTruth(state0, state1, transforms, state0.gt_labels, joints, static_part)


def _dataset(f, name, value):
    # no timestamps, so identical models give identical files
    f.create_dataset(name, data=np.asarray(value), track_times=False)


def save_model(path, model: TrainedModel):
    rotations, translations = stack_transforms(model.transforms)
    canonical = model.canonical
    with h5py.File(path, "w") as f:
        f.attrs["format_version"] = CHECKPOINT_FORMAT_VERSION
        f.attrs["artigauss_version"] = __version__
        f.attrs["static_part"] = model.static_part
        f.attrs["fusion"] = json.dumps(model.fusion, sort_keys=True)
        f.attrs["config"] = json.dumps(model.config, sort_keys=True)

        _dataset(f, "canonical_centers", canonical.centers)
        _dataset(f, "canonical_rotations", canonical.rotations)
        _dataset(f, "canonical_scales", canonical.scales)
        _dataset(f, "canonical_opacities", canonical.opacities)
        _dataset(f, "canonical_colors", canonical.colors)
        _dataset(f, "canonical_embeddings", canonical.embeddings)
        _dataset(f, "assignment_probs", model.assignment.probs)
        _dataset(f, "transform_rotations", rotations)
        _dataset(f, "transform_translations", translations)
        _dataset(f, "projection_weights", model.projection.weights)
        _dataset(f, "projection_bias", model.projection.bias)
        _dataset(f, "labels", model.labels)
        _dataset(f, "source_centers", model.source_centers)
        _dataset(f, "target_centers", model.target_centers)
        _dataset(f, "pairs", model.pairs)

        repel = model.repel_field
        _dataset(f, "repel_points", repel.points)
        for name in ("k_r", "epsilon", "tau_max", "seed", "exponent", "sign", "no_candidates"):
            f.attrs["repel_" + name] = getattr(repel, name)
        # 0 stands for an unbounded field
        f.attrs["repel_radius"] = repel.radius if repel.radius is not None else 0.

        f.attrs["loss_names"] = json.dumps(sorted(model.loss_history))
        for i, name in enumerate(sorted(model.loss_history)):
            _dataset(f, "loss_history_{}".format(i), model.loss_history[name])


def load_model(path):
    try:
        with h5py.File(path, "r") as f:
            version = int(f.attrs["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise InvalidInputError(f"[artigauss] Unsupported checkpoint format {version} in {path}.")
            canonical = SceneState(f["canonical_centers"][:], f["canonical_rotations"][:],
                                   f["canonical_scales"][:], f["canonical_opacities"][:],
                                   f["canonical_colors"][:], f["canonical_embeddings"][:], state_tag=None)
            repel = RepelField(f["repel_points"][:], float(f.attrs["repel_k_r"]), float(f.attrs["repel_epsilon"]),
                               float(f.attrs["repel_tau_max"]), int(f.attrs["repel_seed"]),
                               float(f.attrs["repel_exponent"]), float(f.attrs["repel_sign"]),
                               bool(f.attrs["repel_no_candidates"]),
                               radius=float(f.attrs["repel_radius"]) or None)
            loss_names = json.loads(f.attrs["loss_names"])
            loss_history = {name: f["loss_history_{}".format(i)][:] for i, name in enumerate(loss_names)}
            return TrainedModel(
                canonical=canonical,
                assignment=AssignmentField(f["assignment_probs"][:]),
                transforms=unstack_transforms(f["transform_rotations"][:], f["transform_translations"][:]),
                projection=PartProjection(f["projection_weights"][:], f["projection_bias"][:]),
                labels=f["labels"][:].astype(np.int64),
                source_centers=f["source_centers"][:],
                target_centers=f["target_centers"][:],
                static_part=int(f.attrs["static_part"]),
                repel_field=repel,
                fusion=json.loads(f.attrs["fusion"]),
                pairs=f["pairs"][:].astype(np.int64),
                loss_history=loss_history,
                config=json.loads(f.attrs["config"]))
    except InvalidInputError:
        raise
    except ArtigaussError as exc:
        raise InvalidInputError(f"[artigauss] Invalid checkpoint {path}: {exc}") from exc
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidInputError(f"[artigauss] Cannot read checkpoint {path}: {exc}") from exc


def sha256_file(path, chunk_size=1 << 20):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI invocation."""
    command: list
    version: str = __version__
    formats: dict = field(default_factory=lambda: dict(FORMAT_VERSIONS))
    gin_config: str = ""
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    threads: int = 1

    def add_input(self, path):
        if path is not None and os.path.isfile(path):
            self.inputs[path] = sha256_file(path)

    def add_output(self, path):
        self.outputs[path] = sha256_file(path)

    def to_json(self):
        data = dataclasses.asdict(self)
        data["format_version"] = MANIFEST_FORMAT_VERSION
        return data

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        data.pop("format_version", None)
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidInputError(f"[artigauss] Malformed run manifest: {exc}") from exc

    def save(self, path):
        save_json(path, self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(load_json(path))

    def compare_outputs(self):
        """Paths whose current hash differs from the recorded one (missing files included)."""
        mismatched = []
        for path, digest in sorted(self.outputs.items()):
            if not os.path.isfile(path) or sha256_file(path) != digest:
                mismatched.append(path)
        return mismatched
