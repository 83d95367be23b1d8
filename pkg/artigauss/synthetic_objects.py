import os
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from artigauss.errors import InvalidInputError, InvalidParameterError, check_finite
from artigauss.gaussians import DEFAULT_EMBEDDING_DIM, SceneState
from artigauss.geometry import PartTransform, axis_angle_to_quat

logger = logging.getLogger(__name__)

PRESET_DIR = os.path.join(os.path.dirname(__file__), "configs", "objects")

REVOLUTE = "revolute"
PRISMATIC = "prismatic"


@dataclass(frozen=True)
class JointSpec:
    kind: str
    axis: np.ndarray
    magnitude: float
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise InvalidParameterError(f"[artigauss] Unknown joint kind '{self.kind}'.")
        axis = check_finite("joint axis", np.reshape(self.axis, 3))
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            raise InvalidParameterError("[artigauss] Joint axis must be non-zero.")
        object.__setattr__(self, "axis", axis / norm)
        object.__setattr__(self, "pivot", check_finite("joint pivot", np.reshape(self.pivot, 3)))
        magnitude = float(check_finite("joint magnitude", self.magnitude))
        if self.kind == REVOLUTE and not -np.pi < magnitude <= np.pi:
            raise InvalidParameterError("[artigauss] Revolute magnitude must lie in (-pi, pi].")
        object.__setattr__(self, "magnitude", magnitude)

    def to_transform(self):
        if self.kind == PRISMATIC:
            return PartTransform.identity() if self.magnitude == 0 else \
                PartTransform(np.array([1., 0., 0., 0.]), self.magnitude * self.axis)
        if self.magnitude == 0:
            return PartTransform.identity()
        rotation = PartTransform(axis_angle_to_quat(self.axis, self.magnitude), np.zeros(3))
        return PartTransform(rotation.rotation, self.pivot - rotation.matrix @ self.pivot)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        if self.magnitude == 0:
            return points.copy()
        if self.kind == PRISMATIC:
            return points + self.magnitude * self.axis
        matrix = self.to_transform().matrix
        return (points - self.pivot) @ matrix.T + self.pivot

    def to_dict(self):
        data = {"kind": self.kind, "axis": self.axis.tolist(), "magnitude": self.magnitude}
        if self.kind == REVOLUTE:
            data["pivot"] = self.pivot.tolist()
        return data

    @classmethod
    def from_dict(cls, data):
        if "magnitude_deg" in data:
            magnitude = np.deg2rad(float(data["magnitude_deg"]))
        else:
            magnitude = float(data["magnitude"])
        return cls(data["kind"], np.asarray(data["axis"], dtype=np.float64), magnitude,
                   np.asarray(data.get("pivot", [0., 0., 0.]), dtype=np.float64))


@dataclass(frozen=True)
class PartSpec:
    name: str
    dims: tuple
    center: tuple = (0., 0., 0.)
    samples: int = 1000
    joint: JointSpec = None
    color: tuple = (0.5, 0.5, 0.5)

    @property
    def is_static(self):
        return self.joint is None


@dataclass(frozen=True)
class ObjectSpec:
    parts: tuple
    gaussian_scale: float = 0.02
    noise_sigma: float = 0.
    seed: int = 0
    name: str = "object"

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        n_static = sum(part.is_static for part in self.parts)
        if n_static != 1:
            raise InvalidParameterError(f"[artigauss] Object needs exactly one static part, got {n_static}.")
        for part in self.parts:
            if part.samples < 1:
                raise InvalidParameterError(f"[artigauss] Part '{part.name}' needs at least one sample.")
            if np.any(np.asarray(part.dims) <= 0):
                raise InvalidParameterError(f"[artigauss] Part '{part.name}' has non-positive dimensions.")
        if self.gaussian_scale <= 0:
            raise InvalidParameterError("[artigauss] gaussian_scale must be positive.")
        if self.noise_sigma < 0:
            raise InvalidParameterError("[artigauss] noise_sigma must be >= 0.")

    @property
    def static_part(self):
        return [part.is_static for part in self.parts].index(True)

    def with_samples(self, samples):
        """Same object with every part resampled with the given count."""
        parts = [PartSpec(p.name, p.dims, p.center, samples, p.joint, p.color) for p in self.parts]
        return ObjectSpec(parts, self.gaussian_scale, self.noise_sigma, self.seed, self.name)

    def with_seed(self, seed):
        return ObjectSpec(self.parts, self.gaussian_scale, self.noise_sigma, seed, self.name)

    def to_dict(self):
        return {
            "name": self.name,
            "gaussian_scale": self.gaussian_scale,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "parts": [{
                "name": p.name,
                "dims": list(p.dims),
                "center": list(p.center),
                "samples": p.samples,
                "color": list(p.color),
                "joint": p.joint.to_dict() if p.joint is not None else None,
            } for p in self.parts]
        }

    @classmethod
    def from_dict(cls, data):
        try:
            parts = [PartSpec(p["name"], tuple(p["dims"]), tuple(p.get("center", (0., 0., 0.))),
                              int(p.get("samples", 1000)),
                              JointSpec.from_dict(p["joint"]) if p.get("joint") is not None else None,
                              tuple(p.get("color", (0.5, 0.5, 0.5))))
                     for p in data["parts"]]
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"[artigauss] Malformed object specification: {exc}") from exc
        return cls(parts, float(data.get("gaussian_scale", 0.02)), float(data.get("noise_sigma", 0.)),
                   int(data.get("seed", 0)), data.get("name", "object"))


def load_object_spec(path_or_preset):
    path = path_or_preset
    if not os.path.isfile(path):
        path = os.path.join(PRESET_DIR, path_or_preset + ".json")
        if not os.path.isfile(path):
            raise InvalidInputError(f"[artigauss] ERROR: {path_or_preset} is neither a file nor a known preset "
                                    f"({', '.join(list_presets())}).")
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"[artigauss] Cannot read object specification {path}.") from exc
    return ObjectSpec.from_dict(data)


def list_presets():
    return sorted(fn[:-5] for fn in os.listdir(PRESET_DIR) if fn.endswith(".json"))


@dataclass
class SyntheticObject:
    state0: SceneState
    state1: SceneState
    gt_transforms: list
    joints: list
    static_part: int
    warnings: list
    spec: ObjectSpec = None

    @property
    def movable_parts(self):
        return [k for k, joint in enumerate(self.joints) if joint is not None]

    def ground_truth(self):
        from artigauss.evaluate import GroundTruth
        return GroundTruth(self.state0, self.state1, self.gt_transforms, self.state0.gt_labels,
                           self.joints, self.static_part)


def sample_box_surface(rng, dims, center, n):
    """Area-weighted uniform samples on the six faces of an axis-aligned box."""
    a, b, c = dims
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    points = (rng.uniform(size=(n, 3)) - 0.5) * np.asarray(dims, dtype=np.float64)

    axis = faces // 2
    side = np.where(faces % 2 == 0, -0.5, 0.5)
    points[np.arange(n), axis] = side * np.asarray(dims, dtype=np.float64)[axis]
    return points + np.asarray(center, dtype=np.float64)


def overlap_warnings(spec: ObjectSpec):
    warnings = []
    boxes = [(np.asarray(p.center) - 0.5 * np.asarray(p.dims), np.asarray(p.center) + 0.5 * np.asarray(p.dims))
             for p in spec.parts]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            extent = np.minimum(boxes[i][1], boxes[j][1]) - np.maximum(boxes[i][0], boxes[j][0])
            if np.all(extent > 1e-12):
                warnings.append(f"parts '{spec.parts[i].name}' and '{spec.parts[j].name}' overlap "
                                f"(volume {float(np.prod(extent)):.6g}) at state 0")
    return warnings


def make_object(spec: ObjectSpec, embedding_dim=DEFAULT_EMBEDDING_DIM):
    warnings = overlap_warnings(spec)
    for w in warnings:
        logger.warning("[artigauss] %s", w)

    part_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(spec.parts))]
    centers0, centers1, rotations1, colors, labels = [], [], [], [], []
    joints, transforms = [], []

    for k, (part, rng) in enumerate(zip(spec.parts, part_rngs)):
        points = sample_box_surface(rng, part.dims, part.center, part.samples)
        centers0.append(points)
        labels.append(np.full(part.samples, k, dtype=np.int64))
        colors.append(np.tile(np.asarray(part.color, dtype=np.float64), [part.samples, 1]))
        joints.append(part.joint)

        if part.joint is None:
            transform = PartTransform.identity()
            centers1.append(points.copy())
            rotations1.append(np.tile([1., 0., 0., 0.], [part.samples, 1]))
        else:
            transform = part.joint.to_transform()
            centers1.append(part.joint.apply(points))
            rotations1.append(np.tile(transform.rotation, [part.samples, 1]))
        transforms.append(transform)

    centers0 = np.concatenate(centers0)
    n = len(centers0)
    scales = np.full([n, 3], spec.gaussian_scale)
    rotations0 = np.tile([1., 0., 0., 0.], [n, 1])
    colors = np.concatenate(colors)
    labels = np.concatenate(labels)
    embeddings = np.zeros([n, embedding_dim])

    state0 = SceneState(centers0, rotations0, scales, None, colors, embeddings,
                        state_tag=0, gt_labels=labels, gt_transforms=transforms)
    state1 = SceneState(np.concatenate(centers1), np.concatenate(rotations1), scales, None, colors, embeddings,
                        state_tag=1, gt_labels=labels, gt_transforms=transforms)

    if spec.noise_sigma > 0:
        seed0, seed1 = np.random.SeedSequence([spec.seed, 1]).generate_state(2)
        state0 = perturb(state0, spec.noise_sigma, int(seed0))
        state1 = perturb(state1, spec.noise_sigma, int(seed1))

    return SyntheticObject(state0, state1, transforms, joints, spec.static_part, warnings, spec)


def perturb(state: SceneState, sigma, seed):
    if sigma < 0:
        raise InvalidParameterError("[artigauss] Noise sigma must be >= 0.")
    if sigma == 0:
        return state.copy()
    rng = np.random.default_rng(seed)
    return state.copy(centers=state.centers + rng.normal(0., sigma, size=state.centers.shape))
