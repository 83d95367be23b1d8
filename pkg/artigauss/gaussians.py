from dataclasses import dataclass, field, fields

import numpy as np
import scipy.ndimage

from artigauss.errors import InvalidParameterError, check_finite
from artigauss.geometry import normalize_quaternion, quat_multiply, quat_to_matrix

DEFAULT_EMBEDDING_DIM = 8
DEFAULT_SCALE = 0.01


@dataclass(frozen=True)
class GaussianRecord:
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1., 0., 0., 0.]))
    scale: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_SCALE))
    opacity: float = 1.
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(DEFAULT_EMBEDDING_DIM))

    def __post_init__(self):
        object.__setattr__(self, "center", check_finite("center", np.reshape(self.center, 3)))
        object.__setattr__(self, "rotation", normalize_quaternion(np.reshape(self.rotation, 4)))
        scale = check_finite("scale", np.reshape(self.scale, 3))
        if np.any(scale <= 0):
            raise InvalidParameterError("[artigauss] Gaussian scale components must be positive.")
        object.__setattr__(self, "scale", scale)
        opacity = float(check_finite("opacity", self.opacity))
        if not 0. <= opacity <= 1.:
            raise InvalidParameterError("[artigauss] Gaussian opacity must lie in [0, 1].")
        object.__setattr__(self, "opacity", opacity)
        object.__setattr__(self, "color", check_finite("color", np.reshape(self.color, 3)))
        object.__setattr__(self, "embedding", check_finite("embedding", np.ravel(self.embedding)))

    @property
    def covariance(self):
        return build_covariance(self.rotation, self.scale)


class SceneState:
    """A Gaussian field observed at one joint state, stored as parallel arrays.

    state_tag is 0 or 1 for an observed state and None for a fused canonical field.
    """

    def __init__(self, centers, rotations=None, scales=None, opacities=None, colors=None, embeddings=None,
                 state_tag=0, gt_labels=None, gt_transforms=None, embedding_dim=DEFAULT_EMBEDDING_DIM):
        centers = check_finite("centers", centers).reshape([-1, 3])
        n = len(centers)

        if rotations is None:
            rotations = np.tile([1., 0., 0., 0.], [n, 1])
        if scales is None:
            scales = np.full([n, 3], DEFAULT_SCALE)
        if opacities is None:
            opacities = np.ones([n])
        if colors is None:
            colors = np.full([n, 3], 0.5)
        if embeddings is None:
            embeddings = np.zeros([n, embedding_dim])

        rotations = check_finite("rotations", rotations).reshape([n, 4])
        self.rotations = normalize_quaternion(rotations) if n > 0 else rotations
        self.centers = centers.copy()
        self.scales = check_finite("scales", scales).reshape([n, 3]).copy()
        self.opacities = check_finite("opacities", opacities).reshape([n]).copy()
        self.colors = check_finite("colors", colors).reshape([n, 3]).copy()
        embeddings = check_finite("embeddings", embeddings)
        if embeddings.ndim != 2 or len(embeddings) != n:
            raise InvalidParameterError(f"[artigauss] Expected embeddings of shape ({n}, E), got {embeddings.shape}.")
        self.embeddings = embeddings.copy()

        if np.any(self.scales <= 0):
            raise InvalidParameterError("[artigauss] Gaussian scale components must be positive.")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise InvalidParameterError("[artigauss] Gaussian opacities must lie in [0, 1].")
        if state_tag not in (0, 1, None):
            raise InvalidParameterError("[artigauss] state_tag must be 0, 1 or None.")
        self.state_tag = state_tag

        self.gt_transforms = list(gt_transforms) if gt_transforms is not None else None
        self.gt_labels = None
        if gt_labels is not None:
            gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape([-1])
            if len(gt_labels) != n:
                raise InvalidParameterError(
                    f"[artigauss] gt_labels has {len(gt_labels)} entries for {n} Gaussians.")
            n_parts = len(self.gt_transforms) if self.gt_transforms is not None else None
            if n > 0 and (gt_labels.min() < 0 or (n_parts is not None and gt_labels.max() >= n_parts)):
                raise InvalidParameterError("[artigauss] gt_labels out of range.")
            self.gt_labels = gt_labels

    def __len__(self):
        return len(self.centers)

    @property
    def embedding_dim(self):
        return self.embeddings.shape[1]

    @property
    def gaussians(self):
        return [GaussianRecord(self.centers[i], self.rotations[i], self.scales[i], self.opacities[i],
                               self.colors[i], self.embeddings[i]) for i in range(len(self))]

    @classmethod
    def from_records(cls, records, state_tag=0, gt_labels=None, gt_transforms=None,
                     embedding_dim=DEFAULT_EMBEDDING_DIM):
        records = list(records)
        if len(records) == 0:
            return cls(np.zeros([0, 3]), state_tag=state_tag, gt_labels=gt_labels, gt_transforms=gt_transforms,
                       embedding_dim=embedding_dim)
        return cls(np.stack([g.center for g in records]),
                   np.stack([g.rotation for g in records]),
                   np.stack([g.scale for g in records]),
                   np.array([g.opacity for g in records]),
                   np.stack([g.color for g in records]),
                   np.stack([g.embedding for g in records]),
                   state_tag=state_tag, gt_labels=gt_labels, gt_transforms=gt_transforms)

    def copy(self, **changes):
        values = dict(centers=self.centers, rotations=self.rotations, scales=self.scales,
                      opacities=self.opacities, colors=self.colors, embeddings=self.embeddings,
                      state_tag=self.state_tag, gt_labels=self.gt_labels, gt_transforms=self.gt_transforms)
        values.update(changes)
        return SceneState(**values)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SceneState(self.centers[indices], self.rotations[indices], self.scales[indices],
                          self.opacities[indices], self.colors[indices], self.embeddings[indices],
                          state_tag=self.state_tag,
                          gt_labels=self.gt_labels[indices] if self.gt_labels is not None else None,
                          gt_transforms=self.gt_transforms)


@dataclass(frozen=True)
class LossWeights:
    """Loss term weights. lambda_rot scales the summed geodesic angle between each part
    rotation and its Procrustes target, in radians (1 degree of error costs about 0.017 x lambda_rot)."""
    lambda_render: float = 0.2
    lambda_part: float = 0.1
    lambda_art: float = 1.0
    lambda_phys: float = 0.5
    lambda_rot: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise InvalidParameterError(f"[artigauss] {f.name} must be a finite value >= 0, got {value}.")


def build_covariance(rotation, scale):
    rotation = check_finite("rotation", rotation)
    scale = check_finite("scale", scale)
    if np.any(scale <= 0):
        raise InvalidParameterError("[artigauss] Scale components must be positive.")

    rot = quat_to_matrix(rotation)
    m = rot * scale[..., None, :]
    covariance = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (covariance + np.swapaxes(covariance, -1, -2))


def eval_opacity(g: GaussianRecord, x):
    x = check_finite("x", x)
    rot = quat_to_matrix(g.rotation)
    # local coordinates in the Gaussian's frame, Sigma^-1 = R S^-2 R^T
    local = rot.T @ (x - g.center) / g.scale
    return g.opacity * float(np.exp(-0.5 * np.dot(local, local)))


_IMAGE_AXES = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}


@dataclass(frozen=True)
class OrthographicView:
    """Camera looking along sign * axis; image u/v follow the remaining axes in cyclic order."""
    axis: str = "z"
    sign: int = 1
    window: tuple = (-1., 1., -1., 1.)
    background: tuple = (1., 1., 1.)

    def __post_init__(self):
        if self.axis not in _IMAGE_AXES:
            raise InvalidParameterError("[artigauss] View axis must be one of 'x', 'y', 'z'.")
        if self.sign not in (1, -1):
            raise InvalidParameterError("[artigauss] View sign must be +1 or -1.")
        u_min, u_max, v_min, v_max = self.window
        if not (u_max > u_min and v_max > v_min):
            raise InvalidParameterError("[artigauss] Image window must have positive extent.")

    @property
    def axis_index(self):
        return "xyz".index(self.axis)

    @classmethod
    def fit(cls, centers, axis="z", sign=1, margin=0.1, background=(1., 1., 1.)):
        u, v = _IMAGE_AXES[axis]
        centers = np.asarray(centers, dtype=np.float64)
        if len(centers) == 0:
            return cls(axis, sign, background=background)
        lo, hi = centers.min(0), centers.max(0)
        half = 0.5 * max(hi[u] - lo[u], hi[v] - lo[v]) * (1. + margin) + 1e-6
        cu, cv = 0.5 * (lo[u] + hi[u]), 0.5 * (lo[v] + hi[v])
        return cls(axis, sign, (cu - half, cu + half, cv - half, cv + half), background)


def _field_arrays(field_):
    if isinstance(field_, SceneState):
        return field_.centers, field_.rotations, field_.scales, field_.opacities, field_.colors
    records = list(field_)
    if len(records) == 0:
        return np.zeros([0, 3]), np.zeros([0, 4]), np.zeros([0, 3]), np.zeros([0]), np.zeros([0, 3])
    return (np.stack([g.center for g in records]), np.stack([g.rotation for g in records]),
            np.stack([g.scale for g in records]), np.array([g.opacity for g in records]),
            np.stack([g.color for g in records]))


def render_orthographic(field_, view: OrthographicView, resolution, return_transmittance=False):
    """Front-to-back alpha compositing of the projected Gaussians.

    field_ is a SceneState or a sequence of GaussianRecord; resolution is (width, height).
    Returns an (H, W, 3) float image, plus the residual transmittance when requested.
    """
    width, height = int(resolution[0]), int(resolution[1])
    if width < 1 or height < 1:
        raise InvalidParameterError("[artigauss] Resolution must be at least 1x1.")

    centers, rotations, scales, opacities, colors = _field_arrays(field_)
    u_idx, v_idx = _IMAGE_AXES[view.axis]
    u_min, u_max, v_min, v_max = view.window

    us = u_min + (np.arange(width) + 0.5) * (u_max - u_min) / width
    vs = v_max - (np.arange(height) + 0.5) * (v_max - v_min) / height
    grid_u, grid_v = np.meshgrid(us, vs)

    image = np.zeros([height, width, 3])
    transmittance = np.ones([height, width])

    if len(centers) > 0:
        covariances = build_covariance(rotations, scales)
        depth = view.sign * centers[:, view.axis_index]
        order = np.argsort(depth, kind="stable")

        for i in order:
            a = covariances[i, u_idx, u_idx]
            b = covariances[i, u_idx, v_idx]
            c = covariances[i, v_idx, v_idx]
            det = a * c - b * b
            du = grid_u - centers[i, u_idx]
            dv = grid_v - centers[i, v_idx]
            quad = (c * du * du - 2. * b * du * dv + a * dv * dv) / det
            alpha = opacities[i] * np.exp(-0.5 * quad)

            image += (transmittance * alpha)[..., None] * colors[i]
            transmittance = transmittance * (1. - alpha)

    image += transmittance[..., None] * np.asarray(view.background, dtype=np.float64)
    if return_transmittance:
        return image, transmittance
    return image


def gaussian_window(size, sigma=1.5):
    coords = np.arange(size) - (size - 1) / 2.
    g = np.exp(-(coords ** 2) / (2. * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(image, reference, data_range=1., window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise InvalidParameterError(f"[artigauss] Image shapes differ: {image.shape} vs {reference.shape}.")
    if image.ndim == 2:
        image, reference = image[..., None], reference[..., None]

    height, width = image.shape[:2]
    size = min(window_size, height, width)
    window = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    # valid region only, where the whole window lies inside the image
    rows = slice(size // 2, height - size + size // 2 + 1)
    cols = slice(size // 2, width - size + size // 2 + 1)

    def filt(x):
        return scipy.ndimage.correlate(x, window, mode="constant")[rows, cols]

    values = []
    for ch in range(image.shape[2]):
        x, y = image[..., ch], reference[..., ch]
        mu_x, mu_y = filt(x), filt(y)
        sigma_x = filt(x * x) - mu_x * mu_x
        sigma_y = filt(y * y) - mu_y * mu_y
        sigma_xy = filt(x * y) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / \
            ((mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2))
        values.append(ssim_map)
    return float(np.mean(values))


def image_loss(image, reference, lambda_render):
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise InvalidParameterError(f"[artigauss] Image shapes differ: {image.shape} vs {reference.shape}.")
    if not 0. <= lambda_render <= 1.:
        raise InvalidParameterError("[artigauss] lambda_render must lie in [0, 1].")

    l1 = float(np.mean(np.abs(image - reference)))
    dssim = (1. - ssim(image, reference)) / 2.
    return l1, dssim, (1. - lambda_render) * l1 + lambda_render * dssim


def transform_field(state: SceneState, transforms, labels):
    """Moves each Gaussian (center and orientation) with the transform of its label."""
    centers = state.centers.copy()
    rotations = state.rotations.copy()
    for k, t in enumerate(transforms):
        mask = labels == k
        if not np.any(mask):
            continue
        centers[mask] = t.apply(state.centers[mask])
        rotations[mask] = quat_multiply(t.rotation, state.rotations[mask])
    return state.copy(centers=centers, rotations=rotations)

