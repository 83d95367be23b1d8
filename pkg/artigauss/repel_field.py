import logging
from dataclasses import dataclass, field

import gin
import numpy as np
import tensorflow as tf
from scipy.spatial import cKDTree

from artigauss.errors import InvalidParameterError, check_finite
from artigauss.gaussians import SceneState

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RepelConfig:
    enabled: bool = True
    n_r: int = 2000
    threshold: float = 1.5
    k_r: float = 5e-4
    epsilon: float = 1e-5
    tau_max: float = 0.1
    exponent: float = 3.
    sign: float = 1.
    init_noise: float = 0.
    dynamic: bool = False
    # forces fade to zero at this distance from a repel point; 0 keeps the unbounded sum
    radius: float = 0.05
    max_neighbors: int = 16

    def __post_init__(self):
        if self.dynamic:
            raise InvalidParameterError("[artigauss] Dynamic repel point refresh is not implemented.")
        if self.n_r < 0 or self.k_r < 0:
            raise InvalidParameterError("[artigauss] n_r and k_r must be >= 0.")
        if self.threshold <= 0 or self.epsilon <= 0 or self.tau_max <= 0:
            raise InvalidParameterError("[artigauss] threshold, epsilon and tau_max must be positive.")
        if self.sign not in (1., -1.):
            raise InvalidParameterError("[artigauss] Repel sign must be +1 or -1.")
        if self.init_noise < 0:
            raise InvalidParameterError("[artigauss] init_noise must be >= 0.")
        if self.radius < 0 or self.max_neighbors < 1:
            raise InvalidParameterError("[artigauss] Repel radius must be >= 0 and max_neighbors >= 1.")


@gin.configurable("repel")
def get_repel_config(enabled=True,
                     n_r=2000,
                     threshold=1.5,
                     k_r=5e-4,
                     epsilon=1e-5,
                     tau_max=0.1,
                     exponent=3.,
                     sign=1.,
                     init_noise=0.,
                     dynamic=False,
                     radius=0.05,
                     max_neighbors=16):
    return RepelConfig(enabled, n_r, threshold, k_r, epsilon, tau_max, exponent, float(sign), init_noise, dynamic,
                       radius, max_neighbors)


@dataclass(frozen=True)
class RepelField:
    """Fixed repel points near movable/static interfaces. The point array is read-only.

    With a radius each pair contribution is scaled by (1 - d^2 / radius^2)^2 and vanishes
    beyond it; radius None is the plain inverse-power sum over all points.
    """
    points: np.ndarray
    k_r: float = 5e-4
    epsilon: float = 1e-5
    tau_max: float = 0.1
    seed: int = 0
    exponent: float = 3.
    sign: float = 1.
    no_candidates: bool = False
    warnings: list = field(default_factory=list)
    radius: float = None
    _tree: cKDTree = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        points = check_finite("repel points", self.points).reshape([-1, 3]).copy()
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        if self.k_r < 0 or self.epsilon <= 0 or self.tau_max <= 0:
            raise InvalidParameterError("[artigauss] Repel field needs k_r >= 0, epsilon > 0 and tau_max > 0.")
        if self.radius is not None and not self.radius > 0:
            raise InvalidParameterError("[artigauss] Repel radius must be positive or None.")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, config=RepelConfig(), seed=0, no_candidates=False, warnings=()):
        return cls(np.zeros([0, 3]), config.k_r, config.epsilon, config.tau_max, seed, config.exponent,
                   config.sign, no_candidates, list(warnings), radius=config.radius or None)

    def neighbors(self, positions, max_neighbors):
        """Indices of up to max_neighbors repel points within the radius of each position.

        Returns (index, valid), both (n, m); invalid slots carry index 0."""
        if self.radius is None:
            raise InvalidParameterError("[artigauss] Neighbour lists need a repel radius.")
        positions = np.asarray(positions, dtype=np.float64).reshape([-1, 3])
        m = min(max_neighbors, len(self))
        if m == 0:
            return np.zeros([len(positions), 0], np.int64), np.zeros([len(positions), 0], bool)
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.points))
        _, index = self._tree.query(positions, k=m, distance_upper_bound=self.radius)
        index = np.reshape(index, [len(positions), m])
        valid = index < len(self)
        return np.where(valid, index, 0).astype(np.int64), valid


def init_repel(canonical, labels, static_part, threshold=1.5, n_r=2000, seed=0, config=RepelConfig()):
    """Samples n_r repel points (with replacement) among the movable centers lying within
    threshold of their nearest static center."""
    centers = canonical.centers if isinstance(canonical, SceneState) else check_finite("centers", canonical)
    centers = centers.reshape([-1, 3])
    labels = np.asarray(labels, dtype=np.int64).reshape([-1])
    if threshold <= 0:
        raise InvalidParameterError("[artigauss] Repel threshold must be positive.")
    if len(labels) != len(centers):
        raise InvalidParameterError(f"[artigauss] {len(labels)} labels for {len(centers)} Gaussians.")

    static = labels == static_part
    if not np.any(static):
        raise InvalidParameterError(f"[artigauss] No Gaussian carries the static part label {static_part}.")

    movable_centers = centers[~static]
    candidates = np.zeros([0, 3])
    if len(movable_centers) > 0:
        distances, _ = cKDTree(centers[static]).query(movable_centers)
        candidates = movable_centers[distances <= threshold]

    if len(candidates) == 0:
        message = f"no movable Gaussian lies within {threshold} of the static part, repel field is empty"
        logger.warning("[artigauss] %s", message)
        return RepelField.empty(config, seed, no_candidates=True, warnings=[message])

    rng = np.random.default_rng(seed)
    points = candidates[rng.integers(0, len(candidates), size=n_r)]
    if config.init_noise > 0:
        points = points + rng.normal(0., config.init_noise, size=points.shape)
    return RepelField(points, config.k_r, config.epsilon, config.tau_max, seed, config.exponent, config.sign,
                      radius=config.radius or None)


def repel_force(mu, field_: RepelField):
    """sign * sum_j k_r (r_j - mu) / max(|r_j - mu|, eps)^p, norm-clipped to tau_max.

    mu is a single point or an (n, 3) batch.
    """
    mu = check_finite("mu", mu)
    single = mu.ndim == 1
    mu = mu.reshape([-1, 3])
    if len(field_) == 0:
        forces = np.zeros_like(mu)
    else:
        diff = field_.points[None, :, :] - mu[:, None, :]
        sq_dist = np.sum(diff * diff, axis=-1)
        weights = field_.k_r / np.maximum(sq_dist, field_.epsilon ** 2) ** (0.5 * field_.exponent)
        if field_.radius is not None:
            weights = weights * np.square(np.maximum(0., 1. - sq_dist / field_.radius ** 2))
        forces = field_.sign * np.sum(weights[..., None] * diff, axis=1)
        norms = np.linalg.norm(forces, axis=-1, keepdims=True)
        forces = forces * np.minimum(1., field_.tau_max / np.maximum(norms, 1e-300))
    return forces[0] if single else forces


def repel_forces(points, field_: RepelField, neighbors=None):
    """Batched TensorFlow form of repel_force; repel points are constants.

    neighbors is an optional (index, valid) pair from RepelField.neighbors; only those
    repel points contribute then.
    """
    if len(field_) == 0:
        return tf.zeros_like(points)
    repel = tf.constant(field_.points, points.dtype)
    if neighbors is None:
        # |x - r|^2 expanded, one (n, N_R) matrix instead of (n, N_R, 3)
        sq_dist = (tf.reduce_sum(points * points, axis=-1, keepdims=True)
                   + tf.reduce_sum(repel * repel, axis=-1)[None, :]
                   - 2. * tf.matmul(points, repel, transpose_b=True))
        weights = _tf_weights(sq_dist, field_)
        forces = field_.sign * (tf.matmul(weights, repel) - points * tf.reduce_sum(weights, axis=-1, keepdims=True))
    else:
        index, valid = neighbors
        diff = tf.gather(repel, index) - points[:, None, :]
        sq_dist = tf.reduce_sum(diff * diff, axis=-1)
        weights = _tf_weights(sq_dist, field_) * tf.cast(valid, points.dtype)
        forces = field_.sign * tf.reduce_sum(weights[..., None] * diff, axis=1)

    sq_norm = tf.reduce_sum(forces * forces, axis=-1, keepdims=True)
    norm = tf.sqrt(tf.maximum(sq_norm, 1e-300))
    return forces * tf.minimum(tf.constant(1., points.dtype), field_.tau_max / norm)


def _tf_weights(sq_dist, field_):
    weights = field_.k_r / tf.pow(tf.maximum(sq_dist, field_.epsilon ** 2), 0.5 * field_.exponent)
    if field_.radius is not None:
        weights = weights * tf.square(tf.nn.relu(1. - sq_dist / field_.radius ** 2))
    return weights
