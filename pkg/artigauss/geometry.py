"""Quaternion helpers and the per-part rigid transform type.

Quaternions are stored scalar-first (w, x, y, z) everywhere in the package; scipy's
scalar-last convention is only used at the conversion boundary.
"""
from dataclasses import dataclass

import numpy as np
import tensorflow as tf
from scipy.spatial.transform import Rotation

from artigauss.errors import InvalidParameterError, check_finite

IDENTITY_QUATERNION = np.array([1., 0., 0., 0.])


def normalize_quaternion(q):
    q = check_finite("quaternion", q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("[artigauss] Quaternion must have non-zero norm.")
    # unit quaternions pass through bit-exact so normalization is idempotent
    return np.where(np.abs(norm - 1.) <= 4 * np.finfo(np.float64).eps, q, q / norm)


def canonical_quaternion(q):
    # q and -q encode the same rotation, keep w >= 0
    q = np.array(q, dtype=np.float64)
    return np.where(q[..., :1] < 0, -q, q)


def quat_to_matrix(q):
    q = normalize_quaternion(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def matrix_to_quat(matrix):
    q = Rotation.from_matrix(np.asarray(matrix, dtype=np.float64)).as_quat()
    return canonical_quaternion(q[..., [3, 0, 1, 2]])


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(p, q):
    pw, px, py, pz = np.moveaxis(np.asarray(p, dtype=np.float64), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_slerp(p, q, t):
    """Spherical interpolation, t=1 returns p and t=0 returns q (rows are independent)."""
    p = normalize_quaternion(np.atleast_2d(p))
    q = normalize_quaternion(np.atleast_2d(q))
    dot = np.sum(p * q, axis=-1, keepdims=True)
    # take the short arc
    q = np.where(dot < 0, -q, q)
    dot = np.clip(np.abs(dot), -1., 1.)

    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    close = sin_theta < 1e-9
    safe = np.where(close, 1., sin_theta)
    wp = np.where(close, t, np.sin(t * theta) / safe)
    wq = np.where(close, 1. - t, np.sin((1. - t) * theta) / safe)
    out = wp * p + wq * q
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def random_small_rotations(rng, n, max_degrees):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    angles = np.deg2rad(rng.uniform(0., max_degrees, size=n))
    return np.stack([axis_angle_to_quat(a, angle) for a, angle in zip(axes, angles)])


def tf_quat_to_matrix(q):
    """Batched (K, 4) -> (K, 3, 3); the quaternion is normalized first."""
    q = q / tf.norm(q, axis=-1, keepdims=True)
    w, x, y, z = tf.unstack(q, axis=-1)
    return tf.stack([
        tf.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        tf.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        tf.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def tf_geodesic_angle(q1, q2):
    """Rotation angle of R1 R2^T in radians, batched over the leading axis."""
    q1 = q1 / tf.norm(q1, axis=-1, keepdims=True)
    q2 = q2 / tf.norm(q2, axis=-1, keepdims=True)
    w1, x1, y1, z1 = tf.unstack(q1, axis=-1)
    w2, x2, y2, z2 = tf.unstack(q2, axis=-1)
    # q1 * conj(q2)
    w = w1 * w2 + x1 * x2 + y1 * y2 + z1 * z2
    x = -w1 * x2 + x1 * w2 - y1 * z2 + z1 * y2
    y = -w1 * y2 + x1 * z2 + y1 * w2 - z1 * x2
    z = -w1 * z2 - x1 * y2 + y1 * x2 + z1 * w2
    vec_norm = tf.sqrt(x * x + y * y + z * z + 1e-30)
    return 2. * tf.atan2(vec_norm, tf.abs(w))


@dataclass(frozen=True)
class PartTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", normalize_quaternion(np.reshape(self.rotation, 4)))
        translation = check_finite("translation", np.reshape(self.translation, 3))
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls):
        return cls(IDENTITY_QUATERNION.copy(), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix, translation):
        return cls(matrix_to_quat(matrix), translation)

    @property
    def matrix(self):
        return quat_to_matrix(self.rotation)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + self.translation

    def inverse(self):
        matrix = self.matrix.T
        return PartTransform.from_matrix(matrix, -matrix @ self.translation)

    def compose(self, other):
        """self after other."""
        return PartTransform(quat_multiply(self.rotation, other.rotation),
                             self.matrix @ other.translation + self.translation)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["rotation"], dtype=np.float64),
                   np.asarray(data["translation"], dtype=np.float64))


def stack_transforms(transforms):
    rotations = np.stack([t.rotation for t in transforms]) if transforms else np.zeros([0, 4])
    translations = np.stack([t.translation for t in transforms]) if transforms else np.zeros([0, 3])
    return rotations, translations


def unstack_transforms(rotations, translations):
    return [PartTransform(q, t) for q, t in zip(np.asarray(rotations), np.asarray(translations))]
