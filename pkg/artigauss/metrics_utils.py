from dataclasses import dataclass

import numpy as np
import tensorflow as tf
from scipy.spatial import cKDTree

from artigauss.errors import InvalidParameterError, check_finite
from artigauss.geometry import PartTransform, canonical_quaternion
from artigauss.synthetic_objects import PRISMATIC, REVOLUTE, JointSpec

REVOLUTE_THRESHOLD = 1e-3
NO_MOTION_THRESHOLD = 1e-9
CD_CONVENTION = "mean squared nearest-neighbour distance, both directions summed, x1000"


@dataclass
class JointEstimate:
    kind: str
    axis: np.ndarray = None
    pivot: np.ndarray = None
    motion: float = 0.
    no_motion: bool = False
    # raw magnitudes of the source transform, defined for every kind
    angle_deg: float = 0.
    translation: np.ndarray = None
    rotation_axis: np.ndarray = None

    def to_dict(self):
        return {
            "kind": self.kind,
            "axis": self.axis.tolist() if self.axis is not None else None,
            "pivot": self.pivot.tolist() if self.pivot is not None else None,
            "motion": self.motion,
            "no_motion": self.no_motion,
        }


@dataclass
class JointErrors:
    ang_err: float = None
    pos_err: float = None
    motion_err: float = None
    kind_mismatch: bool = False

    def to_dict(self):
        return {"ang_err": self.ang_err, "pos_err": self.pos_err, "motion_err": self.motion_err,
                "kind_mismatch": self.kind_mismatch}


def extract_joint(t: PartTransform, threshold=REVOLUTE_THRESHOLD):
    q = canonical_quaternion(t.rotation)
    sin_half = np.linalg.norm(q[1:])
    theta = 2. * np.arctan2(sin_half, q[0])
    translation = t.translation.copy()

    rotation_axis = q[1:] / sin_half if sin_half > 0 else None
    if theta >= threshold:
        axis = rotation_axis
        # minimum-norm solution of (I - R) p = t, orthogonal to the axis
        pivot = np.linalg.pinv(np.eye(3) - t.matrix, rcond=1e-10) @ translation
        return JointEstimate(REVOLUTE, axis, pivot, float(np.rad2deg(theta)), False, float(np.rad2deg(theta)),
                             translation, rotation_axis)

    norm = np.linalg.norm(translation)
    if norm < NO_MOTION_THRESHOLD:
        return JointEstimate(PRISMATIC, None, None, 0., True, float(np.rad2deg(theta)), translation, rotation_axis)
    return JointEstimate(PRISMATIC, translation / norm, None, float(norm), False, float(np.rad2deg(theta)),
                         translation, rotation_axis)


def axis_angle_error(a, b):
    """Angle between two axis lines in degrees, ignoring direction."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(np.rad2deg(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(np.dot(a, b)))))


def line_distance(p1, a1, p2, a2):
    a1 = a1 / np.linalg.norm(a1)
    a2 = a2 / np.linalg.norm(a2)
    normal = np.cross(a1, a2)
    offset = p2 - p1
    if np.linalg.norm(normal) < 1e-8:
        return float(np.linalg.norm(np.cross(offset, a1)))
    return float(abs(np.dot(offset, normal)) / np.linalg.norm(normal))


def joint_errors(est: JointEstimate, gt: JointSpec):
    """Axis, pivot-line and motion errors of an estimate against a ground-truth joint.

    motion_err is computed from the transform magnitudes even when the kinds differ;
    the axis and position errors are None then. Revolute angles are signed about the
    ground-truth axis, so (-axis, -angle) matches and a swing the wrong way does not."""
    if gt.kind == REVOLUTE:
        theta = est.angle_deg
        axis = est.rotation_axis if est.rotation_axis is not None else est.axis
        if axis is not None and np.dot(axis, gt.axis) < 0:
            theta = -theta
        motion_err = abs(theta - np.rad2deg(gt.magnitude))
    else:
        motion_err = float(np.linalg.norm(est.translation - gt.axis * gt.magnitude))

    if est.no_motion or est.kind != gt.kind:
        return JointErrors(None, None, float(motion_err), True)

    ang_err = axis_angle_error(est.axis, gt.axis)
    pos_err = line_distance(est.pivot, est.axis, gt.pivot, gt.axis) if gt.kind == REVOLUTE else None
    return JointErrors(ang_err, pos_err, float(motion_err), False)


def chamfer(x, y):
    x = check_finite("x", x).reshape([-1, 3])
    y = check_finite("y", y).reshape([-1, 3])
    if len(x) == 0 or len(y) == 0:
        raise InvalidParameterError("[artigauss] Chamfer distance needs two non-empty point sets.")
    d_xy, _ = cKDTree(y).query(x)
    d_yx, _ = cKDTree(x).query(y)
    return float((np.mean(d_xy ** 2) + np.mean(d_yx ** 2)) * 1000.)


def penetration(movable, static, delta):
    """Mean over movable points of max(0, delta - distance to the nearest static point)."""
    movable = check_finite("movable", movable).reshape([-1, 3])
    static = check_finite("static", static).reshape([-1, 3])
    if len(movable) == 0 or len(static) == 0:
        return 0.
    distances, _ = cKDTree(static).query(movable)
    return float(np.mean(np.maximum(0., delta - distances)))


def create_eval_summaries(report, prefix="eval", step=0):
    for name, value in report.summary().items():
        if value is not None and np.isfinite(value):
            tf.summary.scalar(prefix + "/" + name, value, step=step)
