from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from artigauss.articulation import hard_transform
from artigauss.errors import InvalidInputError
from artigauss.gaussians import OrthographicView, SceneState, image_loss, render_orthographic, transform_field
from artigauss.metrics_utils import (CD_CONVENTION, REVOLUTE_THRESHOLD, chamfer, extract_joint, joint_errors,
                                     penetration)

SUMMARY_METRICS = ("ang_err", "pos_err", "motion_err_revolute", "motion_err_prismatic", "cd_static", "cd_movable",
                   "cd_whole", "part_accuracy", "penetration")
PENETRATION_DELTA_SOURCE = "2 x mean canonical Gaussian scale"


@dataclass
class GroundTruth:
    state0: SceneState
    state1: SceneState
    transforms: list
    labels: np.ndarray
    joints: list
    static_part: int

    @classmethod
    def from_states(cls, state0: SceneState, state1: SceneState, joints, static_part):
        return cls(state0, state1, state0.gt_transforms, state0.gt_labels, joints, static_part)


@dataclass
class EvalReport:
    joints: list
    cd_static: float
    cd_movable: float
    cd_whole: float
    cd_per_part: dict
    part_accuracy: float
    penetration: float
    render: dict = None
    metadata: dict = field(default_factory=dict)

    def summary(self):
        """Flat scalar view; worst value over joints for the joint errors."""
        def worst(key, kind=None):
            values = [j[key] for j in self.joints
                      if j[key] is not None and (kind is None or j["gt_kind"] == kind)]
            return max(values) if values else None

        return {
            "ang_err": worst("ang_err"),
            "pos_err": worst("pos_err"),
            "motion_err_revolute": worst("motion_err", "revolute"),
            "motion_err_prismatic": worst("motion_err", "prismatic"),
            "cd_static": self.cd_static,
            "cd_movable": self.cd_movable,
            "cd_whole": self.cd_whole,
            "part_accuracy": self.part_accuracy,
            "penetration": self.penetration,
        }

    def to_json(self):
        return {
            "joints": self.joints,
            "cd_static": self.cd_static,
            "cd_movable": self.cd_movable,
            "cd_whole": self.cd_whole,
            "cd_per_part": {str(k): v for k, v in self.cd_per_part.items()},
            "part_accuracy": self.part_accuracy,
            "penetration": self.penetration,
            "render": self.render,
            "metadata": self.metadata,
        }

    def to_csv_row(self, name=None):
        row = {"run": name} if name is not None else {}
        row.update(self.summary())
        return row


def _check_ground_truth(model, gt: GroundTruth):
    if gt.labels is None or gt.transforms is None or gt.joints is None:
        raise InvalidInputError("[artigauss] Ground truth needs labels, transforms and joints.")
    if len(gt.labels) != len(gt.state0) or len(gt.state0) != len(gt.state1):
        raise InvalidInputError("[artigauss] Ground-truth states and labels differ in size.")
    pairs = np.asarray(model.pairs)
    if len(pairs) != len(model.labels) or len(pairs) == 0:
        raise InvalidInputError("[artigauss] Model correspondences do not fit its labels.")
    if len(pairs) != min(len(gt.state0), len(gt.state1)) or \
            pairs[:, 0].max() >= len(gt.state0) or pairs[:, 1].max() >= len(gt.state1):
        raise InvalidInputError(f"[artigauss] Model was trained on {len(pairs)} matched Gaussians, ground truth has "
                                f"{len(gt.state0)} and {len(gt.state1)}.")


def match_parts(pred_labels, gt_labels, n_pred, n_gt):
    """Hungarian matching of predicted slots to ground-truth parts on the confusion matrix."""
    confusion = np.zeros([n_pred, n_gt], dtype=np.int64)
    np.add.at(confusion, (pred_labels, gt_labels), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    slot_for_part = {int(g): int(k) for k, g in zip(rows, cols)}
    accuracy = confusion[rows, cols].sum() / len(pred_labels)
    # parts left without a slot take the slot covering most of them
    for g in range(n_gt):
        slot_for_part.setdefault(g, int(np.argmax(confusion[:, g])))
    return slot_for_part, float(accuracy), confusion


def evaluate(model, gt: GroundTruth, render=False, view_axis="z", resolution=(64, 64), lambda_render=0.2):
    _check_ground_truth(model, gt)
    pairs = np.asarray(model.pairs)
    gt_labels = gt.labels[pairs[:, 0]]
    n_gt = len(gt.transforms)
    slot_for_part, part_accuracy, _ = match_parts(model.labels, gt_labels, model.n_parts, n_gt)

    predicted = hard_transform(model.source_centers, model.labels, model.transforms)
    observed = gt.state1.centers

    cd_per_part = {}
    for g in range(n_gt):
        mask = gt_labels == g
        if np.any(mask):
            cd_per_part[g] = chamfer(predicted[mask], observed[gt.labels == g])
    movable_parts = [g for g in cd_per_part if g != gt.static_part]
    cd_static = cd_per_part.get(gt.static_part, 0.)
    cd_movable = float(np.mean([cd_per_part[g] for g in movable_parts])) if movable_parts else 0.

    # canonical (fused) Gaussian scales, not either observed state
    delta = 2. * float(np.mean(model.canonical.scales))
    static_mask = gt_labels == gt.static_part

    joints = []
    for g, joint in enumerate(gt.joints):
        if joint is None:
            continue
        slot = slot_for_part[g]
        estimate = extract_joint(model.transforms[slot])
        errors = joint_errors(estimate, joint)
        joints.append({"part": g, "slot": slot, "gt_kind": joint.kind, "est_kind": estimate.kind,
                       "estimate": estimate.to_dict(), **errors.to_dict()})

    render_metrics = None
    if render:
        render_metrics = render_comparison(model, gt, predicted, view_axis, resolution, lambda_render)

    return EvalReport(
        joints=joints,
        cd_static=cd_static,
        cd_movable=cd_movable,
        cd_whole=chamfer(predicted, observed),
        cd_per_part=cd_per_part,
        part_accuracy=part_accuracy,
        penetration=penetration(predicted[~static_mask], predicted[static_mask], delta),
        render=render_metrics,
        metadata={
            "cd_convention": CD_CONVENTION,
            "penetration_delta": delta,
            "penetration_delta_source": PENETRATION_DELTA_SOURCE,
            "fusion_beta": model.fusion.get("beta") if model.fusion else None,
            "revolute_threshold_rad": REVOLUTE_THRESHOLD,
            "n_gaussians": int(len(pairs)),
            "n_slots": int(model.n_parts),
            "n_parts": int(n_gt),
            "static_slot": int(model.static_part),
            "angles": "degrees",
        })


def render_comparison(model, gt: GroundTruth, predicted, view_axis, resolution, lambda_render):
    view = OrthographicView.fit(gt.state1.centers, view_axis)
    field_ = transform_field(model.canonical, model.transforms, model.labels).copy(centers=predicted)
    l1, dssim, combined = image_loss(render_orthographic(field_, view, resolution),
                                     render_orthographic(gt.state1, view, resolution), lambda_render)
    return {"l1": l1, "dssim": dssim, "combined": combined, "view_axis": view_axis,
            "resolution": list(resolution)}


def ablation_deltas(reports, baseline="full"):
    """Per-variant metric differences (variant - baseline) of the summary metrics, with the
    fusion beta each run used. beta only moves the canonical field (KNN graph and repel
    placement); the articulation always maps state-0 centers onto state 1, so on states of
    equal richness the uniform-beta row matches the full run."""
    reference = reports[baseline].summary()
    rows = []
    for name, report in reports.items():
        if name == baseline:
            continue
        values = report.summary()
        row = {"variant": name, "beta": report.metadata.get("fusion_beta")}
        for metric in SUMMARY_METRICS:
            a, b = values[metric], reference[metric]
            row["delta_" + metric] = a - b if a is not None and b is not None else None
        rows.append(row)
    return rows
