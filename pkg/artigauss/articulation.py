"""Per-part rigid motion: soft transform application, Procrustes targets and the
articulation and physics losses.

The losses are written once with TensorFlow ops (the tf_* functions) so the trainer can
differentiate them; the public functions wrap them for numpy inputs.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import tensorflow as tf
from scipy.spatial import cKDTree

from artigauss.errors import InvalidParameterError, NumericalFailure, check_finite
from artigauss.gaussians import LossWeights, SceneState
from artigauss.geometry import (PartTransform, matrix_to_quat, quat_to_matrix, stack_transforms,
                                tf_geodesic_angle, tf_quat_to_matrix)
from artigauss.part_field import AssignmentField
from artigauss.repel_field import RepelField, repel_forces

PHYSICS_TERMS = ("contact", "velocity", "vector")
LOSS_NAMES = ("render", "part", "art") + PHYSICS_TERMS


@dataclass
class ObservationTargets:
    """Matched observed positions (mu_hat, per Gaussian) and per-part target rotations."""
    target_centers: np.ndarray
    target_rotations: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.target_centers = check_finite("target centers", self.target_centers).reshape([-1, 3])
        self.target_rotations = check_finite("target rotations", self.target_rotations).reshape([-1, 4])
        if self.valid is None:
            self.valid = np.ones(len(self.target_rotations), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool).reshape([-1])
        if len(self.valid) != len(self.target_rotations):
            raise InvalidParameterError("[artigauss] One validity flag per target rotation expected.")


def _to_tf(x):
    return tf.constant(np.asarray(x, dtype=np.float64), tf.float64)


def _probs(assignment_):
    if isinstance(assignment_, AssignmentField):
        return assignment_.probs
    return check_finite("assignment", assignment_)


def _centers(points):
    if isinstance(points, SceneState):
        return points.centers
    return check_finite("centers", points).reshape([-1, 3])


def tf_transformed(mu, quats, translations):
    """(n, K, 3) positions R_k mu_i + t_k."""
    return tf.einsum("kab,nb->nka", tf_quat_to_matrix(quats), mu) + translations[None, :, :]


def tf_soft_positions(mu, probs, quats, translations):
    return tf.einsum("nk,nka->na", probs, tf_transformed(mu, quats, translations))


def apply_soft(mu0, probs, transforms, force=None):
    """sum_k p_k (R_k mu0 + t_k) + force for a single point or an (n, 3) batch."""
    mu0 = check_finite("mu0", mu0)
    single = mu0.ndim == 1
    mu0 = mu0.reshape([-1, 3])
    probs = check_finite("probs", probs).reshape([len(mu0), -1])
    if probs.shape[1] != len(transforms):
        raise InvalidParameterError(f"[artigauss] {probs.shape[1]} probabilities for {len(transforms)} transforms.")

    rotations, translations = stack_transforms(transforms)
    moved = np.einsum("kab,nb->nka", quat_to_matrix(rotations), mu0) + translations[None]
    out = np.einsum("nk,nka->na", probs, moved)
    if force is not None:
        out = out + check_finite("force", force).reshape([-1, 3])
    return out[0] if single else out


def rotation_angle(q1, q2):
    """Geodesic angle between two rotations, in degrees."""
    m = quat_to_matrix(q1) @ np.swapaxes(quat_to_matrix(q2), -1, -2)
    cos = (np.trace(m, axis1=-2, axis2=-1) - 1.) / 2.
    return np.rad2deg(np.arccos(np.clip(cos, -1., 1.)))


def weighted_kabsch(src, dst, weights):
    src = check_finite("source points", src).reshape([-1, 3])
    dst = check_finite("target points", dst).reshape([-1, 3])
    weights = check_finite("weights", weights).reshape([-1])
    if len(src) < 3:
        raise InvalidParameterError("[artigauss] Procrustes fit needs at least 3 pairs.")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidParameterError("[artigauss] Procrustes weights must be >= 0 with a positive total.")

    w = weights / weights.sum()
    src_mean = w @ src
    dst_mean = w @ dst
    h = (src - src_mean).T @ ((dst - dst_mean) * w[:, None])
    u, s, vt = scipy.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise InvalidParameterError("[artigauss] Degenerate Procrustes configuration (rank < 2).")

    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1., 1., d if d != 0 else 1.]) @ u.T
    return rotation, dst_mean - rotation @ src_mean


def procrustes_target(pairs, weights):
    """Weighted rigid fit mapping pairs[:, 0] onto pairs[:, 1]; returns (quaternion, translation)."""
    pairs = check_finite("pairs", pairs).reshape([-1, 2, 3])
    rotation, translation = weighted_kabsch(pairs[:, 0], pairs[:, 1], weights)
    return matrix_to_quat(rotation), translation


def estimate_targets(source, target, probs, min_weight=1e-6):
    """Per-slot Procrustes rotations under the current soft assignment.

    Slots whose fit is degenerate are marked invalid and keep the identity."""
    n_parts = probs.shape[1]
    rotations = np.tile([1., 0., 0., 0.], [n_parts, 1])
    valid = np.zeros(n_parts, dtype=bool)
    for k in range(n_parts):
        weights = np.where(probs[:, k] > min_weight, probs[:, k], 0.)
        if np.count_nonzero(weights) < 3:
            continue
        try:
            rotations[k], _ = procrustes_target(np.stack([source, target], axis=1), weights)
            valid[k] = True
        except InvalidParameterError:
            continue
    return ObservationTargets(target, rotations, valid)


def tf_repel_term(mu, probs, quats, translations, field_: RepelField, force_mask=None, neighbors=None):
    """Force at the soft-transformed positions, zero where force_mask is 0."""
    force = repel_forces(tf_soft_positions(mu, probs, quats, translations), field_, neighbors)
    if force_mask is not None:
        force = force * force_mask[:, None]
    return force


def tf_articulation_loss(mu, probs, quats, translations, target_centers, target_quats, valid, lambda_rot,
                         force=None):
    residual = tf_transformed(mu, quats, translations) - target_centers[:, None, :]
    if force is not None:
        residual = residual + force[:, None, :]
    positional = tf.reduce_sum(probs * tf.reduce_sum(residual * residual, axis=-1))
    angles = tf_geodesic_angle(quats, target_quats)
    rotational = tf.reduce_sum(tf.where(valid, angles, tf.zeros_like(angles)))
    return positional + lambda_rot * rotational


def articulation_loss(canonical, assignment_, transforms, field_, targets: ObservationTargets, lambda_rot,
                      force_mask=None):
    mu = _centers(canonical)
    probs = _probs(assignment_)
    quats, translations = stack_transforms(transforms)
    if len(targets.target_centers) != len(mu) or len(targets.target_rotations) != len(transforms):
        raise InvalidParameterError("[artigauss] Observation targets do not fit the field and parts.")
    mu, probs, quats, translations = _to_tf(mu), _to_tf(probs), _to_tf(quats), _to_tf(translations)
    force = None
    if field_ is not None and len(field_) > 0:
        force = tf_repel_term(mu, probs, quats, translations, field_,
                              _to_tf(force_mask) if force_mask is not None else None)
    loss = tf_articulation_loss(mu, probs, quats, translations, _to_tf(targets.target_centers),
                                _to_tf(targets.target_rotations), tf.constant(targets.valid), lambda_rot, force)
    return float(loss.numpy())


def tf_contact_loss(movable, nearest_static, centroid, weights=None):
    """Mean hinge max(0, -cos phi) between (x - nearest static) and (x - static centroid)."""
    d_i = movable - nearest_static
    d_k = movable - centroid[None, :]
    dot = tf.reduce_sum(d_i * d_k, axis=-1)
    sq_norms = tf.reduce_sum(d_i * d_i, axis=-1) * tf.reduce_sum(d_k * d_k, axis=-1)
    # zero-norm vectors contribute 0, with finite gradients
    defined = sq_norms > 1e-300
    cos = dot / tf.sqrt(tf.where(defined, sq_norms, tf.ones_like(sq_norms)))
    hinge = tf.where(defined, tf.nn.relu(-cos), tf.zeros_like(cos))
    if weights is None:
        return tf.reduce_mean(hinge)
    return tf.reduce_sum(weights * hinge) / tf.maximum(tf.reduce_sum(weights), 1e-300)


def contact_loss(movable_centers, static_centers, static_centroid, nearest=None, weights=None):
    movable = _centers(movable_centers)
    static = _centers(static_centers)
    if len(movable) == 0 or len(static) == 0:
        raise InvalidParameterError("[artigauss] Contact loss needs non-empty movable and static sets.")
    if nearest is None:
        _, nearest = cKDTree(static).query(movable)
    loss = tf_contact_loss(_to_tf(movable), _to_tf(static[np.asarray(nearest)]),
                           _to_tf(np.reshape(static_centroid, 3)),
                           _to_tf(weights) if weights is not None else None)
    return float(loss.numpy())


def tf_velocity_loss(displacements, probs):
    """sum_k trace of the p_k-weighted (population) covariance of the displacements."""
    total = tf.reduce_sum(probs, axis=0)
    safe_total = tf.where(total > 0, total, tf.ones_like(total))
    mean = tf.matmul(probs, displacements, transpose_a=True) / safe_total[:, None]
    deviation = displacements[:, None, :] - mean[None, :, :]
    spread = tf.reduce_sum(probs * tf.reduce_sum(deviation * deviation, axis=-1), axis=0)
    return tf.reduce_sum(spread / safe_total)


def velocity_loss(displacements, assignment_):
    displacements = check_finite("displacements", displacements).reshape([-1, 3])
    probs = _probs(assignment_)
    if len(probs) != len(displacements):
        raise InvalidParameterError("[artigauss] One assignment row per displacement expected.")
    return float(tf_velocity_loss(_to_tf(displacements), _to_tf(probs)).numpy())


def tf_vector_field_loss(mu, observed, probs, quats, translations):
    residual = tf_transformed(mu, quats, translations) - observed[:, None, :]
    return tf.reduce_sum(probs * tf.reduce_sum(residual * residual, axis=-1))


def vector_field_loss(canonical_centers, observed_centers, assignment_, transforms):
    mu = _centers(canonical_centers)
    observed = _centers(observed_centers)
    if len(mu) != len(observed):
        raise InvalidParameterError("[artigauss] Canonical and observed centers must be index-aligned.")
    quats, translations = stack_transforms(transforms)
    loss = tf_vector_field_loss(_to_tf(mu), _to_tf(observed), _to_tf(_probs(assignment_)),
                                _to_tf(quats), _to_tf(translations))
    return float(loss.numpy())


def combine_losses(components, weights: LossWeights, physics_terms=PHYSICS_TERMS):
    """Differentiable total; components maps loss names to scalars (tensors or floats)."""
    physics = sum(components.get(name, 0.) for name in physics_terms)
    return (components.get("render", 0.)
            + weights.lambda_part * components.get("part", 0.)
            + weights.lambda_art * components.get("art", 0.)
            + weights.lambda_phys * physics)


def total_loss(components, weights: LossWeights, physics_terms=PHYSICS_TERMS):
    values = {}
    for name, value in components.items():
        if name not in LOSS_NAMES:
            raise InvalidParameterError(f"[artigauss] Unknown loss component '{name}'.")
        value = float(value)
        if not np.isfinite(value):
            raise NumericalFailure(f"[artigauss] Loss component '{name}' is not finite ({value}).", component=name)
        values[name] = value

    breakdown = {"loss/" + name: values.get(name, 0.) for name in LOSS_NAMES}
    breakdown["weighted/part"] = weights.lambda_part * values.get("part", 0.)
    breakdown["weighted/art"] = weights.lambda_art * values.get("art", 0.)
    breakdown["weighted/phys"] = weights.lambda_phys * sum(values.get(name, 0.) for name in physics_terms)
    total = values.get("render", 0.) + breakdown["weighted/part"] + breakdown["weighted/art"] + \
        breakdown["weighted/phys"]
    breakdown["loss/total"] = total
    return total, breakdown


def hard_transform(state_centers, labels, transforms):
    """Moves each center rigidly with the transform of its hard label."""
    out = np.array(state_centers, dtype=np.float64, copy=True)
    for k, t in enumerate(transforms):
        mask = labels == k
        if np.any(mask):
            out[mask] = t.apply(out[mask])
    return out


TRIM_FACTOR = 3.
TRIM_ROUNDS = 10
SEED_CANDIDATES = 8
MERGE_FRACTION = 0.95


def trimmed_fit(src, dst, fallback: PartTransform, floor=0.):
    """Rigid fit of src onto dst that drops pairs beyond TRIM_FACTOR x the median residual
    (or floor) and refits. Returns fallback when fewer than 3 pairs or a degenerate set remain."""
    if len(src) < 3:
        return fallback
    keep = np.ones(len(src), dtype=bool)
    result = fallback
    for _ in range(TRIM_ROUNDS):
        try:
            rotation, translation = weighted_kabsch(src[keep], dst[keep], np.ones(np.count_nonzero(keep)))
        except InvalidParameterError:
            break
        result = PartTransform.from_matrix(rotation, translation)
        residual = np.linalg.norm(src @ rotation.T + translation - dst, axis=1)
        inliers = residual <= max(TRIM_FACTOR * np.median(residual), floor)
        if np.count_nonzero(inliers) < 3 or np.array_equal(inliers, keep):
            break
        keep = inliers
    return result


def rigid_residuals(source, target, transforms):
    """(n, K) distances |T_k source_i - target_i|."""
    return np.stack([np.linalg.norm(t.apply(source) - target, axis=1) for t in transforms], axis=1)


def _seed_transform(source, target, pool, tolerance, patch_size):
    """Best local rigid fit among patches around unexplained Gaussians, by the number of
    pool members it explains."""
    displacement = np.linalg.norm(target[pool] - source[pool], axis=1)
    order = np.argsort(-displacement, kind="stable")
    tree = cKDTree(source[pool])
    best, best_hits = None, np.zeros(0, dtype=np.int64)
    for seed in order[np.linspace(0, len(order) - 1, min(SEED_CANDIDATES, len(order))).astype(np.int64)]:
        _, patch = tree.query(source[pool[seed]], k=min(patch_size, len(pool)))
        patch = np.atleast_1d(patch)
        try:
            rotation, translation = weighted_kabsch(source[pool[patch]], target[pool[patch]], np.ones(len(patch)))
        except InvalidParameterError:
            continue
        candidate = PartTransform.from_matrix(rotation, translation)
        hits = pool[np.linalg.norm(candidate.apply(source[pool]) - target[pool], axis=1) <= tolerance]
        if len(hits) > len(best_hits):
            best, best_hits = candidate, hits
    return best, best_hits


def refine_parts(source, target, labels, transforms, tolerance, iterations=10, min_size=3, patch_size=24):
    """Rigid clean-up of a hard partition of matched pairs (source -> target).

    Each round refits every slot with trimmed_fit, moves Gaussians their own slot does not
    explain (residual > tolerance) to a slot that does, retires slots whose members are
    explained by a larger slot (they inherit its transform) and re-seeds retired or
    unsupported slots on the Gaussians no slot explains. Returns (labels, transforms).
    """
    source = check_finite("source", source).reshape([-1, 3])
    target = check_finite("target", target).reshape([-1, 3])
    labels = np.array(labels, dtype=np.int64).reshape([-1])
    transforms = list(transforms)
    if len(source) != len(target) or len(labels) != len(source):
        raise InvalidParameterError("[artigauss] Refinement needs index-aligned source, target and labels.")
    if not tolerance > 0:
        raise InvalidParameterError("[artigauss] Refinement tolerance must be positive.")

    n, n_parts = len(source), len(transforms)
    rows = np.arange(n)
    floor = 1e-6 * tolerance
    merged_into = {}
    for _ in range(iterations):
        transforms = [trimmed_fit(source[labels == k], target[labels == k], t, floor)
                      for k, t in enumerate(transforms)]
        residual = rigid_residuals(source, target, transforms)
        explained = residual <= tolerance
        support = np.array([np.count_nonzero(explained[labels == k, k]) for k in range(n_parts)])
        active = support >= min_size

        for j in np.argsort(support, kind="stable"):
            own = (labels == j) & explained[:, j]
            for i in np.argsort(-support, kind="stable"):
                if i != j and active[i] and active[j] and support[i] >= support[j] and \
                        np.mean(explained[own, i]) >= MERGE_FRACTION:
                    active[j] = False
                    merged_into[int(j)] = int(i)
                    break

        residual = np.where(active[None, :], residual, np.inf)
        best = np.argmin(residual, axis=1)
        keep = active[labels] & explained[rows, labels]
        new_labels = np.where(~keep & (residual[rows, best] <= tolerance), best, labels)

        pool = np.flatnonzero(~np.any(explained & active[None, :], axis=1))
        seeded = False
        for k in np.flatnonzero(~active):
            if len(pool) < min_size:
                break
            candidate, hits = _seed_transform(source, target, pool, tolerance, patch_size)
            if candidate is None or len(hits) < min_size:
                break
            transforms[k] = candidate
            new_labels[hits] = k
            merged_into.pop(int(k), None)
            pool = np.setdiff1d(pool, hits)
            seeded = True

        if not seeded and np.array_equal(new_labels, labels):
            break
        labels = new_labels

    transforms = [trimmed_fit(source[labels == k], target[labels == k], t, floor) for k, t in enumerate(transforms)]
    for j, i in merged_into.items():
        while i in merged_into:
            i = merged_into[i]
        if not np.any(labels == j):
            transforms[j] = transforms[i]
    return labels, transforms
