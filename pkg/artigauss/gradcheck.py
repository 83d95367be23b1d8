"""Finite-difference checks of the TensorFlow gradients used by the trainer.

Every check builds a small random instance (at most 50 Gaussians and 4 parts), takes the
autodiff gradient with tf.GradientTape and compares it with central differences on a
random subset of parameter coordinates.
"""
import logging
from dataclasses import dataclass

import numpy as np
import tensorflow as tf
from scipy.spatial import cKDTree

from artigauss.articulation import (combine_losses, tf_articulation_loss, tf_contact_loss, tf_repel_term,
                                    tf_soft_positions, tf_velocity_loss, tf_vector_field_loss)
from artigauss.errors import InvalidParameterError
from artigauss.geometry import quat_to_matrix, random_small_rotations, tf_geodesic_angle
from artigauss.part_field import build_knn, tf_assignment, tf_part_loss
from artigauss.repel_field import RepelField, repel_force

logger = logging.getLogger(__name__)

GRADCHECK_LOSSES = ("part", "art", "contact", "velocity", "vector", "total")
FD_STEP = 1e-5
MAX_GAUSSIANS = 50
MAX_PARTS = 4
MAX_COORDINATES = 40
# instances closer than this to a kink of a non-smooth loss are redrawn
KINK_MARGIN = 1e-3
_MAX_DRAWS = 100


@dataclass
class GradcheckInstance:
    params: list
    loss_fn: object

    def value(self, params):
        return float(self.loss_fn([tf.constant(p, tf.float64) for p in params]).numpy())

    def gradient(self):
        params = [tf.constant(p, tf.float64) for p in self.params]
        with tf.GradientTape() as tape:
            for p in params:
                tape.watch(p)
            loss = self.loss_fn(params)
        grads = tape.gradient(loss, params)
        return np.concatenate([np.zeros(p.size) if g is None else g.numpy().ravel()
                               for p, g in zip(self.params, grads)])


def _sizes(config, rng):
    m = int(rng.integers(12, MAX_GAUSSIANS + 1))
    k = min(config.k_parts, MAX_PARTS)
    return m, max(k, 1), config.embedding_dim


def _random_field(rng, m, k, dim, stationary):
    """Embeddings and projection; stationary fields give every Gaussian the same distribution."""
    embeddings = rng.normal(0., 1., size=(m, dim))
    if stationary:
        embeddings = np.tile(embeddings[:1], [m, 1])
    return [embeddings, rng.normal(0., 1., size=(k, dim)), rng.normal(0., 0.1, size=k)]


def _random_transforms(rng, k):
    quats = random_small_rotations(rng, k, 60.)
    return [quats, rng.normal(0., 0.3, size=(k, 3))]


def _apply(quats, translations, mu):
    return np.einsum("kab,nb->nka", quat_to_matrix(quats), mu) + translations[None]


def _part_instance(config, rng, stationary):
    m, k, dim = _sizes(config, rng)
    neighbors = tf.constant(build_knn(rng.uniform(-1., 1., size=(m, 3)), min(config.knn_k, m - 1)).neighbors)

    def loss_fn(params):
        return tf_part_loss(tf_assignment(*params), neighbors)

    return GradcheckInstance(_random_field(rng, m, k, dim, stationary), loss_fn)


def _art_instance(config, rng, stationary):
    m, k, dim = _sizes(config, rng)
    mu = rng.uniform(-1., 1., size=(m, 3))
    field_params = _random_field(rng, m, k, dim, stationary)
    lambda_rot = config.weights.lambda_rot

    if stationary:
        quats, translations = _random_transforms(rng, 1)
        quats, translations = np.tile(quats, [k, 1]), np.tile(translations, [k, 1])
        target_centers = _apply(quats[:1], translations[:1], mu)[:, 0]
        target_quats = quats.copy()
        field_ = None
    else:
        for _ in range(_MAX_DRAWS):
            quats, translations = _random_transforms(rng, k)
            target_quats, _ = _random_transforms(rng, k)
            angles = tf_geodesic_angle(tf.constant(quats), tf.constant(target_quats)).numpy()
            # away from the identity and half-turn kinks of the geodesic angle
            if np.all(angles > 0.05) and np.all(angles < np.pi - 0.05):
                break
        target_centers = mu + rng.normal(0., 0.2, size=mu.shape)
        field_ = None
        if config.repel.enabled:
            field_ = _repel_instance(config, rng, mu, field_params, quats, translations)

    force_mask = tf.constant(rng.integers(0, 2, size=m).astype(np.float64))
    mu_tf = tf.constant(mu)
    targets_tf = tf.constant(target_centers)
    target_quats_tf = tf.constant(target_quats)
    # the geodesic angle has a kink at zero, stationary instances check the positional term only
    valid = tf.constant(np.full(k, not stationary))

    def loss_fn(params):
        embeddings, weights, bias, q, t = params
        probs = tf_assignment(embeddings, weights, bias)
        force = None
        if field_ is not None:
            force = tf_repel_term(mu_tf, probs, q, t, field_, force_mask)
        return tf_articulation_loss(mu_tf, probs, q, t, targets_tf, target_quats_tf, valid, lambda_rot, force)

    return GradcheckInstance(field_params + [quats, translations], loss_fn)


def _repel_instance(config, rng, mu, field_params, quats, translations):
    """A few repel points whose forces stay clear of the distance floor and the norm clip."""
    repel = config.repel
    probs = tf_assignment(*[tf.constant(p) for p in field_params])
    positions = tf_soft_positions(tf.constant(mu), probs, tf.constant(quats), tf.constant(translations)).numpy()
    for _ in range(_MAX_DRAWS):
        points = rng.uniform(-1.5, 1.5, size=(5, 3))
        field_ = RepelField(points, repel.k_r, repel.epsilon, repel.tau_max, 0, repel.exponent, repel.sign)
        distances, _ = cKDTree(points).query(positions)
        unclipped = RepelField(points, repel.k_r, repel.epsilon, np.inf, 0, repel.exponent, repel.sign)
        norms = np.linalg.norm(repel_force(positions, unclipped), axis=-1)
        if distances.min() > 0.05 and np.all(np.abs(norms / repel.tau_max - 1.) > 0.05):
            return field_
    return None


def _contact_instance(config, rng, stationary):
    m = int(rng.integers(12, MAX_GAUSSIANS + 1))
    n_static = m // 2
    static = rng.uniform(-1., 1., size=(n_static, 3))
    centroid = static.mean(axis=0)

    for _ in range(_MAX_DRAWS):
        directions = rng.normal(size=(m - n_static, 3))
        directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
        if stationary:
            # far outside the static cloud every offset points away from it
            movable = centroid + 100. * directions
        else:
            movable = centroid + rng.uniform(0.2, 1.5, size=(m - n_static, 1)) * directions
        _, nearest = cKDTree(static).query(movable)
        d_i = movable - static[nearest]
        d_k = movable - centroid
        cos = np.sum(d_i * d_k, axis=-1) / (np.linalg.norm(d_i, axis=-1) * np.linalg.norm(d_k, axis=-1))
        if np.all(np.abs(cos) > KINK_MARGIN) and (not stationary or np.all(cos > 0)):
            break
    nearest = tf.constant(nearest.astype(np.int64))

    def loss_fn(params):
        movable_, static_ = params
        return tf_contact_loss(movable_, tf.gather(static_, nearest), tf.reduce_mean(static_, axis=0))

    return GradcheckInstance([movable, static], loss_fn)


def _velocity_instance(config, rng, stationary):
    m, k, dim = _sizes(config, rng)
    displacements = rng.normal(0., 0.5, size=(m, 3))
    if stationary:
        displacements = np.tile(displacements[:1], [m, 1])

    def loss_fn(params):
        return tf_velocity_loss(params[0], tf_assignment(*params[1:]))

    return GradcheckInstance([displacements] + _random_field(rng, m, k, dim, stationary), loss_fn)


def _vector_instance(config, rng, stationary):
    m, k, dim = _sizes(config, rng)
    mu = rng.uniform(-1., 1., size=(m, 3))
    quats, translations = _random_transforms(rng, k)
    if stationary:
        quats, translations = np.tile(quats[:1], [k, 1]), np.tile(translations[:1], [k, 1])
        observed = _apply(quats[:1], translations[:1], mu)[:, 0]
    else:
        observed = mu + rng.normal(0., 0.2, size=mu.shape)
    mu_tf, observed_tf = tf.constant(mu), tf.constant(observed)

    def loss_fn(params):
        embeddings, weights, bias, q, t = params
        return tf_vector_field_loss(mu_tf, observed_tf, tf_assignment(embeddings, weights, bias), q, t)

    return GradcheckInstance(_random_field(rng, m, k, dim, stationary) + [quats, translations], loss_fn)


_BUILDERS = {
    "part": _part_instance,
    "art": _art_instance,
    "contact": _contact_instance,
    "velocity": _velocity_instance,
    "vector": _vector_instance,
}


def _total_instance(config, rng, stationary):
    """Weighted total over independent instances of every component."""
    names = list(_BUILDERS)
    instances = [_BUILDERS[name](config, rng, stationary) for name in names]
    counts = [len(inst.params) for inst in instances]

    def loss_fn(params):
        components, start = {}, 0
        for name, inst, count in zip(names, instances, counts):
            components[name] = inst.loss_fn(params[start:start + count])
            start += count
        return combine_losses(components, config.weights, config.physics_terms)

    return GradcheckInstance([p for inst in instances for p in inst.params], loss_fn)


def build_instance(loss_name, config, rng, stationary=False):
    if loss_name == "total":
        return _total_instance(config, rng, stationary)
    if loss_name not in _BUILDERS:
        raise InvalidParameterError(f"[artigauss] Unknown loss '{loss_name}', expected one of "
                                    f"{', '.join(GRADCHECK_LOSSES)}.")
    return _BUILDERS[loss_name](config, rng, stationary)


def finite_difference(instance: GradcheckInstance, coordinates, step=FD_STEP):
    flat = np.concatenate([p.ravel() for p in instance.params])
    shapes = [p.shape for p in instance.params]
    splits = np.cumsum([p.size for p in instance.params])[:-1]

    def value_at(x):
        return instance.value([part.reshape(shape) for part, shape in zip(np.split(x, splits), shapes)])

    grads = np.empty(len(coordinates))
    for i, c in enumerate(coordinates):
        x = flat.copy()
        x[c] = flat[c] + step
        plus = value_at(x)
        x[c] = flat[c] - step
        grads[i] = (plus - value_at(x)) / (2. * step)
    return grads


def gradcheck(loss_name, config, trials=20, seed=0, stationary=False):
    """Worst relative gradient error over random instances.

    With stationary=True the instances sit at a minimum of the loss and the worst absolute
    error is returned instead.
    """
    if trials < 1:
        raise InvalidParameterError("[artigauss] gradcheck needs at least one trial.")
    rng = np.random.default_rng(seed)
    worst = 0.
    for trial in range(trials):
        instance = build_instance(loss_name, config, rng, stationary)
        autodiff = instance.gradient()
        coordinates = np.sort(rng.choice(len(autodiff), size=min(MAX_COORDINATES, len(autodiff)), replace=False))
        numeric = finite_difference(instance, coordinates)
        diff = np.linalg.norm(autodiff[coordinates] - numeric)
        if stationary:
            error = float(np.max(np.abs(autodiff[coordinates] - numeric)))
        else:
            scale = max(np.linalg.norm(autodiff[coordinates]), np.linalg.norm(numeric), 1e-6)
            error = float(diff / scale)
        logger.debug("[artigauss] gradcheck %s trial %d: error %.3g", loss_name, trial, error)
        worst = max(worst, error)
    logger.info("[artigauss] gradcheck %s: worst %s error %.3g over %d trials", loss_name,
                "absolute" if stationary else "relative", worst, trials)
    return worst
