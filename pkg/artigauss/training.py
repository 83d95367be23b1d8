import json
import logging
import dataclasses
from dataclasses import dataclass, field

import gin
import numpy as np
import tensorflow as tf
from scipy.spatial import cKDTree
from tqdm import tqdm

from artigauss.articulation import (PHYSICS_TERMS, combine_losses, estimate_targets, refine_parts,
                                    tf_articulation_loss, tf_contact_loss, tf_repel_term, tf_soft_positions,
                                    tf_transformed, tf_velocity_loss, tf_vector_field_loss, total_loss)
from artigauss.errors import InvalidParameterError, NumericalFailure
from artigauss.fusion import DEFAULT_HUNGARIAN_CUTOFF, fuse_states
from artigauss.gaussians import LossWeights, SceneState
from artigauss.geometry import quat_to_matrix, random_small_rotations, unstack_transforms
from artigauss.part_field import (AssignmentField, PartProjection, assignment, build_knn, hard_assign,
                                  init_embeddings, init_projection, tf_assignment, tf_part_loss)
from artigauss.repel_field import RepelConfig, RepelField, get_repel_config, init_repel

logger = logging.getLogger(__name__)


@gin.configurable("loss_weights")
def get_loss_weights(lambda_render=0.2,
                     lambda_part=0.1,
                     lambda_art=1.0,
                     lambda_phys=0.5,
                     lambda_rot=0.1):
    return LossWeights(lambda_render, lambda_part, lambda_art, lambda_phys, lambda_rot)


@dataclass(frozen=True)
class TrainConfig:
    k_parts: int = 4
    learning_rate: float = 1e-3
    steps: int = 5000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    repel: RepelConfig = field(default_factory=RepelConfig)
    knn_k: int = 16
    embedding_dim: int = 8
    log_every: int = 100
    hungarian_cutoff: int = DEFAULT_HUNGARIAN_CUTOFF
    init_rotation_deg: float = 10.
    motion_aware_beta: bool = True
    physics_terms: tuple = PHYSICS_TERMS
    static_motion_fraction: float = 0.1
    # rigid clean-up after optimisation; tolerance is a fraction of the state-0 bounding-box diagonal
    refine_iterations: int = 10
    refine_tolerance: float = 0.01
    min_part_fraction: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "physics_terms", tuple(self.physics_terms))
        if self.steps < 1:
            raise InvalidParameterError("[artigauss] steps must be >= 1.")
        if not self.learning_rate > 0:
            raise InvalidParameterError("[artigauss] learning_rate must be positive.")
        if self.k_parts < 1 or self.knn_k < 1 or self.embedding_dim < 1 or self.log_every < 1:
            raise InvalidParameterError("[artigauss] k_parts, knn_k, embedding_dim and log_every must be >= 1.")
        unknown = set(self.physics_terms) - set(PHYSICS_TERMS)
        if unknown:
            raise InvalidParameterError(f"[artigauss] Unknown physics terms {sorted(unknown)}.")
        if not 0. <= self.static_motion_fraction < 1.:
            raise InvalidParameterError("[artigauss] static_motion_fraction must lie in [0, 1).")
        if self.refine_iterations < 0 or not self.refine_tolerance > 0 or not 0. <= self.min_part_fraction < 1.:
            raise InvalidParameterError("[artigauss] Refinement needs iterations >= 0, a positive tolerance and "
                                        "min_part_fraction in [0, 1).")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["weights"] = LossWeights(**data.get("weights", {}))
        data["repel"] = RepelConfig(**data.get("repel", {}))
        return cls(**data)


@gin.configurable("training", denylist=["seed_override"])
def get_train_config(k_parts=4,
                     learning_rate=1e-3,
                     steps=5000,
                     seed=0,
                     adam_betas=(0.9, 0.999),
                     adam_eps=1e-8,
                     knn_k=16,
                     embedding_dim=8,
                     log_every=100,
                     hungarian_cutoff=DEFAULT_HUNGARIAN_CUTOFF,
                     init_rotation_deg=10.,
                     motion_aware_beta=True,
                     physics_terms=PHYSICS_TERMS,
                     static_motion_fraction=0.1,
                     refine_iterations=10,
                     refine_tolerance=0.01,
                     min_part_fraction=0.01,
                     seed_override=None):
    return TrainConfig(k_parts, learning_rate, steps, seed if seed_override is None else seed_override,
                       get_loss_weights(), adam_betas, adam_eps, get_repel_config(), knn_k, embedding_dim,
                       log_every, hungarian_cutoff, init_rotation_deg, motion_aware_beta, physics_terms,
                       static_motion_fraction, refine_iterations, refine_tolerance, min_part_fraction)


@dataclass
class TrainedModel:
    canonical: SceneState
    assignment: AssignmentField
    transforms: list
    projection: PartProjection
    labels: np.ndarray
    source_centers: np.ndarray
    target_centers: np.ndarray
    static_part: int
    repel_field: RepelField
    fusion: dict
    pairs: np.ndarray
    loss_history: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def n_parts(self):
        return len(self.transforms)

    @property
    def final_loss(self):
        history = self.loss_history.get("loss/total")
        return float(history[-1]) if history is not None and len(history) > 0 else float("nan")


def motion_static_mask(source, target, fraction):
    """Matched pairs that barely move seed the static set."""
    displacement = np.linalg.norm(target - source, axis=-1)
    largest = displacement.max() if len(displacement) > 0 else 0.
    return displacement <= fraction * largest


class Trainer:

    def __init__(self, config: TrainConfig, summary_writer=None, log_path=None, progress=True):
        self.config = config
        self.summary_writer = summary_writer
        self.log_path = log_path
        self.progress = progress
        beta_1, beta_2 = config.adam_betas
        self.optimizer = tf.keras.optimizers.Adam(learning_rate=config.learning_rate, beta_1=beta_1,
                                                  beta_2=beta_2, epsilon=config.adam_eps)

    def _setup(self, state0: SceneState, state1: SceneState):
        cfg = self.config
        if len(state0) == 0 or len(state1) == 0:
            raise InvalidParameterError("[artigauss] Both states must contain Gaussians.")

        self.fusion = fuse_states(state0, state1, cfg.motion_aware_beta, cfg.hungarian_cutoff)
        self.canonical = self.fusion.canonical
        if len(self.canonical) < 2:
            raise InvalidParameterError("[artigauss] At least two matched Gaussians are needed.")
        pairs = self.fusion.match.pairs
        self.source = state0.centers[pairs[:, 0]]
        self.target = state1.centers[pairs[:, 1]]

        # optimization frame centred on the state-0 centroid
        self.origin = self.source.mean(axis=0)
        source_c = self.source - self.origin
        target_c = self.target - self.origin

        rng = np.random.default_rng(cfg.seed)
        m = len(self.canonical)
        embeddings = init_embeddings(m, cfg.embedding_dim, rng)
        projection = init_projection(cfg.k_parts, cfg.embedding_dim, rng)
        self.graph = build_knn(self.canonical.centers, cfg.knn_k)

        self.static_mask = motion_static_mask(self.source, self.target, cfg.static_motion_fraction)
        seed_labels = np.where(self.static_mask, 0, 1)
        self.repel_field = RepelField.empty(cfg.repel, cfg.seed)
        if cfg.repel.enabled:
            self.repel_field = init_repel(self.canonical, seed_labels, 0, cfg.repel.threshold, cfg.repel.n_r,
                                          cfg.seed, cfg.repel)
        self.centred_field = dataclasses.replace(self.repel_field, points=self.repel_field.points - self.origin)
        self.use_neighbors = self.centred_field.radius is not None and len(self.centred_field) > 0

        self.static_idx = np.flatnonzero(self.static_mask)
        self.movable_idx = np.flatnonzero(~self.static_mask)
        self.use_contact = len(self.static_idx) > 0 and len(self.movable_idx) > 0
        if not self.use_contact:
            logger.warning("[artigauss] Motion does not separate static and movable Gaussians, "
                           "contact loss disabled.")

        self.source_tf = tf.constant(source_c, tf.float64)
        self.target_tf = tf.constant(target_c, tf.float64)
        self.neighbors_tf = tf.constant(self.graph.neighbors)
        self.force_mask_tf = tf.constant((~self.static_mask).astype(np.float64))
        self.static_idx_tf = tf.constant(self.static_idx)
        self.movable_idx_tf = tf.constant(self.movable_idx)

        self.embeddings = tf.Variable(embeddings, dtype=tf.float64, name="embeddings")
        self.weights = tf.Variable(projection.weights, dtype=tf.float64, name="projection_weights")
        self.bias = tf.Variable(projection.bias, dtype=tf.float64, name="projection_bias")
        self.quats = tf.Variable(random_small_rotations(rng, cfg.k_parts, cfg.init_rotation_deg),
                                 dtype=tf.float64, name="rotations")
        self.translations = tf.Variable(np.zeros([cfg.k_parts, 3]), dtype=tf.float64, name="translations")
        self.variables = [self.embeddings, self.weights, self.bias, self.quats, self.translations]

    def compute_loss(self, nearest, target_quats, valid, repel_index, repel_valid):
        cfg = self.config
        probs = tf_assignment(self.embeddings, self.weights, self.bias)
        with tf.name_scope("losses"):
            part = tf_part_loss(probs, self.neighbors_tf)

            soft = tf_soft_positions(self.source_tf, probs, self.quats, self.translations)
            positions = soft
            force = None
            if len(self.centred_field) > 0:
                neighbors = (repel_index, repel_valid) if self.use_neighbors else None
                force = tf_repel_term(self.source_tf, probs, self.quats, self.translations, self.centred_field,
                                      self.force_mask_tf, neighbors)
                positions = positions + force
            art = tf_articulation_loss(self.source_tf, probs, self.quats, self.translations, self.target_tf,
                                       target_quats, valid, cfg.weights.lambda_rot, force)

            contact = tf.constant(0., tf.float64)
            if self.use_contact:
                static_positions = tf.gather(positions, self.static_idx_tf)
                contact = tf_contact_loss(tf.gather(positions, self.movable_idx_tf),
                                          tf.gather(static_positions, nearest),
                                          tf.reduce_mean(static_positions, axis=0))
            # residual velocity not explained by the soft rigid prediction
            velocity = tf_velocity_loss(self.target_tf - positions, probs)
            vector = tf_vector_field_loss(self.source_tf, self.target_tf, probs, self.quats, self.translations)

            losses = {"part": part, "art": art, "contact": contact, "velocity": velocity, "vector": vector}
            total = combine_losses(losses, cfg.weights, cfg.physics_terms)
        return total, losses, positions, soft, probs

    @tf.function(autograph=False)
    def train_step(self, nearest, target_quats, valid, repel_index, repel_valid):
        with tf.GradientTape() as tape:
            total, losses, positions, soft, probs = self.compute_loss(nearest, target_quats, valid, repel_index,
                                                                      repel_valid)
        grads = tape.gradient(total, self.variables)
        grads = [tf.zeros_like(v) if g is None else g for g, v in zip(grads, self.variables)]
        return total, losses, grads, tf.linalg.global_norm(grads), positions, soft, probs

    def _nearest_static(self, positions):
        if not self.use_contact:
            return tf.zeros([0], tf.int64)
        _, nearest = cKDTree(positions[self.static_idx]).query(positions[self.movable_idx])
        return tf.constant(nearest.astype(np.int64))

    def _repel_neighbors(self, soft_positions):
        if not self.use_neighbors:
            return tf.zeros([0, 0], tf.int64), tf.zeros([0, 0], tf.bool)
        index, valid = self.centred_field.neighbors(soft_positions, self.config.repel.max_neighbors)
        return tf.constant(index), tf.constant(valid)

    def fit(self, state0: SceneState, state1: SceneState):
        cfg = self.config
        self._setup(state0, state1)
        source_c = self.source - self.origin
        target_c = self.target - self.origin

        probs = assignment(self.embeddings.numpy(), PartProjection(self.weights.numpy(), self.bias.numpy())).probs
        positions = (np.einsum("nk,nka->na", probs,
                               tf_transformed(self.source_tf, self.quats, self.translations).numpy()))
        soft = positions
        history = []
        log_file = open(self.log_path, "w") if self.log_path is not None else None

        try:
            steps = tqdm(range(cfg.steps), desc="[artigauss] Training", disable=not self.progress)
            for step in steps:
                targets = estimate_targets(source_c, target_c, probs)
                total, losses, grads, grad_norm, positions_tf, soft_tf, probs_tf = self.train_step(
                    self._nearest_static(positions), tf.constant(targets.target_rotations),
                    tf.constant(targets.valid), *self._repel_neighbors(soft))

                values = {name: float(value.numpy()) for name, value in losses.items()}
                try:
                    _, breakdown = total_loss(values, cfg.weights, cfg.physics_terms)
                except NumericalFailure as exc:
                    raise NumericalFailure(f"[artigauss] Training diverged at step {step}: "
                                           f"'{exc.component}' is not finite.",
                                           component=exc.component, step=step,
                                           breakdown={"loss/" + k: v for k, v in values.items()}) from exc
                grad_norm = float(grad_norm.numpy())
                if not np.isfinite(grad_norm):
                    raise NumericalFailure(f"[artigauss] Training diverged at step {step}: non-finite gradients.",
                                           component="gradients", step=step, breakdown=breakdown)

                self.optimizer.apply_gradients(zip(grads, self.variables))
                self.quats.assign(self.quats / tf.norm(self.quats, axis=-1, keepdims=True))

                breakdown["grads/norm"] = grad_norm
                history.append(breakdown)
                positions = positions_tf.numpy()
                soft = soft_tf.numpy()
                probs = probs_tf.numpy()

                if step % cfg.log_every == 0 or step == cfg.steps - 1:
                    steps.set_postfix(loss="{:.6g}".format(breakdown["loss/total"]))
                    if log_file is not None:
                        log_file.write(json.dumps({"step": step, **breakdown}) + "\n")
                    if self.summary_writer is not None:
                        with self.summary_writer.as_default():
                            for name, value in breakdown.items():
                                tf.summary.scalar(name, value, step=step)
        finally:
            if log_file is not None:
                log_file.close()

        return self._finish(history)

    def _finish(self, history):
        projection = PartProjection(self.weights.numpy(), self.bias.numpy())
        embeddings = self.embeddings.numpy()
        field_ = assignment(embeddings, projection)
        labels = hard_assign(field_)

        # back to world coordinates: t = t_c + c - R c
        quats = self.quats.numpy()
        quats = quats / np.linalg.norm(quats, axis=-1, keepdims=True)
        matrices = quat_to_matrix(quats)
        translations = self.translations.numpy() + self.origin - matrices @ self.origin
        transforms = unstack_transforms(quats, translations)
        labels, transforms = self._refine(labels, transforms)

        loss_history = {key: np.array([entry[key] for entry in history]) for key in history[0]}
        return TrainedModel(
            canonical=self.canonical.copy(embeddings=embeddings),
            assignment=field_,
            transforms=transforms,
            projection=projection,
            labels=labels,
            source_centers=self.source,
            target_centers=self.target,
            static_part=self._static_slot(labels, transforms),
            repel_field=self.repel_field,
            fusion=self.fusion.to_json(),
            pairs=self.fusion.match.pairs,
            loss_history=loss_history,
            config=self.config.to_dict())

    def _refine(self, labels, transforms):
        cfg = self.config
        tolerance = cfg.refine_tolerance * float(np.linalg.norm(np.ptp(self.source, axis=0)))
        if cfg.refine_iterations == 0 or not tolerance > 0:
            return labels, transforms
        min_size = max(3, int(cfg.min_part_fraction * len(self.source)))
        refined, transforms = refine_parts(self.source, self.target, labels, transforms, tolerance,
                                           cfg.refine_iterations, min_size)
        logger.info("[artigauss] Rigid refinement relabelled %d of %d Gaussians, part sizes %s.",
                    int(np.count_nonzero(refined != labels)), len(labels),
                    np.bincount(refined, minlength=len(transforms)).tolist())
        return refined, transforms

    def _static_slot(self, labels, transforms):
        if np.any(self.static_mask):
            return int(np.argmax(np.bincount(labels[self.static_mask], minlength=len(transforms))))
        motion = [np.mean(np.linalg.norm(t.apply(self.source) - self.source, axis=-1)) for t in transforms]
        return int(np.argmin(motion))


def fit(state0: SceneState, state1: SceneState, config: TrainConfig = None, summary_writer=None, log_path=None,
        progress=True):
    config = config if config is not None else TrainConfig()
    return Trainer(config, summary_writer, log_path, progress).fit(state0, state1)
