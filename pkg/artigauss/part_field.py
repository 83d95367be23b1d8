from dataclasses import dataclass

import numpy as np
import scipy.special
import tensorflow as tf
from scipy.spatial.distance import cdist

from artigauss.errors import InvalidParameterError, check_finite

KL_FLOOR = 1e-12
_KNN_CHUNK = 512


@dataclass
class PartProjection:
    """Shared linear layer mapping an embedding to K part logits."""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = check_finite("projection weights", self.weights)
        self.bias = check_finite("projection bias", self.bias).reshape([-1])
        if self.weights.ndim != 2 or len(self.bias) != len(self.weights):
            raise InvalidParameterError(
                f"[artigauss] Projection shapes inconsistent: {self.weights.shape} vs {self.bias.shape}.")

    @property
    def n_parts(self):
        return self.weights.shape[0]

    @property
    def embedding_dim(self):
        return self.weights.shape[1]


@dataclass
class KnnGraph:
    neighbors: np.ndarray

    @property
    def k(self):
        return self.neighbors.shape[1]

    def __len__(self):
        return len(self.neighbors)


@dataclass
class AssignmentField:
    probs: np.ndarray

    def __len__(self):
        return len(self.probs)

    @property
    def n_parts(self):
        return self.probs.shape[1]


def init_projection(n_parts, embedding_dim, rng):
    if n_parts < 1 or embedding_dim < 1:
        raise InvalidParameterError("[artigauss] Need at least one part and one embedding dimension.")
    bound = 1. / np.sqrt(embedding_dim)
    return PartProjection(rng.uniform(-bound, bound, size=(n_parts, embedding_dim)), np.zeros(n_parts))


def init_embeddings(n, embedding_dim, rng):
    return rng.normal(0., 0.01, size=(n, embedding_dim))


def build_knn(centers, k=16):
    """Exact k nearest neighbours; ties go to the lower index and a point is never its own neighbour."""
    centers = check_finite("centers", centers).reshape([-1, 3])
    n = len(centers)
    if n < 2:
        raise InvalidParameterError("[artigauss] KNN graph needs at least two centers.")
    if k < 1:
        raise InvalidParameterError("[artigauss] KNN graph needs k >= 1.")
    k = min(k, n - 1)

    neighbors = np.empty([n, k], dtype=np.int64)
    for start in range(0, n, _KNN_CHUNK):
        stop = min(start + _KNN_CHUNK, n)
        dist = cdist(centers[start:stop], centers, "sqeuclidean")
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        neighbors[start:stop] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return KnnGraph(neighbors)


def assignment(embeddings, proj: PartProjection):
    embeddings = check_finite("embeddings", embeddings)
    if embeddings.ndim != 2 or embeddings.shape[1] != proj.embedding_dim:
        raise InvalidParameterError(
            f"[artigauss] Embeddings of shape {embeddings.shape} do not fit projection {proj.weights.shape}.")
    logits = embeddings @ proj.weights.T + proj.bias
    return AssignmentField(scipy.special.softmax(logits, axis=1))


def tf_assignment(embeddings, weights, bias):
    return tf.nn.softmax(tf.matmul(embeddings, weights, transpose_b=True) + bias, axis=-1)


def tf_part_loss(probs, neighbors):
    neighbor_mean = tf.reduce_mean(tf.gather(probs, neighbors), axis=1)
    # p * log p -> 0 for p = 0
    log_p = tf.math.log(tf.maximum(probs, tf.constant(1e-300, probs.dtype)))
    log_q = tf.math.log(tf.maximum(neighbor_mean, tf.constant(KL_FLOOR, probs.dtype)))
    return tf.reduce_mean(tf.reduce_sum(probs * (log_p - log_q), axis=-1))


def _probs(field_):
    return field_.probs if isinstance(field_, AssignmentField) else np.asarray(field_, dtype=np.float64)


def part_loss(field_, graph: KnnGraph):
    probs = _probs(field_)
    if len(probs) != len(graph):
        raise InvalidParameterError(f"[artigauss] {len(probs)} assignments for a {len(graph)}-node graph.")
    return float(tf_part_loss(tf.constant(probs, tf.float64), tf.constant(graph.neighbors)).numpy())


def hard_assign(field_):
    return np.argmax(_probs(field_), axis=1)
