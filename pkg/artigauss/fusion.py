import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from artigauss.errors import InvalidParameterError, check_finite
from artigauss.gaussians import SceneState
from artigauss.geometry import quat_slerp

logger = logging.getLogger(__name__)

DEFAULT_HUNGARIAN_CUTOFF = 2000


@dataclass
class MatchResult:
    pairs: np.ndarray
    total_cost: float
    unmatched_a: np.ndarray
    unmatched_b: np.ndarray
    exact: bool = True

    def __len__(self):
        return len(self.pairs)


@dataclass
class FusionReport:
    d01: float
    d10: float
    beta: float
    canonical: SceneState
    match: MatchResult

    def to_json(self):
        return {
            "d01": self.d01,
            "d10": self.d10,
            "beta": self.beta,
            "n_matched": len(self.match),
            "n_unmatched_state0": len(self.match.unmatched_a),
            "n_unmatched_state1": len(self.match.unmatched_b),
            "exact_matching": self.match.exact,
        }


def _centers(points):
    if isinstance(points, SceneState):
        return points.centers
    return check_finite("centers", points).reshape([-1, 3])


def _greedy_mutual_nn(a, b):
    """Rounds of mutual nearest neighbours among the still unmatched points."""
    free_a, free_b = np.arange(len(a)), np.arange(len(b))
    pairs = []
    while len(free_a) > 0 and len(free_b) > 0:
        dist_ab, nn_ab = cKDTree(b[free_b]).query(a[free_a])
        _, nn_ba = cKDTree(a[free_a]).query(b[free_b])
        mutual = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(free_a)))
        if len(mutual) == 0:
            # exact distance ties can break every cycle, fall back to the closest pair
            mutual = np.array([np.argmin(dist_ab)])
        pairs.append(np.stack([free_a[mutual], free_b[nn_ab[mutual]]], axis=1))
        free_a = np.delete(free_a, mutual)
        free_b = np.delete(free_b, nn_ab[mutual])
    return np.concatenate(pairs)


def match_states(a, b, hungarian_cutoff=DEFAULT_HUNGARIAN_CUTOFF):
    """Pairs the Gaussians of two states by minimum total squared center distance.

    Exact (Hungarian) up to hungarian_cutoff points per side, greedy mutual nearest
    neighbours above. With unequal counts min(|a|, |b|) pairs are formed.
    """
    a, b = _centers(a), _centers(b)
    if len(a) == 0 or len(b) == 0:
        raise InvalidParameterError("[artigauss] Cannot match an empty state.")

    exact = max(len(a), len(b)) <= hungarian_cutoff
    if exact:
        cost = cdist(a, b, "sqeuclidean")
        rows, cols = linear_sum_assignment(cost)
        pairs = np.stack([rows, cols], axis=1).astype(np.int64)
    else:
        logger.info("[artigauss] %d x %d Gaussians exceed the Hungarian cutoff %d, using greedy matching.",
                    len(a), len(b), hungarian_cutoff)
        pairs = _greedy_mutual_nn(a, b).astype(np.int64)
        pairs = pairs[np.argsort(pairs[:, 0], kind="stable")]

    total_cost = float(np.sum((a[pairs[:, 0]] - b[pairs[:, 1]]) ** 2))
    return MatchResult(pairs, total_cost,
                       np.setdiff1d(np.arange(len(a)), pairs[:, 0]),
                       np.setdiff1d(np.arange(len(b)), pairs[:, 1]),
                       exact)


def motion_richness(a, b):
    a, b = _centers(a), _centers(b)
    if len(b) == 0:
        raise InvalidParameterError("[artigauss] Motion richness needs a non-empty target set.")
    if len(a) == 0:
        return 0.
    distances, _ = cKDTree(b).query(a)
    return float(np.mean(distances))


def compute_beta(d01, d10):
    if d01 < 0 or d10 < 0:
        raise InvalidParameterError("[artigauss] Motion richness values must be >= 0.")
    if d01 + d10 == 0:
        return 0.5
    return d01 / (d01 + d10)


def fuse(state0: SceneState, state1: SceneState, match: MatchResult, beta, d01=None, d10=None):
    """Canonical field of the matched pairs, interpolated with weight beta on state 0.

    d01 and d10 are only carried into the report.
    """
    if not 0. <= beta <= 1.:
        raise InvalidParameterError(f"[artigauss] beta must lie in [0, 1], got {beta}.")
    pairs = np.asarray(match.pairs, dtype=np.int64).reshape([-1, 2])
    if len(pairs) > 0 and (pairs.min() < 0 or pairs[:, 0].max() >= len(state0) or pairs[:, 1].max() >= len(state1)):
        raise InvalidParameterError("[artigauss] Match indices out of range.")

    i0, i1 = pairs[:, 0], pairs[:, 1]
    centers = beta * state0.centers[i0] + (1. - beta) * state1.centers[i1]
    scales = beta * state0.scales[i0] + (1. - beta) * state1.scales[i1]
    opacities = beta * state0.opacities[i0] + (1. - beta) * state1.opacities[i1]
    colors = beta * state0.colors[i0] + (1. - beta) * state1.colors[i1]
    rotations = quat_slerp(state0.rotations[i0], state1.rotations[i1], beta) if len(pairs) > 0 \
        else np.zeros([0, 4])

    canonical = SceneState(centers, rotations, scales, np.clip(opacities, 0., 1.), colors, state0.embeddings[i0],
                           state_tag=None,
                           gt_labels=state0.gt_labels[i0] if state0.gt_labels is not None else None,
                           gt_transforms=state0.gt_transforms)
    return FusionReport(d01, d10, beta, canonical, match)


def fuse_states(state0: SceneState, state1: SceneState, motion_aware=True,
                hungarian_cutoff=DEFAULT_HUNGARIAN_CUTOFF):
    """match -> motion richness -> beta -> canonical field."""
    match = match_states(state0, state1, hungarian_cutoff)
    d01 = motion_richness(state0, state1)
    d10 = motion_richness(state1, state0)
    beta = compute_beta(d01, d10) if motion_aware else 0.5
    logger.info("[artigauss] Motion richness d01=%.6g d10=%.6g, beta=%.4f", d01, d10, beta)
    return fuse(state0, state1, match, beta, d01, d10)
