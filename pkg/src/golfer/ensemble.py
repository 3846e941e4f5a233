"""Weighted k-means over pooled trajectory modes, and displacement metrics.

Model ensembling pools every mode from every member model, weighted by its
probability, and clusters the pool with Lloyd iterations in flattened
trajectory space. Cluster centroids become the ensembled modes; normalized
per-cluster weight sums become their probabilities. minADE/minFDE/miss-rate
follow the usual multi-modal definitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Prediction
from .numerics import EmptySetError


class DegenerateInputError(ValueError):
    """Clustering input cannot support the requested number of clusters."""


@dataclass
class WeightedTrajectorySet:
    trajectories: np.ndarray  # (N, T, 2)
    weights: np.ndarray  # (N,) nonnegative

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.trajectories.ndim != 3 or self.trajectories.shape[2] != 2:
            raise ValueError(f"trajectories must be (N,T,2), got {self.trajectories.shape}")
        if self.weights.shape != (self.trajectories.shape[0],):
            raise ValueError("one weight per trajectory required")
        if (self.weights < 0).any():
            raise ValueError("weights must be nonnegative")


@dataclass
class EnsembleOutput:
    centroids: np.ndarray  # (k, T, 2)
    probs: np.ndarray  # (k,), nonnegative, sums to 1


def _merge_duplicates(points: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge bytewise-identical rows, summing their weights (first-seen order).

    Keeps duplicated model pools exactly equivalent to their deduplicated
    form, draws from the rng included.
    """
    index: dict[bytes, int] = {}
    order: list[int] = []
    merged = np.zeros(len(points))
    for i, row in enumerate(points):
        key = row.tobytes()
        if key in index:
            merged[index[key]] += weights[i]
        else:
            index[key] = len(order)
            merged[len(order)] = weights[i]
            order.append(i)
    return points[order], merged[: len(order)]


def _kmeanspp_init(
    points: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Weighted k-means++ seeding: D^2-weighted sampling, weight-proportional start."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.choice(n, p=weights / weights.sum()))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        scores = weights * d2
        total = scores.sum()
        if total > 0:
            idx = int(rng.choice(n, p=scores / total))
        else:
            # Remaining mass sits on zero-weight points; fall back to farthest.
            idx = int(np.argmax(d2))
        centers[c] = points[idx]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def weighted_kmeans(
    traj_set: WeightedTrajectorySet,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 100,
    tol: float = 1e-12,
) -> EnsembleOutput:
    """Lloyd iterations in flattened 2T-dimensional space.

    Assignment breaks ties toward the lowest centroid index; centroids are
    weight-weighted member means; an emptied cluster is re-seeded to the point
    with the largest weighted squared distance to its assigned centroid. Stops
    when assignments stabilize (an exact fixed point), when the largest
    centroid movement drops below tol, or after max_iters.
    """
    if traj_set.weights.sum() <= 0:
        raise DegenerateInputError("all trajectory weights are zero")
    horizon = traj_set.trajectories.shape[1]
    points, weights = _merge_duplicates(
        traj_set.trajectories.reshape(traj_set.trajectories.shape[0], -1), traj_set.weights
    )
    n = points.shape[0]
    if n < k:
        raise DegenerateInputError(f"{n} distinct trajectories cannot form {k} clusters")

    centers = _kmeanspp_init(points, weights, k, rng)
    assign = None
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        # Re-seed empty clusters before accepting the assignment.
        for _ in range(k):
            empty = np.setdiff1d(np.arange(k), new_assign)
            if empty.size == 0:
                break
            spread = weights * d2[np.arange(n), new_assign]
            donor = int(np.argmax(spread))
            centers[empty[0]] = points[donor]
            d2[:, empty[0]] = ((points - centers[empty[0]]) ** 2).sum(axis=1)
            new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        old_centers = centers.copy()
        for c in range(k):
            members = assign == c
            centers[c] = np.average(points[members], axis=0, weights=weights[members]) \
                if weights[members].sum() > 0 else points[members].mean(axis=0)
        if np.linalg.norm(centers - old_centers, axis=1).max() < tol:
            break

    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = d2.argmin(axis=1)
    probs = np.zeros(k)
    np.add.at(probs, assign, weights)
    return EnsembleOutput(centroids=centers.reshape(k, horizon, 2), probs=probs / probs.sum())


def ensemble_predict(
    predictions: list[Prediction], k: int, rng: np.random.Generator
) -> EnsembleOutput:
    """Pool every model's modes (probabilities as weights) and cluster."""
    if not predictions:
        raise ValueError("ensemble requires at least one prediction")
    total_modes = sum(p.means.shape[0] for p in predictions)
    if total_modes < k:
        raise DegenerateInputError(f"{total_modes} pooled modes cannot form {k} clusters")
    pooled = WeightedTrajectorySet(
        trajectories=np.concatenate([p.means for p in predictions], axis=0),
        weights=np.concatenate([p.probs for p in predictions]),
    )
    return weighted_kmeans(pooled, k, rng)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def min_ade(pred_means: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Min over modes of the mean displacement over valid steps."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EmptySetError("min_ade: no valid steps")
    diffs = np.asarray(pred_means)[:, valid, :] - np.asarray(gt)[valid]
    return float(np.linalg.norm(diffs, axis=2).mean(axis=1).min())


def min_fde(pred_means: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Min over modes of the displacement at the last valid step."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EmptySetError("min_fde: no valid steps")
    last = int(np.flatnonzero(valid)[-1])
    diffs = np.asarray(pred_means)[:, last, :] - np.asarray(gt)[last]
    return float(np.linalg.norm(diffs, axis=1).min())


def miss_rate(
    pred_means_seq: list[np.ndarray],
    gt_seq: list[np.ndarray],
    valid_seq: list[np.ndarray],
    threshold_m: float = 2.0,
) -> float:
    """Fraction of samples whose best final displacement exceeds the threshold."""
    if threshold_m <= 0:
        raise ValueError("threshold_m must be positive")
    if not pred_means_seq:
        raise EmptySetError("miss_rate: empty dataset")
    misses = sum(
        1
        for means, gt, valid in zip(pred_means_seq, gt_seq, valid_seq)
        if min_fde(means, gt, valid) > threshold_m
    )
    return misses / len(pred_means_seq)
