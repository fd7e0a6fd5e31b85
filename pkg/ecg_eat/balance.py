"""
Class balancing of flattened feature vectors.

ADASYN weights each minority sample by the share of other-class points among its k nearest
neighbours and spends more of the synthetic budget where that share is high; SMOTE spends it
uniformly. Both interpolate between a minority sample and one of its same-class neighbours.
Every non-majority class is raised to the majority count, one class at a time, with the class
sub-seed `seed + class index` (index in sorted label order).
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import entropy

from ecg_eat.module_utils.errors import DegenerateInputWarning, require
from ecg_eat.module_utils.rng import make_rng

LOGGER = logging.getLogger(__name__)


@dataclass(eq=False)
class LabeledMatrix:
    """N x d feature matrix with one label per row."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y)
        require(self.X.shape[0] == self.y.shape[0], f"{self.X.shape[0]} rows but {self.y.shape[0]} labels")

    @property
    def class_counts(self):
        labels, counts = np.unique(self.y, return_counts=True)
        return {str(label): int(count) for label, count in zip(labels, counts)}

    @property
    def labels(self):
        return [str(label) for label in np.unique(self.y)]

    def __len__(self):
        return self.X.shape[0]


@dataclass
class OversampleReport:
    """Per-class difficulty, allocation and generated counts of one balancing run."""

    per_sample_difficulty: dict = field(default_factory=dict)
    allocation: dict = field(default_factory=dict)
    generated: dict = field(default_factory=dict)
    uniform_fallback: dict = field(default_factory=dict)

    @property
    def total_generated(self):
        return int(sum(self.generated.values()))

    def to_dict(self):
        return {
            "per_sample_difficulty": {k: [float(r) for r in v] for k, v in self.per_sample_difficulty.items()},
            "allocation": {k: [int(g) for g in v] for k, v in self.allocation.items()},
            "generated": dict(self.generated),
            "uniform_fallback": dict(self.uniform_fallback),
        }


# #############################################################################
# NEIGHBOURS
# #############################################################################
def knn_indices(X, i, k):
    """Indices of the k rows nearest to row i (Euclidean), i excluded, ties to the lower index."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    require(0 <= i < n, f"row {i} out of range for {n} rows")
    require(1 <= k < n, f"k must be in [1, {n - 1}], got {k}")
    require(bool(np.all(np.isfinite(X))), "feature matrix has non-finite entries")
    distances = cdist(X[i : i + 1], X)[0]
    distances[i] = np.inf
    return np.argsort(distances, kind="stable")[:k]


def largest_remainder(weights, total):
    """Round non-negative `weights` (summing to `total`) to integers that sum to `total` exactly."""
    floors = np.floor(weights).astype(int)
    short = int(total - floors.sum())
    if short > 0:
        order = np.argsort(-(weights - floors), kind="stable")
        floors[order[:short]] += 1
    return floors


def uniform_allocation(n, total):
    """`total` split over n samples; the first `total mod n` samples get one extra."""
    allocation = np.full(n, total // n, dtype=int)
    allocation[: total % n] += 1
    return allocation


# #############################################################################
# OVERSAMPLING
# #############################################################################
def _difficulty(X, y, label, k):
    members = np.flatnonzero(y == label)
    return np.array([np.mean(y[knn_indices(X, i, k)] != label) for i in members])


def _interpolate(X_class, allocation, k, rng, fixed_lambda):
    n_neighbours = min(k, X_class.shape[0] - 1)
    rows = []
    for i, count in enumerate(allocation):
        if count == 0:
            continue
        neighbours = knn_indices(X_class, i, n_neighbours)
        for _ in range(count):
            j = neighbours[rng.integers(n_neighbours)]
            lam = rng.uniform(0.0, 1.0) if fixed_lambda is None else fixed_lambda
            rows.append(X_class[i] + lam * (X_class[j] - X_class[i]))
    return np.array(rows).reshape(-1, X_class.shape[1])


def _oversample(data, k, seed, adaptive, fixed_lambda):
    counts = data.class_counts
    require(len(counts) >= 2, "at least two classes are needed to balance")
    require(k >= 1 and k < len(data), f"k must be in [1, {len(data) - 1}], got {k}")
    require(fixed_lambda is None or 0.0 <= fixed_lambda <= 1.0, "fixed_lambda must lie in [0, 1]")
    labels = sorted(counts)
    y_str = data.y.astype(str)
    majority = max(labels, key=lambda label: (counts[label], -labels.index(label)))
    report = OversampleReport()
    X_parts, y_parts = [data.X], [data.y]

    for class_index, label in enumerate(labels):
        budget = counts[majority] - counts[label]
        if label == majority or budget == 0:
            report.generated[label] = 0
            continue
        require(counts[label] >= 2, f"class {label} needs at least two samples to interpolate")
        members = np.flatnonzero(y_str == label)
        r = _difficulty(data.X, y_str, label, k)
        fallback = False
        if not adaptive:
            allocation = uniform_allocation(members.size, budget)
        elif r.sum() == 0:
            warnings.warn(f"class {label}: no other-class neighbours, uniform allocation used", DegenerateInputWarning)
            fallback = True
            allocation = uniform_allocation(members.size, budget)
        else:
            allocation = largest_remainder(r / r.sum() * budget, budget)

        rng = make_rng(seed + class_index)
        synthetic = _interpolate(data.X[members], allocation, k, rng, fixed_lambda)
        X_parts.append(synthetic)
        y_parts.append(np.full(synthetic.shape[0], data.y[members[0]]))
        report.per_sample_difficulty[label] = r
        report.allocation[label] = allocation
        report.generated[label] = int(synthetic.shape[0])
        report.uniform_fallback[label] = fallback
        LOGGER.debug("class %s: %d members, %d synthetic rows", label, members.size, synthetic.shape[0])

    balanced = LabeledMatrix(np.vstack(X_parts), np.concatenate(y_parts))
    LOGGER.info("balanced %d rows to %d (%s)", len(data), len(balanced), "adasyn" if adaptive else "smote")
    return balanced, report


def adasyn(data, k=5, seed=0, fixed_lambda=None):
    """ADASYN oversampling.

    Parameters
    ----------
    data : LabeledMatrix
        The rows to balance.
    k : int
        Neighbourhood size for both the difficulty ratio and the interpolation partners.
    seed : int
        Root seed; class c draws from `seed + index(c)`.
    fixed_lambda : float, optional
        Pins the interpolation coefficient instead of drawing it from U(0, 1).

    Returns
    -------
    tuple
        (balanced LabeledMatrix, OversampleReport). Synthetic rows follow the original rows.
    """
    return _oversample(data, k, seed, adaptive=True, fixed_lambda=fixed_lambda)


def smote(data, k=5, seed=0, fixed_lambda=None):
    """SMOTE oversampling: the ADASYN budget spread uniformly over minority samples."""
    balanced, _ = _oversample(data, k, seed, adaptive=False, fixed_lambda=fixed_lambda)
    return balanced


# #############################################################################
# PLAUSIBILITY
# #############################################################################
def kl_divergence(p_samples, q_samples, n_bins=50):
    """KL(P || Q) in nats between add-one smoothed histograms on shared bins."""
    p_samples = np.ravel(np.asarray(p_samples, dtype=np.float64))
    q_samples = np.ravel(np.asarray(q_samples, dtype=np.float64))
    require(n_bins >= 2, f"n_bins must be >= 2, got {n_bins}")
    require(p_samples.size > 0 and q_samples.size > 0, "both sample sets must be non-empty")
    pooled = np.concatenate([p_samples, q_samples])
    lo, hi = pooled.min(), pooled.max()
    if lo == hi:
        return 0.0
    p_counts, _ = np.histogram(p_samples, bins=n_bins, range=(lo, hi))
    q_counts, _ = np.histogram(q_samples, bins=n_bins, range=(lo, hi))
    return float(entropy(p_counts + 1.0, q_counts + 1.0))


def cosine_similarity(a, b):
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    require(a.shape == b.shape, f"shape mismatch {a.shape} vs {b.shape}")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    require(norm_a > 0 and norm_b > 0, "cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def plausibility(original, balanced, n_bins=50):
    """Per-class checks of synthetic rows against the real rows of their class.

    Reports the mean cosine similarity of synthetic rows to the real class centroid and the
    KL divergence between the pooled feature values of synthetic and real rows.
    """
    n_real = len(original)
    synthetic = LabeledMatrix(balanced.X[n_real:], balanced.y[n_real:])
    result = {}
    for label in synthetic.labels:
        real_rows = original.X[original.y.astype(str) == label]
        new_rows = synthetic.X[synthetic.y.astype(str) == label]
        centroid = real_rows.mean(axis=0)
        result[label] = {
            "n_synthetic": int(new_rows.shape[0]),
            "mean_cosine_to_centroid": float(np.mean([cosine_similarity(row, centroid) for row in new_rows])),
            "kl_divergence": kl_divergence(new_rows, real_rows, n_bins),
        }
    return result
