"""
Fusion strategies.

    early         concatenate flattened modality vectors, train one DenseHead
    intermediate  fuse trained branch latents through a fine-tuned head
    late          convex weighting of branch probabilities, grid-searched on validation only
    gated         class-wise weights times a per-branch entropy gate
"""

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import entr
from sklearn.metrics import accuracy_score, f1_score, precision_recall_fscore_support

from ecg_eat.balance import LabeledMatrix
from ecg_eat.models import TrainConfig, build_fused, train
from ecg_eat.module_utils.errors import DegenerateInputWarning, InvalidArgument, require

LOGGER = logging.getLogger(__name__)

MODALITIES = ("time", "freq", "tf")
CONVEX_TOL = 1e-9


@dataclass
class FusionWeights:
    """Convex weights over branches, renormalized to sum to one exactly."""

    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64).ravel()
        require(alphas.size >= 1 and bool(np.all(alphas >= 0)), "fusion weights must be non-negative")
        require(abs(alphas.sum() - 1.0) <= CONVEX_TOL, f"fusion weights must sum to 1, got {alphas.sum():.12g}")
        self.alphas = alphas / alphas.sum()

    def to_dict(self):
        return {"alphas": [float(a) for a in self.alphas]}


@dataclass
class ClasswiseGateWeights:
    """Branch x class non-negative weights applied with an entropy gate."""

    W: np.ndarray
    gate_kind: str = "entropy"
    val_macro_f1: Optional[float] = None

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        require(self.gate_kind == "entropy", f"unsupported gate {self.gate_kind!r}")
        require(bool(np.all(self.W >= 0)), "class-wise weights must be non-negative")
        require(bool(np.all(self.W.max(axis=0) > 0)), "every class needs at least one positive weight")

    def to_dict(self):
        return {"W": self.W.tolist(), "gate_kind": self.gate_kind, "val_macro_f1": self.val_macro_f1}


@dataclass
class HeadConfig:
    """Fused head settings: fusion mode and the warm-up run with branches frozen."""

    mode: str = "concat"
    latent_dim: Optional[int] = None
    warmup_epochs: int = 20
    warmup_lr: float = 1e-3
    seed: int = 0


# #############################################################################
# EARLY FUSION
# #############################################################################
def early_fuse_dataset(bundles, modalities):
    """Row-wise concatenation of the selected flattened modalities, in the order given."""
    modalities = list(modalities)
    require(len(modalities) >= 2, "early fusion needs at least two modalities")
    unknown = [m for m in modalities if m not in MODALITIES]
    require(not unknown, f"unknown modalities {unknown}, expected a subset of {MODALITIES}")
    require(len(bundles) >= 1, "early fusion needs at least one record")
    X = np.stack([np.concatenate([np.ravel(b.modality(m)) for m in modalities]) for b in bundles])
    return LabeledMatrix(X, np.array([b.label for b in bundles]))


# #############################################################################
# INTERMEDIATE FUSION
# #############################################################################
def intermediate_fuse(branch_a, branch_b, head_conf, dataset, train_conf):
    """Fuse two trained branches and fine-tune.

    A concat head is first trained alone at `head_conf.warmup_lr` with both branches frozen,
    then everything is fine-tuned jointly with `train_conf` (the fusion learning rate).

    Returns
    -------
    tuple
        (fused MicroNet, {"warmup": TrainHistory or None, "joint": TrainHistory})
    """
    head_conf = head_conf or HeadConfig()
    expected = branch_a.latent_dim + branch_b.latent_dim
    if head_conf.latent_dim is not None and head_conf.latent_dim != expected:
        raise InvalidArgument(f"head expects {head_conf.latent_dim} latent inputs, branches provide {expected}")
    fused = build_fused(branch_a, branch_b, mode=head_conf.mode, seed=head_conf.seed)
    histories = {"warmup": None}
    if head_conf.mode == "concat" and head_conf.warmup_epochs > 0:
        warmup = replace(
            train_conf,
            lr=head_conf.warmup_lr,
            max_epochs=head_conf.warmup_epochs,
            trainable=("head/",),
            refit_standardization=False,
        )
        fused, histories["warmup"] = train(fused, dataset, warmup)
    fused, histories["joint"] = train(fused, dataset, replace(train_conf, refit_standardization=False))
    LOGGER.info("fused %s + %s (%s head, latent %d)", branch_a.arch, branch_b.arch, head_conf.mode, expected)
    return fused, histories


# #############################################################################
# LATE FUSION
# #############################################################################
def _check_branches(probs_per_branch, n_weights=None):
    arrays = [np.asarray(p, dtype=np.float64) for p in probs_per_branch]
    require(len(arrays) >= 1, "no branch probabilities given")
    require(all(a.shape == arrays[0].shape for a in arrays), "branch probabilities differ in shape")
    if n_weights is not None:
        require(len(arrays) == n_weights, f"{len(arrays)} branches but {n_weights} weights")
    return np.stack(arrays)


def late_fuse_predict(probs_per_branch, w):
    """Weighted average of one probability vector per branch."""
    stacked = _check_branches(probs_per_branch, w.alphas.size)
    require(stacked.ndim == 2, "late_fuse_predict takes one probability vector per branch")
    return np.tensordot(w.alphas, stacked, axes=1)


def late_fuse_batch(probs_per_branch, w):
    """Weighted average of per-branch N x C probability matrices."""
    stacked = _check_branches(probs_per_branch, w.alphas.size)
    require(stacked.ndim == 3, "late_fuse_batch takes one N x C matrix per branch")
    return np.tensordot(w.alphas, stacked, axes=1)


def classification_metrics(y_true, y_pred, n_classes):
    """Accuracy with macro and weighted precision, recall and F1."""
    labels = list(range(n_classes))
    result = {"accuracy": float(accuracy_score(y_true, y_pred))}
    for average in ("macro", "weighted"):
        precision, recall, f1, _ = precision_recall_fscore_support(
            y_true, y_pred, labels=labels, average=average, zero_division=0
        )
        result.update({f"precision_{average}": float(precision), f"recall_{average}": float(recall),
                       f"f1_{average}": float(f1)})
    return result


def simplex_grid(n_branches, step):
    """Weight tuples on the step lattice of the simplex, in lexicographic order.

    All but the last weight run over multiples of `step`; the last takes the remainder.
    Weights come from integer lattice counts and are never negative.
    """
    require(0 < step <= 1, f"grid step must lie in (0, 1], got {step}")
    require(2 <= n_branches <= 3, f"grid search supports 2 or 3 branches, got {n_branches}")
    m = int(np.floor(1.0 / step + 1e-9))
    if n_branches == 2:
        counts = [(i,) for i in range(m + 1)]
    else:
        counts = [(i, j) for i in range(m + 1) for j in range(m + 1 - i)]
    if abs(m * step - 1.0) <= 1e-9:
        return [np.array([*c, m - sum(c)], dtype=np.float64) / m for c in counts]
    # step does not divide one: the remainder keeps the leftover mass
    return [np.array([*(k * step for k in c), 1.0 - sum(c) * step]) for c in counts]


def grid_search_weights(probs_per_branch, y_val, step=0.05):
    """Exhaustive simplex search for the validation-accuracy maximizing late-fusion weights.

    Parameters
    ----------
    probs_per_branch : list
        One N x C validation probability matrix per branch (2 or 3 branches).
    y_val : array
        Integer validation labels.
    step : float
        Lattice step; 0.05 gives 231 candidates for three branches.

    Returns
    -------
    tuple
        (FusionWeights, metrics) where metrics holds the winner's scores, the candidate count
        and the full search trace (alphas + metrics per candidate, in search order).
        Ties keep the first candidate, the lexicographically smallest weight tuple.
    """
    stacked = _check_branches(probs_per_branch)
    y_val = np.asarray(y_val, dtype=int)
    require(stacked.ndim == 3 and y_val.size == stacked.shape[1] and y_val.size > 0, "validation labels must match")
    n_classes = stacked.shape[2]
    best, best_metrics, trace = None, None, []
    for alphas in simplex_grid(stacked.shape[0], step):
        metrics = classification_metrics(y_val, np.tensordot(alphas, stacked, axes=1).argmax(axis=1), n_classes)
        trace.append({"alphas": [float(a) for a in alphas], **metrics})
        if best is None or metrics["accuracy"] > best_metrics["accuracy"]:
            best, best_metrics = alphas, metrics
    LOGGER.info("late fusion grid: %d candidates, best accuracy %.4f at %s", len(trace), best_metrics["accuracy"],
                np.round(best, 6).tolist())
    return FusionWeights(best), {**best_metrics, "n_candidates": len(trace), "trace": trace}


# #############################################################################
# ENTROPY-GATED FUSION
# #############################################################################
def entropy_gate(probs):
    """1 - H(p) / ln C, per probability vector (last axis)."""
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[-1]
    return np.clip(1.0 - entr(probs).sum(axis=-1) / np.log(n_classes), 0.0, 1.0)


def _gated_scores(stacked, W):
    """stacked: branches x N x C -> N x C scores."""
    gates = entropy_gate(stacked)
    return np.einsum("mc,mn,mnc->nc", W, gates, stacked)


def _renormalize(scores, warn=True):
    totals = scores.sum(axis=-1, keepdims=True)
    degenerate = totals[..., 0] <= 0
    if warn and np.any(degenerate):
        warnings.warn("all gated scores are zero, falling back to uniform", DegenerateInputWarning)
    uniform = np.full_like(scores, 1.0 / scores.shape[-1])
    safe = np.where(totals > 0, totals, 1.0)
    return np.where(degenerate[..., None], uniform, scores / safe)


def entropy_gated_fuse(probs_per_branch, W):
    """score(c) = sum_m W[m, c] g_m p_m(c), renormalized to a probability vector."""
    stacked = _check_branches(probs_per_branch, W.W.shape[0])
    require(stacked.shape[-1] == W.W.shape[1], "weights and probabilities disagree on the number of classes")
    single = stacked.ndim == 2
    scores = _gated_scores(stacked[:, None, :] if single else stacked, W.W)
    fused = _renormalize(scores)
    return fused[0] if single else fused


def _macro_f1(y, stacked, W):
    pred = _renormalize(_gated_scores(stacked, W), warn=False).argmax(axis=1)
    return float(f1_score(y, pred, labels=list(range(stacked.shape[2])), average="macro", zero_division=0))


def fit_classwise_weights(probs_per_branch, y_val, grid_step=0.25, max_sweeps=2):
    """Per-class coordinate search of the gate weights on validation macro-F1.

    Starts from all-ones weights and visits (class, branch) cells in order; a cell moves to the
    grid value with the best strictly improving score (smallest such value on ties). Columns
    are never allowed to become all-zero.
    """
    stacked = _check_branches(probs_per_branch)
    y_val = np.asarray(y_val, dtype=int)
    require(stacked.ndim == 3 and y_val.size == stacked.shape[1] and y_val.size > 0, "validation labels must match")
    require(0 < grid_step <= 1, f"grid step must lie in (0, 1], got {grid_step}")
    n_branches, _, n_classes = stacked.shape
    values = np.arange(int(np.floor(1.0 / grid_step + 1e-9)) + 1) * grid_step
    W = np.ones((n_branches, n_classes))
    best = _macro_f1(y_val, stacked, W)
    for _ in range(max_sweeps):
        changed = False
        for c in range(n_classes):
            for m in range(n_branches):
                current = W[m, c]
                choice = current
                for v in values:
                    W[m, c] = v
                    if W[:, c].max() <= 0:
                        continue
                    score = _macro_f1(y_val, stacked, W)
                    if score > best:
                        best, choice = score, v
                W[m, c] = choice
                changed = changed or choice != current
        if not changed:
            break
    LOGGER.info("class-wise gate weights fitted, validation macro-F1 %.4f", best)
    return ClasswiseGateWeights(W, "entropy", best)
