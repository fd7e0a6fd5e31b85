"""
Saliency trustworthiness metrics and the EAT certifier.

Alignment between a saliency map and the ST-T mask is scored with information measures
(binned MI, windowed NMI, AMI) and overlap measures at a top-k cut (Dice, IoU, kappa).
Significance comes from time-aware permutation nulls that keep the autocorrelation of the
saliency map (circular shifts, block shuffles). `certify_eat` combines sanity checks,
alignment, attack reports and branch similarity into four pass/fail criteria.
"""

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial.distance import jensenshannon
from scipy.special import rel_entr
from sklearn.metrics import adjusted_mutual_info_score, cohen_kappa_score, mutual_info_score

from ecg_eat.module_utils.errors import DegenerateInputWarning, InvalidArgument, NumericalFailure, require
from ecg_eat.module_utils.rng import child_rng

LOGGER = logging.getLogger(__name__)

DEFAULT_WINDOW = 50  # fs / 5 at 250 Hz
PERMUTATION_SCHEMES = ("circular_shift", "block_shuffle")


def _values(saliency):
    """Plain array from a SaliencyMap or any array-like."""
    return np.asarray(getattr(saliency, "values", saliency), dtype=np.float64)


# #############################################################################
# INFORMATION MEASURES
# #############################################################################
def equal_frequency_bins(x, n_bins):
    """Rank-based bin labels; tied values share a bin."""
    ranks = stats.rankdata(x, method="min")
    return ((ranks - 1) * n_bins // len(x)).astype(int)


def mi_continuous(x, s, n_bins=16, bias_correction=True):
    """Mutual information (nats) between two sequences after equal-frequency binning.

    The plug-in estimate gets the Miller-Madow correction (m_x + m_s - m_xs - 1) / 2n, where m
    counts occupied bins, and is floored at zero.
    """
    x = np.ravel(np.asarray(x, dtype=np.float64))
    s = np.ravel(np.asarray(s, dtype=np.float64))
    require(x.size == s.size, f"length mismatch {x.size} vs {s.size}")
    require(x.size >= 4 * n_bins, f"need at least {4 * n_bins} samples for {n_bins} bins, got {x.size}")
    bx, bs = equal_frequency_bins(x, n_bins), equal_frequency_bins(s, n_bins)
    m_x, m_s = np.unique(bx).size, np.unique(bs).size
    if m_x == 1 or m_s == 1:
        warnings.warn("constant sequence, mutual information set to 0", DegenerateInputWarning)
        return 0.0
    mi = mutual_info_score(bx, bs)
    if bias_correction:
        m_xs = np.unique(bx * n_bins + bs).size
        mi += (m_x + m_s - m_xs - 1) / (2.0 * x.size)
    return float(max(mi, 0.0))


def window_distributions(saliency, mask, window):
    """(saliency mass share, mask occupancy share, length share) per window."""
    s = _values(saliency)
    mask = np.asarray(mask, dtype=bool)
    require(s.shape == mask.shape and s.ndim == 1, "saliency and mask must be 1-D of equal length")
    require(window >= 1, f"window must be >= 1, got {window}")
    labels = np.arange(s.size) // window
    length = np.bincount(labels).astype(float)
    mass = np.bincount(labels, weights=s)
    occupancy = np.bincount(labels, weights=mask.astype(float))
    return mass / max(mass.sum(), 1e-300), occupancy / max(occupancy.sum(), 1e-300), length / s.size


def windowed_nmi(saliency, mask, window=DEFAULT_WINDOW):
    """Windowed alignment score in [0, 1].

    Saliency mass and mask occupancy are aggregated per window. Their Jensen-Shannon divergence
    (the information the window index carries about which of the two it was drawn from) is
    compared with that of a uniform saliency map:

        score = 1 - JS(P_s, P_w) / JS(P_u, P_w)

    1 when saliency mass follows mask occupancy exactly, 0 for uniform (or worse) saliency.
    Adding mask mass to the saliency map never lowers the score.
    """
    s = _values(saliency)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        warnings.warn("mask is all-false or all-true, windowed NMI set to 0", DegenerateInputWarning)
        return 0.0
    if s.sum() <= 0:
        warnings.warn("saliency map carries no mass, windowed NMI set to 0", DegenerateInputWarning)
        return 0.0
    p_s, p_w, p_u = window_distributions(s, mask, window)
    chance = jensenshannon(p_u, p_w) ** 2
    if chance <= 1e-15:
        warnings.warn("mask occupancy is uniform across windows, windowed NMI set to 0", DegenerateInputWarning)
        return 0.0
    return float(np.clip(1.0 - jensenshannon(p_s, p_w) ** 2 / chance, 0.0, 1.0))


def ami(binned_saliency, mask_bins):
    """Adjusted mutual information with the max-entropy normalizer."""
    a, b = np.ravel(binned_saliency), np.ravel(mask_bins)
    require(a.size == b.size, f"length mismatch {a.size} vs {b.size}")
    if np.unique(a).size < 2 or np.unique(b).size < 2:
        warnings.warn("single-label input, AMI set to 0", DegenerateInputWarning)
        return 0.0
    return float(adjusted_mutual_info_score(a, b, average_method="max"))


def discrete_mi(joint):
    """Exact mutual information (nats) of a 2-D joint probability table."""
    joint = np.asarray(joint, dtype=np.float64)
    require(joint.ndim == 2 and joint.size > 0, "joint must be a non-empty 2-D table")
    require(bool(np.all(joint >= 0)) and abs(joint.sum() - 1.0) <= 1e-9, "joint must be a probability table")
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    return float(max(rel_entr(joint, np.where(joint > 0, outer, 1.0)).sum(), 0.0))


# #############################################################################
# OVERLAP MEASURES
# #############################################################################
def topk_indicator(saliency, k_percent=10):
    """Boolean indicator of the top k% samples; ties go to the earlier index."""
    s = _values(saliency)
    require(0 < k_percent <= 100, f"k_percent must lie in (0, 100], got {k_percent}")
    k = max(1, int(round(s.size * k_percent / 100.0)))
    indicator = np.zeros(s.size, dtype=bool)
    indicator[np.argsort(-s, kind="stable")[:k]] = True
    return indicator


def dice_iou_at_k(saliency, mask, k_percent=10):
    top = topk_indicator(saliency, k_percent)
    mask = np.asarray(mask, dtype=bool)
    require(mask.shape == top.shape, "saliency and mask lengths differ")
    if not mask.any():
        warnings.warn("empty mask, Dice and IoU set to 0", DegenerateInputWarning)
        return 0.0, 0.0
    inter = np.count_nonzero(top & mask)
    dice = 2.0 * inter / (top.sum() + mask.sum())
    iou = inter / np.count_nonzero(top | mask)
    return float(dice), float(iou)


def kappa_at_k(saliency, mask, k_percent=10):
    """Cohen's kappa between the top-k indicator and the mask."""
    top = topk_indicator(saliency, k_percent)
    mask = np.asarray(mask, dtype=bool)
    require(mask.shape == top.shape, "saliency and mask lengths differ")
    p_a, p_b = top.mean(), mask.mean()
    if p_a * p_b + (1 - p_a) * (1 - p_b) >= 1.0 - 1e-15:
        warnings.warn("degenerate marginals, kappa set to 0", DegenerateInputWarning)
        return 0.0
    return float(cohen_kappa_score(top, mask))


# #############################################################################
# PERMUTATION NULLS
# #############################################################################
def _permute(row, scheme, rng, block):
    n = row.size
    if scheme == "circular_shift":
        return np.roll(row, int(rng.integers(1, n)))
    blocks = [row[i : i + block] for i in range(0, n, block)]
    return np.concatenate([blocks[j] for j in rng.permutation(len(blocks))])


def permutation_null(metric, saliency, mask, n_perm=1000, scheme="circular_shift", seed=0, block=DEFAULT_WINDOW):
    """(observed statistic, null statistics) for `metric(saliency, mask)`.

    A 2-D saliency/mask pair is a batch; the statistic is the mean metric over rows and
    every row is permuted independently.
    """
    require(n_perm >= 100, f"n_perm must be >= 100, got {n_perm}")
    require(scheme in PERMUTATION_SCHEMES, f"scheme must be one of {PERMUTATION_SCHEMES}, got {scheme!r}")
    require(block >= 1, f"block length must be >= 1, got {block}")
    S = np.atleast_2d(_values(saliency))
    M = np.atleast_2d(np.asarray(mask, dtype=bool))
    require(S.shape == M.shape and S.shape[1] >= 2, "saliency and mask shapes differ")
    rng = child_rng(seed, "permutation", scheme)

    def statistic(rows):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateInputWarning)
            return float(np.mean([metric(r, m) for r, m in zip(rows, M)]))

    observed = statistic(S)
    null = np.array([statistic([_permute(r, scheme, rng, block) for r in S]) for _ in range(n_perm)])
    return observed, null


def permutation_pvalue(metric, saliency, mask, n_perm=1000, scheme="circular_shift", seed=0, block=DEFAULT_WINDOW):
    """Upper-tail p = (1 + #{null >= observed}) / (1 + n_perm)."""
    observed, null = permutation_null(metric, saliency, mask, n_perm, scheme, seed, block)
    return float((1 + np.count_nonzero(null >= observed - 1e-12)) / (1 + n_perm))


# #############################################################################
# EFFECT SIZES
# #############################################################################
def cohens_d(group_a, group_b):
    a, b = np.asarray(group_a, dtype=np.float64), np.asarray(group_b, dtype=np.float64)
    require(a.size >= 2 and b.size >= 2, "each group needs at least two values")
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2)
    if pooled <= 0:
        raise NumericalFailure("Cohen's d is undefined for zero pooled standard deviation")
    return float((a.mean() - b.mean()) / np.sqrt(pooled))


def bootstrap_ci(values, statistic=np.mean, n_resamples=1000, level=0.95, seed=0):
    """Percentile bootstrap interval.

    `values` is one sequence, or a tuple of equal-length sequences resampled jointly (paired);
    `statistic` receives as many arrays as were given.
    """
    samples = values if isinstance(values, tuple) else (values,)
    samples = tuple(np.asarray(v, dtype=np.float64) for v in samples)
    n = samples[0].size
    require(n >= 2, "bootstrap needs at least two values")
    require(all(v.size == n for v in samples), "paired samples must have equal lengths")
    require(n_resamples >= 1 and 0 < level < 1, "n_resamples must be >= 1 and level in (0, 1)")
    rng = child_rng(seed, "bootstrap")
    draws = rng.integers(0, n, size=(n_resamples, n))
    resampled = np.array([statistic(*(v[idx] for v in samples)) for idx in draws])
    tail = 100.0 * (1.0 - level) / 2.0
    low, high = np.percentile(resampled, [tail, 100.0 - tail])
    return float(low), float(high)


def paired_t(a, b):
    """(t statistic, two-sided p) of a paired t-test."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    require(a.size == b.size and a.size >= 2, "paired samples need equal lengths >= 2")
    if np.var(a - b) == 0:
        raise NumericalFailure("paired t-test is undefined when the differences have zero variance")
    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


def paired_t_test(a, b):
    return paired_t(a, b)[1]


# #############################################################################
# REPORTS
# #############################################################################
@dataclass
class AlignmentReport:
    """Per-sample alignment metrics aggregated by the median, plus dataset-level significance."""

    mi_nats: float
    windowed_nmi: float
    ami: float
    dice_at_k: float
    iou_at_k: float
    kappa_at_k: float
    p_perm: float
    ci_low: float
    ci_high: float
    n_perm: int
    k_percent: float
    n: int = 0


def alignment_report(saliency_maps, masks, signals=None, window=DEFAULT_WINDOW, k_percent=10, n_perm=1000,
                     scheme="circular_shift", n_resamples=1000, seed=0, n_bins=16):
    """AlignmentReport of N saliency maps against their masks.

    `signals` (the inputs the maps explain) feed the signal/saliency MI; without them it is 0.
    The bootstrap interval is for the median per-sample windowed NMI.
    """
    S = np.atleast_2d(_values(saliency_maps))
    M = np.atleast_2d(np.asarray(masks, dtype=bool))
    require(S.shape == M.shape and S.shape[0] >= 1, "saliency maps and masks must match")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        nmi = np.array([windowed_nmi(s, m, window) for s, m in zip(S, M)])
        overlaps = np.array([dice_iou_at_k(s, m, k_percent) for s, m in zip(S, M)])
        kappas = np.array([kappa_at_k(s, m, k_percent) for s, m in zip(S, M)])
        amis = np.array([ami(equal_frequency_bins(s, n_bins), m.astype(int)) for s, m in zip(S, M)])
        if signals is None:
            mis = np.zeros(S.shape[0])
        else:
            X = np.atleast_2d(np.asarray(signals, dtype=np.float64))
            mis = np.array([mi_continuous(x, s, n_bins) for x, s in zip(X, S)])
    p_perm = permutation_pvalue(lambda s, m: windowed_nmi(s, m, window), S, M, n_perm, scheme, seed, window)
    if S.shape[0] >= 2:
        ci_low, ci_high = bootstrap_ci(nmi, np.median, n_resamples, 0.95, seed)
    else:
        ci_low = ci_high = float(nmi[0])
    report = AlignmentReport(
        mi_nats=float(np.median(mis)),
        windowed_nmi=float(np.median(nmi)),
        ami=float(np.median(amis)),
        dice_at_k=float(np.median(overlaps[:, 0])),
        iou_at_k=float(np.median(overlaps[:, 1])),
        kappa_at_k=float(np.median(kappas)),
        p_perm=p_perm,
        ci_low=ci_low,
        ci_high=ci_high,
        n_perm=n_perm,
        k_percent=k_percent,
        n=S.shape[0],
    )
    LOGGER.info("alignment over %d maps: windowed NMI %.4f, p_perm %.4f", report.n, report.windowed_nmi, p_perm)
    return report


def monotonicity_harness(S, W, lambdas, window=DEFAULT_WINDOW, k_percent=10):
    """Windowed NMI and Dice@k of S_lambda = (S + lambda W) / max(S + lambda W) along `lambdas`."""
    S, W = _values(S), np.asarray(W, dtype=bool)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    require(bool(np.all(lambdas >= 0)) and bool(np.all(np.diff(lambdas) > 0)), "lambdas must be >= 0 and increasing")
    result = {"lambda": lambdas.tolist(), "windowed_nmi": [], "dice_at_k": []}
    for lam in lambdas:
        shifted = S + lam * W
        peak = shifted.max()
        shifted = shifted / peak if peak > 0 else shifted
        result["windowed_nmi"].append(windowed_nmi(shifted, W, window))
        result["dice_at_k"].append(dice_iou_at_k(shifted, W, k_percent)[0])
    return result


# #############################################################################
# BRANCH FAITHFULNESS
# #############################################################################
def _time_projection(attribution, arch, length):
    if arch == "FreqAttn":
        raise InvalidArgument("a frequency branch has no time axis to compare within the ST-T mask")
    a = np.asarray(attribution, dtype=np.float64)
    if a.ndim == 2:
        a = a.sum(axis=0)
    if a.size == length:
        return a
    return np.interp(np.linspace(0.0, 1.0, length), np.linspace(0.0, 1.0, a.size), a)


def branch_similarity(fused, dataset, mask, steps=64, class_index=None):
    """Median within-mask cosine of the two branches' |IG| attributions.

    Each branch is attributed by IG of the fused logit along its own input path while the other
    input stays at the zero baseline; attributions are projected onto the time axis (scalogram
    rows summed, then resampled to the mask length).
    """
    from ecg_eat.explain import integrated_gradients  # explain imports this module

    require(fused.arch == "Fused", "branch similarity needs a fused model with two branches")
    (Xa, Xb), y = dataset
    Xa, Xb = np.asarray(Xa, dtype=np.float64), np.asarray(Xb, dtype=np.float64)
    masks = np.asarray(mask, dtype=bool)
    if masks.ndim == 1:
        masks = np.broadcast_to(masks, (Xa.shape[0], masks.size))
    require(masks.shape[0] == Xa.shape[0] == Xb.shape[0], "dataset and masks disagree on the sample count")
    arch_a, arch_b = (fused.dims["parts"][p]["arch"] for p in ("a", "b"))
    cosines, skipped = [], 0
    for i in range(Xa.shape[0]):
        target = int(y[i]) if class_index is None else class_index
        za, zb = np.zeros_like(Xa[i]), np.zeros_like(Xb[i])
        ig_a = integrated_gradients(fused, (Xa[i], zb), (za, zb), steps, target)[0]
        ig_b = integrated_gradients(fused, (za, Xb[i]), (za, zb), steps, target)[1]
        a = np.abs(_time_projection(ig_a, arch_a, masks.shape[1]))[masks[i]]
        b = np.abs(_time_projection(ig_b, arch_b, masks.shape[1]))[masks[i]]
        norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
        if norm_a < 1e-9 or norm_b < 1e-9:
            skipped += 1
            continue
        cosines.append(float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0)))
    if skipped:
        warnings.warn(f"{skipped} samples with zero-norm branch attribution skipped", DegenerateInputWarning)
    if not cosines:
        raise NumericalFailure("every sample had a zero-norm branch attribution")
    return float(np.median(cosines))


# #############################################################################
# CERTIFICATION
# #############################################################################
@dataclass
class EatThresholds:
    tau: float = 0.2
    alpha: float = 0.05
    rho: float = 0.05
    gamma: float = 0.05
    phi: float = 0.9
    phi_arch: float = 0.5
    epsilons: tuple = (0.005, 0.01, 0.02)

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        require(0 <= self.tau <= 1 and 0 < self.alpha < 1, "tau must lie in [0, 1] and alpha in (0, 1)")
        require(0 <= self.rho <= 1 and self.gamma >= 0, "rho must lie in [0, 1] and gamma be >= 0")
        require(-1 <= self.phi <= 1 and -1 <= self.phi_arch <= 1, "phi and phi_arch must lie in [-1, 1]")
        require(len(self.epsilons) >= 1 and all(e >= 0 for e in self.epsilons), "epsilons must be non-empty, >= 0")


@dataclass
class Criterion:
    passed: bool
    stats: dict = field(default_factory=dict)


@dataclass
class EatVerdict:
    c1_fidelity: Criterion
    c2_dependence: Criterion
    c3_robustness: Criterion
    c4_architecture: Criterion
    thresholds: EatThresholds

    @property
    def overall(self):
        return all(c.passed for c in (self.c1_fidelity, self.c2_dependence, self.c3_robustness, self.c4_architecture))


def _attacks_at(attacks, epsilon):
    return [a for a in attacks if abs(a.epsilon - epsilon) <= 1e-12]


def certify_eat(sanity, alignment, attacks, branch_sim, thresholds):
    """EAT verdict; every threshold comparison is inclusive.

    Parameters
    ----------
    sanity : dict
        {"randomized_weights": {"p_value", ...}, "shuffled_labels": {"p_value", "val_accuracy",
        "chance_low", "chance_high", ...}}
    alignment : AlignmentReport
    attacks : list
        AttackReport entries; every budget in `thresholds.epsilons` must be covered.
    branch_sim : float
    thresholds : EatThresholds
    """
    if sanity is None or alignment is None or attacks is None or branch_sim is None or thresholds is None:
        raise InvalidArgument("certification needs sanity, alignment, attack and branch-similarity inputs")
    try:
        randomized, shuffled = sanity["randomized_weights"], sanity["shuffled_labels"]
    except KeyError as exc:
        raise InvalidArgument(f"sanity statistics lack {exc.args[0]!r}") from exc
    attacks = list(attacks)
    missing = [e for e in thresholds.epsilons if not _attacks_at(attacks, e)]
    if missing:
        raise InvalidArgument(f"no attack report for budgets {missing}")
    t = thresholds

    c1 = Criterion(
        passed=bool(
            randomized["p_value"] >= t.alpha
            and shuffled["p_value"] >= t.alpha
            and shuffled["chance_low"] <= shuffled["val_accuracy"] <= shuffled["chance_high"]
        ),
        stats={"randomized_weights": dict(randomized), "shuffled_labels": dict(shuffled)},
    )
    c2 = Criterion(
        passed=bool(alignment.windowed_nmi >= t.tau and alignment.p_perm <= t.alpha and alignment.ci_low > 0),
        stats=asdict(alignment),
    )
    per_budget = []
    for epsilon in t.epsilons:
        for report in _attacks_at(attacks, epsilon):
            ok = report.flip_rate <= t.rho and abs(report.delta_p_true) <= t.gamma and report.saliency_cosine >= t.phi
            per_budget.append({**report.to_dict(), "passed": bool(ok)})
    c3 = Criterion(passed=all(row["passed"] for row in per_budget), stats={"attacks": per_budget})
    c4 = Criterion(passed=bool(branch_sim >= t.phi_arch), stats={"branch_similarity": float(branch_sim)})
    verdict = EatVerdict(c1, c2, c3, c4, thresholds)
    LOGGER.info("EAT verdict: C1 %s C2 %s C3 %s C4 %s -> %s", c1.passed, c2.passed, c3.passed, c4.passed,
                "PASS" if verdict.overall else "FAIL")
    return verdict


def verdict_to_json(verdict):
    criteria = {
        "c1_fidelity": verdict.c1_fidelity,
        "c2_dependence": verdict.c2_dependence,
        "c3_robustness": verdict.c3_robustness,
        "c4_architecture": verdict.c4_architecture,
    }
    return {
        **{name: {"passed": c.passed, "stats": c.stats} for name, c in criteria.items()},
        "overall": verdict.overall,
        "thresholds": {**asdict(verdict.thresholds), "epsilons": list(verdict.thresholds.epsilons)},
    }


SUMMARY_HEADER = [
    "model", "class", "kind", "epsilon", "flip_rate", "delta_p_true", "saliency_cosine", "dice_at_k", "iou_at_k",
    "windowed_nmi", "ami", "kappa_at_k", "mi_nats", "p_perm",
]


def summary_rows(model, attacks, alignment_by_class):
    """CSV rows: one per attack (kind, budget) and one per alignment class."""
    rows = []
    for a in sorted(attacks, key=lambda r: (r.kind, r.epsilon)):
        rows.append([model, "all", a.kind, a.epsilon, a.flip_rate, a.delta_p_true, a.saliency_cosine, a.dice_at_k,
                     a.iou_at_k, "", "", "", "", ""])
    for label in sorted(alignment_by_class):
        r = alignment_by_class[label]
        rows.append([model, label, "alignment", "", "", "", "", r.dice_at_k, r.iou_at_k, r.windowed_nmi, r.ami,
                     r.kappa_at_k, r.mi_nats, r.p_perm])
    return rows
