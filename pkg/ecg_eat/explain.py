"""
Saliency attribution, sanity checks and ST-T restricted adversarial stress tests.

Saliency maps explain the time modality: for a fused net that is input 0, and a scalogram
gradient is summed over its scale rows. Attacks ascend the true-class cross-entropy and only
move samples inside the ST-T mask.
"""

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.ndimage import gaussian_filter1d

from ecg_eat.models import grad_input, predict, predict_proba, randomize_weights, stratified_split, take_rows, train
from ecg_eat.module_utils.errors import DegenerateInputWarning, require
from ecg_eat.module_utils.rng import child_rng, derive_seed
from ecg_eat.trustmetrics import DEFAULT_WINDOW, dice_iou_at_k, permutation_pvalue, topk_indicator, windowed_nmi

LOGGER = logging.getLogger(__name__)

SMOOTHING_SIGMA = 5.0
ATTACK_KINDS = ("FGSM_STT", "PGD_STT")


@dataclass
class SaliencyMap:
    values: np.ndarray
    class_index: int
    smoothing_sigma: float
    degenerate: bool = False


@dataclass
class AttackSpec:
    """ST-T attack settings; PGD defaults to 10 steps of epsilon / 4."""

    kind: str
    epsilon: float
    steps: int = 10
    step_size: Optional[float] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        require(self.kind in ATTACK_KINDS, f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        require(self.epsilon >= 0, f"epsilon must be >= 0, got {self.epsilon}")
        require(self.steps >= 1, f"steps must be >= 1, got {self.steps}")
        require(self.step_size is None or self.step_size > 0, f"step_size must be positive, got {self.step_size}")

    @property
    def resolved_step_size(self):
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


@dataclass
class AttackReport:
    kind: str
    epsilon: float
    flip_rate: float
    delta_p_true: float
    saliency_cosine: float
    dice_at_k: float
    iou_at_k: float
    n: int

    def to_dict(self):
        return asdict(self)


# #############################################################################
# HELPERS
# #############################################################################
def _part(x, modality):
    return x[modality] if isinstance(x, tuple) else x


def _with_part(x, modality, value):
    if not isinstance(x, tuple):
        return value
    parts = list(x)
    parts[modality] = value
    return tuple(parts)


def _batched(x):
    return tuple(np.asarray(p, dtype=np.float64)[None] for p in x) if isinstance(x, (tuple, list)) else np.asarray(x)[None]


def _minmax(rows):
    """Row-wise min-max normalization; constant rows become zeros. Returns (maps, degenerate flags)."""
    low = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - low
    degenerate = span[:, 0] <= 0
    return np.where(degenerate[:, None], 0.0, (rows - low) / np.where(span > 0, span, 1.0)), degenerate


def cosine_rows(A, B):
    """Row-wise cosine; two zero rows count as identical, one zero row as unrelated."""
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    dots = np.einsum("ij,ij->i", A, B)
    both_zero = (na == 0) & (nb == 0)
    cos = np.where((na > 0) & (nb > 0), dots / np.where(na * nb > 0, na * nb, 1.0), 0.0)
    return np.clip(np.where(both_zero, np.all(A == B, axis=1).astype(float), cos), -1.0, 1.0)


# #############################################################################
# SALIENCY
# #############################################################################
def gradient_profiles(model, X, classes, sigma=SMOOTHING_SIGMA, modality=0):
    """Smoothed |d logit / d input| for a batch, before normalization (N x time)."""
    g = _part(grad_input(model, X, classes, of="logit"), modality)
    a = np.abs(g)
    if a.ndim == 3:
        a = a.sum(axis=1)
    if sigma > 0:
        a = gaussian_filter1d(a, sigma, axis=1, mode="nearest")
    return a


def gradient_profile(model, x, class_index, sigma=SMOOTHING_SIGMA, modality=0):
    return gradient_profiles(model, _batched(x), class_index, sigma, modality)[0]


def saliency_batch(model, X, classes, sigma=SMOOTHING_SIGMA, modality=0):
    """Normalized saliency maps for a batch (N x time)."""
    maps, degenerate = _minmax(gradient_profiles(model, X, classes, sigma, modality))
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} constant saliency maps set to zero", DegenerateInputWarning)
    return maps


def saliency_grad(model, x, class_index, sigma=SMOOTHING_SIGMA, modality=0):
    """|gradient| of the class logit, Gaussian smoothed, min-max normalized to [0, 1]."""
    maps, degenerate = _minmax(gradient_profiles(model, _batched(x), class_index, sigma, modality))
    if degenerate[0]:
        warnings.warn("constant saliency map set to zero", DegenerateInputWarning)
    return SaliencyMap(maps[0], int(class_index), sigma, bool(degenerate[0]))


def smoothgrad(model, x, class_index, n=25, noise_sigma=0.1, seed=0, sigma=SMOOTHING_SIGMA, modality=0):
    """Mean of the normalized saliency maps of `n` Gaussian-perturbed copies of x."""
    require(n >= 1, f"n must be >= 1, got {n}")
    require(noise_sigma >= 0, f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return saliency_grad(model, x, class_index, sigma, modality)
    rng = child_rng(seed, "smoothgrad")
    parts = x if isinstance(x, tuple) else (x,)
    noisy = tuple(np.asarray(p)[None] + noise_sigma * rng.standard_normal((n,) + np.shape(p)) for p in parts)
    batch = noisy if isinstance(x, tuple) else noisy[0]
    maps, degenerate = _minmax(gradient_profiles(model, batch, class_index, sigma, modality))
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} of {n} noisy saliency maps set to zero", DegenerateInputWarning)
    return SaliencyMap(maps.mean(axis=0), int(class_index), sigma, bool(degenerate.all()))


def integrated_gradients(model, x, baseline=None, steps=256, class_index=0):
    """Signed IG attributions of a class logit, midpoint Riemann sum along the straight path.

    For a fused net `x` and `baseline` are pairs and so is the result.
    """
    require(steps >= 1, f"steps must be >= 1, got {steps}")
    fused = isinstance(x, (tuple, list))
    xs = tuple(np.asarray(p, dtype=np.float64) for p in (x if fused else (x,)))
    if baseline is None:
        bs = tuple(np.zeros_like(p) for p in xs)
    else:
        bs = tuple(np.asarray(p, dtype=np.float64) for p in (baseline if fused else (baseline,)))
    require(len(bs) == len(xs) and all(b.shape == p.shape for b, p in zip(bs, xs)), "baseline shape must match x")
    alphas = (np.arange(steps) + 0.5) / steps
    path = tuple(b[None] + alphas.reshape((-1,) + (1,) * p.ndim) * (p - b)[None] for p, b in zip(xs, bs))
    grads = grad_input(model, path if fused else path[0], class_index, of="logit")
    grads = grads if fused else (grads,)
    attributions = tuple((p - b) * g.mean(axis=0) for p, b, g in zip(xs, bs, grads))
    return attributions if fused else attributions[0]


# #############################################################################
# SANITY CHECKS
# #############################################################################
def saliency_agreement(model_a, model_b, X, classes, sigma=SMOOTHING_SIGMA, n_perm=1000, seed=0, modality=0):
    """Mean row cosine between two models' saliency maps, with a circular-shift permutation p-value."""
    require(n_perm >= 100, f"n_perm must be >= 100, got {n_perm}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        A = saliency_batch(model_a, X, classes, sigma, modality)
        B = saliency_batch(model_b, X, classes, sigma, modality)
    cosines = cosine_rows(A, B)
    observed = float(cosines.mean())
    rng = child_rng(seed, "agreement")
    null = np.empty(n_perm)
    for i in range(n_perm):
        shifted = np.stack([np.roll(row, int(rng.integers(1, row.size))) for row in B])
        null[i] = cosine_rows(A, shifted).mean()
    p_value = float((1 + np.count_nonzero(null >= observed - 1e-12)) / (1 + n_perm))
    return {"mean_cosine": observed, "mean_abs_cosine": float(np.abs(cosines).mean()), "p_value": p_value,
            "n": int(A.shape[0])}


def sanity_randomized_weights(model, X, seed, classes=None, sigma=SMOOTHING_SIGMA, n_perm=1000, modality=0):
    """Agreement between the trained model's saliency and that of a re-initialized copy."""
    classes = predict(model, X) if classes is None else classes
    randomized = randomize_weights(model, derive_seed(seed, "sanity", "randomized"))
    result = saliency_agreement(model, randomized, X, classes, sigma, n_perm, seed, modality)
    LOGGER.info("randomized-weights sanity: mean cosine %.4f, p %.4f", result["mean_cosine"], result["p_value"])
    return result


def permuted_labels(y, seed):
    return child_rng(seed, "sanity", "shuffled_labels").permutation(np.asarray(y))


def sanity_shuffled_labels(net, dataset, train_conf, seed, masks, window=DEFAULT_WINDOW, n_perm=1000,
                           sigma=SMOOTHING_SIGMA, modality=0):
    """Train a fresh copy of `net` on permuted labels and measure what its saliency still aligns with.

    Validation accuracy is scored against the true labels of the training run's validation split;
    the chance band is the binomial 95% interval at 1 / C.
    """
    X, y = dataset
    y = np.asarray(y, dtype=int)
    shuffled = permuted_labels(y, seed)
    fresh = randomize_weights(net, derive_seed(seed, "sanity", "shuffled_init"))
    trained, _ = train(fresh, (X, shuffled), train_conf)
    _, val_idx = stratified_split(shuffled, train_conf.val_fraction, train_conf.seed)
    val_accuracy = float(np.mean(predict(trained, take_rows(X, val_idx)) == y[val_idx]))
    low, high = stats.binom.interval(0.95, val_idx.size, 1.0 / net.n_classes)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        maps = saliency_batch(trained, X, predict(trained, X), sigma, modality)
        nmi = float(np.mean([windowed_nmi(s, m, window) for s, m in zip(maps, masks)]))
    p_value = permutation_pvalue(lambda s, m: windowed_nmi(s, m, window), maps, masks, n_perm, "circular_shift", seed,
                                 window)
    result = {
        "val_accuracy": val_accuracy,
        "chance_low": float(low / val_idx.size),
        "chance_high": float(high / val_idx.size),
        "flatness": float(np.mean(maps.var(axis=1))),
        "nmi": nmi,
        "p_value": p_value,
    }
    LOGGER.info("shuffled-label sanity: val accuracy %.3f, NMI %.4f, p %.4f", val_accuracy, nmi, p_value)
    return result


# #############################################################################
# ATTACKS
# #############################################################################
def _loss(model, X, y):
    probs = predict_proba(model, X)
    return -np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))


def _loss_grad(model, X, y, modality):
    return -_part(grad_input(model, X, y, of="log_prob"), modality)


def attack_batch(model, X, y, masks, epsilon, kind="FGSM_STT", steps=10, step_size=None, modality=0):
    """Adversarial copies of a batch; only masked samples of the attacked modality move.

    The first step always spends the full budget (a single step is FGSM); later PGD steps use
    `step_size` and are projected back onto the budget box within the mask. The iterate with
    the highest loss is kept per row.
    """
    require(epsilon >= 0, f"epsilon must be >= 0, got {epsilon}")
    require(steps >= 1, f"steps must be >= 1, got {steps}")
    y = np.asarray(y, dtype=int)
    x0 = _part(X, modality)
    M = np.broadcast_to(np.asarray(masks, dtype=bool), x0.shape)
    step_size = epsilon / 4.0 if step_size is None else step_size

    def project(x):
        return np.where(M, np.clip(x, x0 - epsilon, x0 + epsilon), x0)

    current = project(x0 + epsilon * np.sign(_loss_grad(model, X, y, modality)) * M)
    if kind == "FGSM_STT" or steps == 1:
        return _with_part(X, modality, current)
    best, best_loss = current.copy(), _loss(model, _with_part(X, modality, current), y)
    for _ in range(steps - 1):
        grad = _loss_grad(model, _with_part(X, modality, current), y, modality)
        current = project(current + step_size * np.sign(grad) * M)
        loss = _loss(model, _with_part(X, modality, current), y)
        better = loss > best_loss
        best[better], best_loss[better] = current[better], loss[better]
    return _with_part(X, modality, best)


def _single_attack(model, x, mask, epsilon, true_class, kind, steps, step_size, modality):
    X = _batched(x)
    mask = np.asarray(mask, dtype=bool)
    require(mask.shape == np.shape(_part(x, modality)), "mask length must match the attacked input")
    adv = attack_batch(model, X, [true_class], mask[None], epsilon, kind, steps, step_size, modality)
    return tuple(p[0] for p in adv) if isinstance(adv, tuple) else adv[0]


def fgsm_stt(model, x, mask, epsilon, true_class, modality=0):
    """x + epsilon * sign(grad loss) inside the mask; untouched outside."""
    return _single_attack(model, x, mask, epsilon, true_class, "FGSM_STT", 1, None, modality)


def pgd_stt(model, x, mask, epsilon, steps=10, step_size=None, true_class=0, modality=0):
    """Iterated masked sign ascent projected onto the epsilon box within the mask."""
    require(step_size is None or step_size > 0, f"step_size must be positive, got {step_size}")
    return _single_attack(model, x, mask, epsilon, true_class, "PGD_STT", steps, step_size, modality)


def attack_report(model, dataset, spec, k_percent=10, sigma=SMOOTHING_SIGMA, modality=0):
    """Decision and explanation stability of `model` under the attack in `spec`.

    `dataset` is (inputs, integer labels, masks); saliency is taken for the true class.
    """
    X, y, masks = dataset
    y = np.asarray(y, dtype=int)
    require(y.size > 0, "attack report needs a non-empty dataset")
    masks = spec.mask if spec.mask is not None else masks
    probs = predict_proba(model, X)
    X_adv = attack_batch(model, X, y, masks, spec.epsilon, spec.kind, spec.steps if spec.kind == "PGD_STT" else 1,
                         spec.resolved_step_size or None, modality)
    probs_adv = predict_proba(model, X_adv)
    rows = np.arange(y.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        maps = saliency_batch(model, X, y, sigma, modality)
        maps_adv = saliency_batch(model, X_adv, y, sigma, modality)
    overlaps = np.array([dice_iou_at_k(a, topk_indicator(m, k_percent), k_percent) for a, m in zip(maps_adv, maps)])
    report = AttackReport(
        kind=spec.kind,
        epsilon=float(spec.epsilon),
        flip_rate=float(np.mean(probs.argmax(axis=1) != probs_adv.argmax(axis=1))),
        delta_p_true=float(np.mean(probs_adv[rows, y] - probs[rows, y])),
        saliency_cosine=float(np.mean(cosine_rows(maps, maps_adv))),
        dice_at_k=float(np.mean(overlaps[:, 0])),
        iou_at_k=float(np.mean(overlaps[:, 1])),
        n=int(y.size),
    )
    LOGGER.info("%s eps=%g: flip rate %.4f, delta p_true %.4f", spec.kind, spec.epsilon, report.flip_rate,
                report.delta_p_true)
    return report
