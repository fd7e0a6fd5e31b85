"""
Pipeline stages run by the command line.

    gen         synthetic records, stratified train / val / test split
    preprocess  bandpass + wavelet denoise, modality bundles per split
    balance     oversample the training split
    train       time, frequency and time-frequency branches
    fuse        early, intermediate, late and gated fusion variants, plus the certified model
    attack      ST-T bounded adversarial stress tests of the certified model
    robustness  clean vs noisy macro-F1 of the fused model
    certify     sanity checks, alignment, branch similarity and the EAT verdict
    report      consolidated metrics, effect sizes and verdict summary

Every stage reads its inputs from the run directory, writes under its own prefix and records
its outputs in the manifest.
"""

import logging
import time
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
import pywt
import scipy
import sklearn

from ecg_eat import __version__
from ecg_eat.balance import LabeledMatrix, adasyn, plausibility, smote
from ecg_eat.explain import (
    AttackReport,
    AttackSpec,
    attack_report,
    saliency_batch,
    sanity_randomized_weights,
    sanity_shuffled_labels,
)
from ecg_eat.fusion import (
    HeadConfig,
    classification_metrics,
    early_fuse_dataset,
    entropy_gated_fuse,
    fit_classwise_weights,
    grid_search_weights,
    intermediate_fuse,
    late_fuse_batch,
)
from ecg_eat.models import (
    DENSE_HEAD,
    FREQ_ATTN,
    TF_CONV2D,
    TIME_CONV,
    TrainConfig,
    build_branch,
    net_from_dict,
    net_to_dict,
    predict_proba,
    train,
)
from ecg_eat.module_utils.config import config_digest
from ecg_eat.module_utils.errors import ArtifactError, DegenerateInputWarning, InvalidArgument, MissingPrerequisite
from ecg_eat.module_utils.errors import NumericalFailure
from ecg_eat.module_utils.rng import child_rng, derive_seed
from ecg_eat.module_utils.store import ArtifactStore
from ecg_eat.signals import CLASSES, DenoiseSpec, FilterSpec, NoiseSpec, inject_noise, load_record, preprocess
from ecg_eat.signals import qrs_hf_metrics, save_record, synth_ecg
from ecg_eat.transforms import CwtConfig, FeatureBundle, build_bundle, load_bundles, save_bundles, stack_modality
from ecg_eat.trustmetrics import (
    SUMMARY_HEADER,
    EatThresholds,
    alignment_report,
    branch_similarity,
    certify_eat,
    cohens_d,
    paired_t_test,
    summary_rows,
    verdict_to_json,
)

LOGGER = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BRANCH_ARCH = {"time": TIME_CONV, "freq": FREQ_ATTN, "tf": TF_CONV2D}
MODEL_ORDER = ("time", "freq", "tf", "early", "intermediate", "late", "gated", "certified")
MODEL_HEADER = [
    "model", "accuracy", "precision_macro", "recall_macro", "f1_macro", "precision_weighted", "recall_weighted",
    "f1_weighted",
]
ROBUSTNESS_HEADER = ["noise", "f1_clean", "f1_noisy", "delta_f1_pp"]


@dataclass
class RunContext:
    """Validated configuration bound to its run directory."""

    config: dict
    store: ArtifactStore
    digest: str

    @classmethod
    def from_config(cls, config):
        return cls(config, ArtifactStore(config["output_dir"]), config_digest(config))

    @property
    def seed(self):
        return self.config["seed"]

    def seed_for(self, *labels):
        return derive_seed(self.seed, *labels)


# #############################################################################
# CONFIGURATION TO OBJECTS
# #############################################################################
def filter_spec(config):
    f = config["filter"]
    return FilterSpec(f["lo_hz"], f["hi_hz"], f["order"], f["zero_phase"])


def denoise_spec(config):
    d = config["denoise"]
    return DenoiseSpec(d["wavelet_levels"], d["threshold"], d["wavelet"])


def cwt_config(config):
    c = config["features"]["cwt"]
    return CwtConfig.from_band(
        config["data"]["fs"], c["f_min"], c["f_max"], c["n_scales"], c["center_freq"], c["bandwidth"], c["out_size"]
    )


def train_config(section, seed):
    keys = ("lr", "beta1", "beta2", "epsilon", "batch", "max_epochs", "patience", "val_fraction")
    return TrainConfig(seed=seed, **{key: section[key] for key in keys})


def attack_specs(config):
    return [AttackSpec(a["kind"], a["epsilon"], a["steps"], a["step_size"]) for a in config["attacks"]]


def eat_thresholds(config):
    return EatThresholds(**config["eat"])


def noise_specs(config):
    r = config["robustness"]
    return [
        NoiseSpec("Gaussian", snr_db=r["snr_db"], amplitude=1.0),
        NoiseSpec("BaselineWander", wander_hz=r["wander_hz"], amplitude=r["wander_mv"]),
        NoiseSpec("Muscle", band_hz=tuple(r["muscle_band"]), amplitude=r["muscle_mv"]),
    ]


# #############################################################################
# SHARED HELPERS
# #############################################################################
def _labels(bundles):
    return np.array([CLASSES.index(b.label) for b in bundles], dtype=int)


def _split_bundles(ctx, split):
    ctx.store.require(f"features/{split}/labels.csv", "preprocess")
    return load_bundles(ctx.store, f"features/{split}")


def _flatten(bundles):
    return np.hstack([stack_modality(bundles, m).reshape(len(bundles), -1) for m in ("time", "freq", "tf")])


def _unflatten(X, y, config):
    """FeatureBundles from rows laid out as [time | freq | scalogram]."""
    feat = config["features"]
    t, b, s = feat["time_len"], feat["n_bins"], feat["cwt"]["out_size"]
    if X.shape[1] != t + b + s * s:
        raise ArtifactError(f"balanced rows have {X.shape[1]} columns, expected {t + b + s * s}", "balanced/train.csv")
    return [FeatureBundle(row[:t], row[t : t + b], row[t + b :].reshape(s, s), str(label)) for row, label in zip(X, y)]


def _balanced_bundles(ctx):
    ctx.store.require("balanced/train.csv", "balance")
    X, y = ctx.store.get_labeled("balanced/train.csv")
    return _unflatten(X, y, ctx.config)


def _inputs(bundles, modalities):
    """One modality array, or a tuple of them for a fused net."""
    if len(modalities) == 1:
        return stack_modality(bundles, modalities[0])
    return tuple(stack_modality(bundles, m) for m in modalities)


def _save_model(ctx, name, net, histories):
    ctx.store.put(f"models/{name}.json", net_to_dict(net))
    ctx.store.put(f"models/{name}_history.json", histories)
    return [f"models/{name}.json", f"models/{name}_history.json"]


def _load_model(ctx, name, stage):
    path = f"models/{name}.json"
    return net_from_dict(ctx.store.require(path, stage).json, path)


def _record_predictions(ctx, name, probs_by_split, y_test):
    """Probability matrices per split plus test metrics."""
    outputs = []
    for split, probs in probs_by_split.items():
        ctx.store.put_matrix(f"predictions/{name}_{split}.csv", probs, header=list(CLASSES))
        outputs.append(f"predictions/{name}_{split}.csv")
    metrics = classification_metrics(y_test, probs_by_split["test"].argmax(axis=1), len(CLASSES))
    ctx.store.put(f"metrics/{name}.json", metrics)
    LOGGER.info("%s: test accuracy %.4f, macro-F1 %.4f", name, metrics["accuracy"], metrics["f1_macro"])
    return outputs + [f"metrics/{name}.json"]


def _certified_name(config):
    fusion = config["fusion"]
    if "intermediate" in fusion["strategies"] and fusion["certify_pair"] == fusion["pair"]:
        return "intermediate"
    return "certified"


# #############################################################################
# GEN
# #############################################################################
def stage_gen(ctx):
    """Synthesize every record and assign it to a split, class by class."""
    data = ctx.config["data"]
    _, val_share, test_share = data["split"]
    splits = {split: [] for split in SPLITS}
    outputs = []
    for label in CLASSES:
        n = max(1, int(round(data["n_per_class"] * data["class_ratio"][label])))
        n_test, n_val = int(round(test_share * n)), int(round(val_share * n))
        order = child_rng(ctx.seed, "gen", "split", label).permutation(n)
        assignment = {int(i): "test" for i in order[:n_test]}
        assignment.update({int(i): "val" for i in order[n_test : n_test + n_val]})
        for i in range(n):
            split = assignment.get(i, "train")
            name = f"{label}_{i:04d}"
            record = synth_ecg(label, data["fs"], data["n_beats"], ctx.seed_for("gen", label, i),
                               data["st_elevation_mv"], data["noise_mv"])
            save_record(record, ctx.store.root / "data" / split / name)
            splits[split].append(name)
            outputs += [f"data/{split}/{name}.csv", f"data/{split}/{name}.json"]
    ctx.store.put("data/splits.json", splits)
    LOGGER.info("generated %s records", {split: len(names) for split, names in splits.items()})
    return outputs + ["data/splits.json"]


def load_split(ctx, split):
    splits = ctx.store.require("data/splits.json", "gen").json
    return [load_record(ctx.store.root / "data" / split / name) for name in splits[split]]


# #############################################################################
# PREPROCESS
# #############################################################################
def _qrs_summary(raw, cleaned):
    """Mean QRS notch count and HF RMS per class, before and after preprocessing."""
    summary = {}
    for label in CLASSES:
        pairs = [(r, c) for r, c in zip(raw, cleaned) if r.label == label]
        if not pairs:
            continue
        before = [qrs_hf_metrics(r) for r, _ in pairs]
        after = [qrs_hf_metrics(c) for _, c in pairs]
        summary[label] = {
            key: {"raw": float(np.mean([m[key] for m in before])), "preprocessed": float(np.mean([m[key] for m in after]))}
            for key in before[0]
        }
    return summary


def stage_preprocess(ctx):
    fspec, dspec, cwt = filter_spec(ctx.config), denoise_spec(ctx.config), cwt_config(ctx.config)
    feat = ctx.config["features"]
    outputs = []
    for split in SPLITS:
        raw = load_split(ctx, split)
        cleaned = [preprocess(record, fspec, dspec) for record in raw]
        bundles = [build_bundle(record, cwt, feat["time_len"], feat["n_bins"]) for record in cleaned]
        save_bundles(ctx.store, f"features/{split}", bundles)
        outputs += [f"features/{split}/{name}" for name in
                    ("time.csv", "freq.csv", "scalogram.csv", "stt_mask.csv", "labels.csv")]
        if split == "train" and ctx.config["data"]["fs"] >= 200:
            ctx.store.put("features/qrs_hf.json", _qrs_summary(raw, cleaned))
            outputs.append("features/qrs_hf.json")
    return outputs


# #############################################################################
# BALANCE
# #############################################################################
def stage_balance(ctx):
    section = ctx.config["balance"]
    bundles = _split_bundles(ctx, "train")
    original = LabeledMatrix(_flatten(bundles), np.array([b.label for b in bundles]))
    seed = ctx.seed_for("balance")
    summary = {"method": section["method"]}
    if section["method"] == "adasyn":
        balanced, report = adasyn(original, section["k"], seed)
        summary.update(report.to_dict())
    elif section["method"] == "smote":
        balanced = smote(original, section["k"], seed)
    else:
        balanced = original
    summary["class_counts"] = {"before": original.class_counts, "after": balanced.class_counts}
    summary["plausibility"] = plausibility(original, balanced) if len(balanced) > len(original) else {}
    ctx.store.put_labeled("balanced/train.csv", balanced.X, balanced.y)
    ctx.store.put("balanced/report.json", summary)
    return ["balanced/train.csv", "balanced/report.json"]


# #############################################################################
# TRAIN
# #############################################################################
def stage_train(ctx):
    models = ctx.config["models"]
    train_bundles = _balanced_bundles(ctx)
    y = _labels(train_bundles)
    val, test = _split_bundles(ctx, "val"), _split_bundles(ctx, "test")
    outputs = []
    for name, arch in BRANCH_ARCH.items():
        X = stack_modality(train_bundles, name)
        net = build_branch(arch, X.shape[1:], models["latent_dim"], len(CLASSES), ctx.seed_for("init", name))
        trained, history = train(net, (X, y), train_config(models[name], ctx.seed_for("train", name)))
        outputs += _save_model(ctx, name, trained, {"train": history.to_dict()})
        probs = {split: predict_proba(trained, stack_modality(b, name)) for split, b in (("val", val), ("test", test))}
        outputs += _record_predictions(ctx, name, probs, _labels(test))
    return outputs


# #############################################################################
# FUSE
# #############################################################################
def _fuse_pair(ctx, name, pair, train_bundles, val, test):
    fusion = ctx.config["fusion"]
    y = _labels(train_bundles)
    branch_a, branch_b = (_load_model(ctx, m, "train") for m in pair)
    head = HeadConfig(fusion["mode"], None, fusion["warmup_epochs"], fusion["warmup_lr"], ctx.seed_for("head", name))
    fused, histories = intermediate_fuse(
        branch_a, branch_b, head, (_inputs(train_bundles, pair), y),
        train_config(fusion["train"], ctx.seed_for("train", name)),
    )
    histories = {key: (h.to_dict() if h is not None else None) for key, h in histories.items()}
    outputs = _save_model(ctx, name, fused, {**histories, "pair": list(pair)})
    probs = {split: predict_proba(fused, _inputs(b, pair)) for split, b in (("val", val), ("test", test))}
    return outputs + _record_predictions(ctx, name, probs, _labels(test))


def _branch_probs(ctx, split):
    probs = []
    for name in BRANCH_ARCH:
        path = f"predictions/{name}_{split}.csv"
        ctx.store.require(path, "train")
        probs.append(ctx.store.get_matrix(path))
    return probs


def stage_fuse(ctx):
    fusion, models = ctx.config["fusion"], ctx.config["models"]
    strategies = fusion["strategies"]
    train_bundles = _balanced_bundles(ctx)
    val, test = _split_bundles(ctx, "val"), _split_bundles(ctx, "test")
    y_val, y_test = _labels(val), _labels(test)
    outputs = []

    if "early" in strategies:
        data = early_fuse_dataset(train_bundles, fusion["pair"])
        net = build_branch(DENSE_HEAD, data.X.shape[1], models["latent_dim"], len(CLASSES), ctx.seed_for("init", "early"))
        trained, history = train(net, (data.X, _labels(train_bundles)),
                                 train_config(models["early"], ctx.seed_for("train", "early")))
        outputs += _save_model(ctx, "early", trained, {"train": history.to_dict(), "modalities": list(fusion["pair"])})
        probs = {split: predict_proba(trained, early_fuse_dataset(b, fusion["pair"]).X)
                 for split, b in (("val", val), ("test", test))}
        outputs += _record_predictions(ctx, "early", probs, y_test)

    if "intermediate" in strategies:
        outputs += _fuse_pair(ctx, "intermediate", fusion["pair"], train_bundles, val, test)
    if _certified_name(ctx.config) == "certified":
        outputs += _fuse_pair(ctx, "certified", fusion["certify_pair"], train_bundles, val, test)

    if "late" in strategies or "gated" in strategies:
        probs_val, probs_test = _branch_probs(ctx, "val"), _branch_probs(ctx, "test")
    if "late" in strategies:
        weights, search = grid_search_weights(probs_val, y_val, fusion["grid_step"])
        trace = search.pop("trace")
        ctx.store.put("fusion/late_weights.json", {**weights.to_dict(), "branches": list(BRANCH_ARCH),
                                                  "validation": search})
        ctx.store.put_rows("fusion/late_grid.csv", ["alpha_" + b for b in BRANCH_ARCH] + ["accuracy", "f1_macro"],
                           [entry["alphas"] + [entry["accuracy"], entry["f1_macro"]] for entry in trace])
        probs = {"val": late_fuse_batch(probs_val, weights), "test": late_fuse_batch(probs_test, weights)}
        outputs += ["fusion/late_weights.json", "fusion/late_grid.csv"]
        outputs += _record_predictions(ctx, "late", probs, y_test)
    if "gated" in strategies:
        W = fit_classwise_weights(probs_val, y_val, fusion["gate_grid_step"])
        ctx.store.put("fusion/gated_weights.json", {**W.to_dict(), "branches": list(BRANCH_ARCH)})
        probs = {"val": entropy_gated_fuse(probs_val, W), "test": entropy_gated_fuse(probs_test, W)}
        outputs.append("fusion/gated_weights.json")
        outputs += _record_predictions(ctx, "gated", probs, y_test)
    return outputs


# #############################################################################
# ATTACK
# #############################################################################
def _certified(ctx, stage="fuse"):
    """(certified fused model, its name, index of the time input, input pair)."""
    name = _certified_name(ctx.config)
    pair = ctx.config["fusion"]["certify_pair"]
    return _load_model(ctx, name, stage), name, pair.index("time"), pair


def stage_attack(ctx):
    model, name, part, pair = _certified(ctx)
    test = _split_bundles(ctx, "test")
    X, y = _inputs(test, pair), _labels(test)
    masks = np.stack([b.stt_mask for b in test])
    ex = ctx.config["explain"]
    reports = [attack_report(model, (X, y, masks), spec, ex["k_percent"], ex["sigma"], part)
               for spec in attack_specs(ctx.config)]
    ctx.store.put("attacks/reports.json", {"model": name, "reports": [r.to_dict() for r in reports]})
    return ["attacks/reports.json"]


# #############################################################################
# ROBUSTNESS
# #############################################################################
def evaluate_noise_robustness(model, records, modalities, config, seed):
    """Macro-F1 on clean and noise-injected copies of `records`, one row per noise kind.

    Noise is added to the raw waveform, which then goes through the configured preprocessing,
    so the filters get the chance to remove it.
    """
    fspec, dspec, cwt = filter_spec(config), denoise_spec(config), cwt_config(config)
    feat = config["features"]
    y = np.array([CLASSES.index(r.label) for r in records], dtype=int)

    def macro_f1(batch):
        bundles = [build_bundle(preprocess(r, fspec, dspec), cwt, feat["time_len"], feat["n_bins"]) for r in batch]
        pred = predict_proba(model, _inputs(bundles, modalities)).argmax(axis=1)
        return classification_metrics(y, pred, len(CLASSES))["f1_macro"]

    clean = macro_f1(records)
    rows = []
    for spec in noise_specs(config):
        noisy = [
            inject_noise(r, replace(spec, seed=derive_seed(seed, "noise", spec.kind, i)))
            for i, r in enumerate(records)
        ]
        f1 = macro_f1(noisy)
        rows.append({"noise": spec.kind, "f1_clean": clean, "f1_noisy": f1, "delta_f1_pp": 100.0 * (clean - f1)})
        LOGGER.info("%s noise: macro-F1 %.4f -> %.4f", spec.kind, clean, f1)
    return rows


def stage_robustness(ctx):
    fusion = ctx.config["fusion"]
    if "intermediate" in fusion["strategies"]:
        name, pair = "intermediate", fusion["pair"]
        model = _load_model(ctx, name, "fuse")
    else:
        model, name, _, pair = _certified(ctx)
    rows = evaluate_noise_robustness(model, load_split(ctx, "test"), pair, ctx.config, ctx.seed_for("robustness"))
    ctx.store.put("robustness/noise.json", {"model": name, "rows": rows})
    ctx.store.put_rows("robustness/noise.csv", ROBUSTNESS_HEADER, [[r[k] for k in ROBUSTNESS_HEADER] for r in rows])
    return ["robustness/noise.json", "robustness/noise.csv"]


# #############################################################################
# CERTIFY
# #############################################################################
def stage_certify(ctx):
    attacks_doc = ctx.store.require("attacks/reports.json", "attack").json
    model, name, part, pair = _certified(ctx)
    ex = ctx.config["explain"]
    test, train_split = _split_bundles(ctx, "test"), _split_bundles(ctx, "train")
    X, y = _inputs(test, pair), _labels(test)
    masks = np.stack([b.stt_mask for b in test])
    seed = ctx.seed_for("certify")

    sanity = {
        "randomized_weights": sanity_randomized_weights(model, X, seed, None, ex["sigma"], ex["n_perm"], part),
        "shuffled_labels": sanity_shuffled_labels(
            model,
            (_inputs(train_split, pair), _labels(train_split)),
            train_config(ctx.config["models"]["time"], ctx.seed_for("certify", "shuffled")),
            seed,
            np.stack([b.stt_mask for b in train_split]),
            ex["window"],
            ex["n_perm"],
            ex["sigma"],
            part,
        ),
    }

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        maps = saliency_batch(model, X, y, ex["sigma"], part)
    signals = X[part]

    def align(rows):
        return alignment_report(maps[rows], masks[rows], signals[rows], ex["window"], ex["k_percent"], ex["n_perm"],
                                ex["scheme"], ex["n_resamples"], seed, ex["n_bins"])

    alignment = align(np.arange(y.size))
    by_class = {CLASSES[c]: align(np.flatnonzero(y == c)) for c in range(len(CLASSES)) if np.any(y == c)}
    similarity = branch_similarity(model, (X, y), masks, ex["ig_steps"])

    attacks = [AttackReport(**r) for r in attacks_doc["reports"]]
    verdict = certify_eat(sanity, alignment, attacks, similarity, eat_thresholds(ctx.config))
    ctx.store.put("eat/verdict.json", {"model": name, **verdict_to_json(verdict)})
    ctx.store.put("eat/alignment_by_class.json", {label: asdict(r) for label, r in by_class.items()})
    ctx.store.put_rows("eat/summary.csv", SUMMARY_HEADER, summary_rows(name, attacks, by_class))
    return ["eat/verdict.json", "eat/alignment_by_class.json", "eat/summary.csv"]


# #############################################################################
# REPORT
# #############################################################################
def _correct(ctx, name, y_test):
    probs = ctx.store.get_matrix(f"predictions/{name}_test.csv")
    return (probs.argmax(axis=1) == y_test).astype(float)


def _effect_sizes(ctx, names, y_test):
    """Cohen's d and paired t p-value of the intermediate model against every branch."""
    if "intermediate" not in names:
        return []
    fused = _correct(ctx, "intermediate", y_test)
    rows = []
    for branch in BRANCH_ARCH:
        if branch not in names:
            continue
        other = _correct(ctx, branch, y_test)
        row = {"a": "intermediate", "b": branch, "cohens_d": None, "paired_t_p": None}
        try:
            row["cohens_d"] = cohens_d(fused, other)
        except NumericalFailure as exc:
            LOGGER.warning("Cohen's d for intermediate vs %s: %s", branch, exc)
        try:
            row["paired_t_p"] = paired_t_test(fused, other)
        except NumericalFailure as exc:
            LOGGER.warning("paired t-test for intermediate vs %s: %s", branch, exc)
        rows.append(row)
    return rows


def _summary_text(models, effects, robustness, verdict):
    lines = ["models"]
    for name, m in models.items():
        lines.append(f"  {name:<13} accuracy {m['accuracy']:.4f}  macro-F1 {m['f1_macro']:.4f}  "
                     f"weighted-F1 {m['f1_weighted']:.4f}")
    if effects:
        lines.append("effect sizes (per-sample correctness)")
        for e in effects:
            d = "n/a" if e["cohens_d"] is None else f"{e['cohens_d']:.4f}"
            p = "n/a" if e["paired_t_p"] is None else f"{e['paired_t_p']:.4g}"
            lines.append(f"  {e['a']} vs {e['b']}: d {d}, paired t p {p}")
    lines.append(f"noise robustness ({robustness['model']})")
    for r in robustness["rows"]:
        lines.append(f"  {r['noise']:<15} F1 {r['f1_clean']:.4f} -> {r['f1_noisy']:.4f} ({r['delta_f1_pp']:+.2f} pp)")
    lines.append(f"EAT verdict ({verdict['model']})")
    for key, title in (("c1_fidelity", "C1 fidelity"), ("c2_dependence", "C2 dependence"),
                       ("c3_robustness", "C3 robustness"), ("c4_architecture", "C4 architecture")):
        lines.append(f"  {title:<16} {'PASS' if verdict[key]['passed'] else 'FAIL'}")
    lines.append(f"  {'overall':<16} {'PASS' if verdict['overall'] else 'FAIL'}")
    return lines


def stage_report(ctx):
    """Consolidate stage artifacts; every number is read back, none recomputed from models."""
    manifest = ctx.store.manifest()
    missing_stages = [s for s in PIPELINE_STAGES if s not in manifest["stages"]]
    missing_files = ctx.store.missing_outputs()
    if missing_stages or missing_files:
        listed = [f"stage {s} not run" for s in missing_stages]
        listed += [f"{path} ({stage})" for stage, paths in missing_files.items() for path in paths]
        first = missing_stages[0] if missing_stages else next(iter(missing_files))
        raise MissingPrerequisite("incomplete run: " + "; ".join(listed), first)

    y_test = _labels(_split_bundles(ctx, "test"))
    models = {name: ctx.store.get(f"metrics/{name}.json").json for name in MODEL_ORDER
              if ctx.store.get(f"metrics/{name}.json").exists}
    effects = _effect_sizes(ctx, models, y_test)
    robustness = ctx.store.require("robustness/noise.json", "robustness").json
    verdict = ctx.store.require("eat/verdict.json", "certify").json
    summary = {"models": models, "effect_sizes": effects, "robustness": robustness, "eat": verdict}
    text = _summary_text(models, effects, robustness, verdict)

    ctx.store.put("report/summary.json", summary)
    ctx.store.put_rows("report/models.csv", MODEL_HEADER,
                       [[name] + [m[k] for k in MODEL_HEADER[1:]] for name, m in models.items()])
    ctx.store.put_rows("report/effect_sizes.csv", ["a", "b", "cohens_d", "paired_t_p"],
                       [[e["a"], e["b"], e["cohens_d"], e["paired_t_p"]] for e in effects])
    ctx.store.put_rows("report/robustness.csv", ROBUSTNESS_HEADER,
                       [[r[k] for k in ROBUSTNESS_HEADER] for r in robustness["rows"]])
    ctx.store.put_text("report/summary.txt", "\n".join(text) + "\n")
    return ["report/summary.json", "report/models.csv", "report/effect_sizes.csv", "report/robustness.csv",
            "report/summary.txt"]


# #############################################################################
# ORCHESTRATION
# #############################################################################
STAGES = {
    "gen": stage_gen,
    "preprocess": stage_preprocess,
    "balance": stage_balance,
    "train": stage_train,
    "fuse": stage_fuse,
    "attack": stage_attack,
    "robustness": stage_robustness,
    "certify": stage_certify,
    "report": stage_report,
}
PIPELINE_STAGES = ("preprocess", "balance", "train", "fuse", "attack", "robustness", "certify")


def versions():
    return {
        "ecg_eat": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pywavelets": pywt.__version__,
        "scikit-learn": sklearn.__version__,
    }


def run_stage(ctx, stage):
    """Run one stage and record it in the manifest; returns its manifest entry."""
    if stage not in STAGES:
        raise InvalidArgument(f"unknown stage {stage!r}, expected one of {', '.join(STAGES)}")
    recorded = ctx.store.manifest()["stages"]
    stale = sorted(s for s, entry in recorded.items() if s != stage and entry["config"] != ctx.digest)
    if stale:
        LOGGER.warning("stages %s were run with a different configuration", ", ".join(stale))
    LOGGER.info("stage %s: start", stage)
    started = time.perf_counter()
    outputs = STAGES[stage](ctx)
    elapsed = round(time.perf_counter() - started, 3)
    manifest = ctx.store.record_stage(stage, outputs, ctx.digest, ctx.seed, elapsed, versions())
    LOGGER.info("stage %s: %d outputs in %.1f s", stage, len(outputs), elapsed)
    return manifest["stages"][stage]


def run_pipeline(ctx, stages=PIPELINE_STAGES):
    """Run `stages` in pipeline order, whatever order they were given in."""
    unknown = [s for s in stages if s not in PIPELINE_STAGES]
    if unknown:
        raise InvalidArgument(f"unknown stages {unknown}, expected a subset of {', '.join(PIPELINE_STAGES)}")
    return {stage: run_stage(ctx, stage) for stage in PIPELINE_STAGES if stage in stages}
