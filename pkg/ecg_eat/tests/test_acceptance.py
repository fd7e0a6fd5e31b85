"""Multi-seed trend checks on full pipeline runs at the shipped defaults."""

import shutil
import warnings

import numpy as np
import pytest

from ecg_eat.models import net_from_dict, net_to_dict, randomize_weights
from ecg_eat.module_utils.config import validate_config
from ecg_eat.module_utils.errors import DegenerateInputWarning
from ecg_eat.pipeline import PIPELINE_STAGES, RunContext, run_pipeline, run_stage
from ecg_eat.trustmetrics import cohens_d

pytestmark = pytest.mark.slow

SEEDS = range(5)
BRANCHES = ("time", "freq", "tf")
NOISE_KINDS = ("Gaussian", "BaselineWander", "Muscle")


def _context(root, seed, **overrides):
    return RunContext.from_config(validate_config({"seed": seed, "output_dir": str(root / f"seed{seed}"), **overrides}))


def _run(ctx, stages):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        run_stage(ctx, "gen")
        run_pipeline(ctx, stages)
    return ctx


def _f1(ctx, name):
    return ctx.store.get(f"metrics/{name}.json").json["f1_macro"]


def _median(runs, name):
    return float(np.median([_f1(ctx, name) for ctx in runs]))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("trend")
    return [_run(_context(root, seed), PIPELINE_STAGES) for seed in SEEDS]


class TestBandpassAblation:
    @pytest.fixture(scope="class")
    def band_f1(self, tmp_path_factory, runs):
        medians = {(0.5, 45.0): _median(runs, "time")}
        for band in ((0.5, 4.5), (0.05, 100.0)):
            root = tmp_path_factory.mktemp(f"band_{band[0]}_{band[1]}")
            contexts = [
                _run(_context(root, seed, filter={"lo_hz": band[0], "hi_hz": band[1]}), ["preprocess", "balance", "train"])
                for seed in SEEDS
            ]
            medians[band] = _median(contexts, "time")
        return medians

    def test_full_band_beats_a_low_pass_band(self, band_f1):
        assert band_f1[(0.5, 45.0)] - band_f1[(0.5, 4.5)] >= 0.10

    def test_full_band_is_at_least_as_good_as_a_wide_band(self, band_f1):
        assert band_f1[(0.5, 45.0)] >= band_f1[(0.05, 100.0)]


class TestFusionDominance:
    def test_intermediate_matches_every_branch(self, runs):
        fused = _median(runs, "intermediate")
        for branch in BRANCHES:
            assert fused >= _median(runs, branch), branch

    def test_intermediate_is_close_to_late_fusion(self, runs):
        assert _median(runs, "intermediate") >= _median(runs, "late") - 0.02

    def test_effect_size_against_the_weakest_branch(self, runs):
        weakest = min(BRANCHES, key=lambda branch: _median(runs, branch))
        fused = [_f1(ctx, "intermediate") for ctx in runs]
        other = [_f1(ctx, weakest) for ctx in runs]
        assert cohens_d(fused, other) > 0.5


class TestNoiseRobustness:
    def test_degradation_stays_below_ten_points(self, runs):
        rows = [ctx.store.get("robustness/noise.json").json["rows"] for ctx in runs]
        for kind in NOISE_KINDS:
            deltas = [row["delta_f1_pp"] for seed_rows in rows for row in seed_rows if row["noise"] == kind]
            assert len(deltas) == len(SEEDS)
            assert np.median(deltas) < 10.0, kind


class TestAttackTrend:
    @pytest.mark.parametrize("kind", ["FGSM_STT", "PGD_STT"])
    def test_flip_rate_grows_with_the_budget(self, runs, kind):
        by_budget = {}
        for ctx in runs:
            for report in ctx.store.get("attacks/reports.json").json["reports"]:
                if report["kind"] == kind:
                    by_budget.setdefault(report["epsilon"], []).append(report["flip_rate"])
        budgets = sorted(by_budget)
        assert budgets == [0.005, 0.01, 0.02, 0.05]
        medians = [np.median(by_budget[epsilon]) for epsilon in budgets]
        assert np.all(np.diff(medians) >= 0)


class TestSanityChecks:
    def test_majority_of_seeds_pass_both_checks(self, runs):
        passed = 0
        for ctx in runs:
            stats = ctx.store.get("eat/verdict.json").json["c1_fidelity"]["stats"]
            randomized, shuffled = stats["randomized_weights"], stats["shuffled_labels"]
            passed += (
                randomized["p_value"] > 0.05
                and shuffled["p_value"] > 0.05
                and shuffled["chance_low"] <= shuffled["val_accuracy"] <= shuffled["chance_high"]
            )
        assert passed >= 3


class TestCertification:
    def test_trained_model_passes(self, runs):
        verdicts = [ctx.store.get("eat/verdict.json").json for ctx in runs]
        assert sum(v["overall"] for v in verdicts) >= 3

    def test_randomized_model_fails_fidelity_or_dependence(self, runs, tmp_path):
        shutil.copytree(runs[0].store.root, tmp_path / f"seed{runs[0].seed}")
        ctx = _context(tmp_path, runs[0].seed)
        name = ctx.store.get("eat/verdict.json").json["model"]
        trained = net_from_dict(ctx.store.get(f"models/{name}.json").json)
        ctx.store.put(f"models/{name}.json", net_to_dict(randomize_weights(trained, ctx.seed_for("randomized"))))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateInputWarning)
            run_pipeline(ctx, ["attack", "certify"])
        verdict = ctx.store.get("eat/verdict.json").json
        assert not verdict["overall"]
        assert not verdict["c1_fidelity"]["passed"] or not verdict["c2_dependence"]["passed"]
