import numpy as np
import pytest

from ecg_eat.fusion import (
    ClasswiseGateWeights,
    FusionWeights,
    HeadConfig,
    classification_metrics,
    early_fuse_dataset,
    entropy_gate,
    entropy_gated_fuse,
    fit_classwise_weights,
    grid_search_weights,
    intermediate_fuse,
    late_fuse_batch,
    late_fuse_predict,
    simplex_grid,
)
from ecg_eat.models import DENSE_HEAD, FUSED, LINEAR, TrainConfig, build_branch, predict_proba
from ecg_eat.module_utils.errors import DegenerateInputWarning, InvalidArgument
from ecg_eat.transforms import FeatureBundle


def _one_hot(y, n_classes):
    return np.eye(n_classes)[y]


class TestLateFusion:
    def test_grid_sizes(self):
        grid = simplex_grid(3, 0.05)
        assert len(grid) == 231
        assert len(simplex_grid(2, 0.05)) == 21
        for alphas in grid:
            assert alphas.sum() == pytest.approx(1.0)
            assert np.all(alphas >= 0)

    @pytest.mark.parametrize("n_branches", [2, 3])
    @pytest.mark.parametrize("step", [0.05, 0.1, 0.2, 0.3])
    def test_grid_weights_are_never_negative(self, n_branches, step):
        for alphas in simplex_grid(n_branches, step):
            assert np.all(alphas >= 0)
            FusionWeights(alphas)

    def test_grid_search_accepts_a_winner_on_the_simplex_edge(self):
        b1 = np.array([[0.0, 1.0], [0.0, 1.0]])
        b2 = np.array([[0.52, 0.48], [0.60, 0.40]])
        b3 = np.array([[1.0, 0.0], [1.0, 0.0]])
        weights, metrics = grid_search_weights([b1, b2, b3], np.array([1, 0]), step=0.05)
        assert metrics["accuracy"] == 1.0
        np.testing.assert_allclose(weights.alphas, [0.05, 0.95, 0.0], atol=1e-12)
        assert np.all(weights.alphas >= 0)

    def test_grid_search_finds_the_informative_branch(self):
        y = np.array([0, 1, 2, 3, 1, 2, 3, 0, 2])
        uniform = np.full((y.size, 4), 0.25)
        weights, metrics = grid_search_weights([_one_hot(y, 4), uniform, uniform], y, step=0.05)
        np.testing.assert_allclose(weights.alphas, [0.05, 0.0, 0.95], atol=1e-12)
        assert metrics["accuracy"] == 1.0
        assert metrics["n_candidates"] == 231
        assert len(metrics["trace"]) == 231

    def test_fused_probabilities_stay_on_simplex(self, rng):
        probs = [rng.dirichlet(np.ones(4), size=6) for _ in range(3)]
        fused = late_fuse_batch(probs, FusionWeights([0.2, 0.3, 0.5]))
        np.testing.assert_allclose(fused.sum(axis=1), 1.0)
        single = late_fuse_predict([p[0] for p in probs], FusionWeights([0.2, 0.3, 0.5]))
        np.testing.assert_allclose(single, fused[0])

    @pytest.mark.parametrize("alphas", [[0.5, 0.6], [1.2, -0.2], []])
    def test_weights_must_be_convex(self, alphas):
        with pytest.raises(InvalidArgument):
            FusionWeights(alphas)

    def test_branch_count_must_match_weights(self, rng):
        probs = [rng.dirichlet(np.ones(4), size=3) for _ in range(2)]
        with pytest.raises(InvalidArgument):
            late_fuse_batch(probs, FusionWeights([0.2, 0.3, 0.5]))

    def test_metrics_of_perfect_predictions(self):
        y = np.array([0, 1, 2, 3, 0])
        metrics = classification_metrics(y, y, 4)
        assert metrics["accuracy"] == 1.0 and metrics["f1_macro"] == 1.0 and metrics["f1_weighted"] == 1.0


class TestGatedFusion:
    def test_gate_extremes(self):
        np.testing.assert_allclose(entropy_gate([[0.25] * 4, [1.0, 0.0, 0.0, 0.0]]), [0.0, 1.0], atol=1e-12)

    def test_all_uncertain_branches_fall_back_to_uniform(self):
        uniform = np.full(4, 0.25)
        with pytest.warns(DegenerateInputWarning):
            fused = entropy_gated_fuse([uniform, uniform], ClasswiseGateWeights(np.ones((2, 4))))
        np.testing.assert_allclose(fused, 0.25)

    def test_confident_branch_dominates(self):
        confident = np.array([0.05, 0.85, 0.05, 0.05])
        vague = np.array([0.3, 0.2, 0.25, 0.25])
        fused = entropy_gated_fuse([confident, vague], ClasswiseGateWeights(np.ones((2, 4))))
        assert fused.sum() == pytest.approx(1.0)
        assert int(np.argmax(fused)) == 1

    def test_fitted_weights_never_lower_validation_f1(self, rng):
        y = rng.integers(0, 4, 40)
        good = 0.6 * _one_hot(y, 4) + 0.4 * rng.dirichlet(np.ones(4), size=40)
        noise = rng.dirichlet(np.ones(4), size=40)
        W = fit_classwise_weights([noise, good], y, grid_step=0.25)
        assert W.W.shape == (2, 4)
        assert np.all(W.W >= 0) and np.all(W.W.max(axis=0) > 0)
        baseline = classification_metrics(y, entropy_gated_fuse([noise, good], ClasswiseGateWeights(np.ones((2, 4))))
                                          .argmax(axis=1), 4)["f1_macro"]
        assert W.val_macro_f1 >= baseline - 1e-12

    def test_zero_column_is_rejected(self):
        with pytest.raises(InvalidArgument):
            ClasswiseGateWeights([[1.0, 0.0], [1.0, 0.0]])


class TestEarlyAndIntermediateFusion:
    def test_early_dataset_concatenates_in_order(self):
        bundles = [
            FeatureBundle(np.arange(4.0) + i, np.arange(3.0) - i, np.ones((2, 2)) * i, "Normal") for i in range(3)
        ]
        data = early_fuse_dataset(bundles, ["freq", "time"])
        assert data.X.shape == (3, 7)
        np.testing.assert_array_equal(data.X[1], np.concatenate([np.arange(3.0) - 1, np.arange(4.0) + 1]))
        assert early_fuse_dataset(bundles, ["time", "tf"]).X.shape == (3, 8)

    @pytest.mark.parametrize("modalities", [["time"], ["time", "ecg"]])
    def test_early_dataset_rejects_bad_modalities(self, modalities):
        bundle = FeatureBundle(np.zeros(4), np.zeros(3), np.zeros((2, 2)), "Normal")
        with pytest.raises(InvalidArgument):
            early_fuse_dataset([bundle], modalities)

    def test_intermediate_fusion_trains_a_fused_head(self, rng):
        y = np.repeat([0, 1], 12)
        Xa = rng.normal(0, 1, (24, 10)) + y[:, None]
        Xb = rng.normal(0, 1, (24, 12)) - y[:, None]
        branch_a = build_branch(LINEAR, 10, n_classes=2, seed=1)
        branch_b = build_branch(DENSE_HEAD, 12, 4, 2, 2)
        fused, histories = intermediate_fuse(branch_a, branch_b, HeadConfig(warmup_epochs=2), ((Xa, Xb), y),
                                             TrainConfig(lr=3e-5, max_epochs=2, batch=8))
        assert fused.arch == FUSED
        assert fused.latent_dim == 14
        assert histories["warmup"] is not None and histories["joint"] is not None
        assert predict_proba(fused, (Xa, Xb)).shape == (24, 2)

    def test_head_width_must_match_branches(self):
        branch = build_branch(LINEAR, 10, n_classes=2, seed=1)
        with pytest.raises(InvalidArgument):
            intermediate_fuse(branch, branch, HeadConfig(latent_dim=7), ((np.zeros((4, 10)),) * 2, [0, 1, 0, 1]),
                              TrainConfig())
