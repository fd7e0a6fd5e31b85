import numpy as np
import pytest

from ecg_eat.explain import (
    AttackSpec,
    attack_batch,
    attack_report,
    cosine_rows,
    fgsm_stt,
    integrated_gradients,
    pgd_stt,
    saliency_agreement,
    saliency_grad,
    sanity_randomized_weights,
    sanity_shuffled_labels,
    smoothgrad,
)
from ecg_eat.models import LINEAR, TIME_CONV, TrainConfig, build_branch, build_fused, logits_batch, predict_proba
from ecg_eat.module_utils.errors import DegenerateInputWarning, InvalidArgument
from ecg_eat.module_utils.rng import child_rng


def _loss(net, x, y):
    return -np.log(predict_proba(net, x[None])[0, y])


class TestSaliency:
    def test_unsmoothed_linear_saliency_is_normalized_weight_magnitude(self, blind_linear, rng):
        x = rng.standard_normal(100)
        saliency = saliency_grad(blind_linear, x, 2, sigma=0.0)
        w = np.abs(blind_linear.view("head/W")[2])
        np.testing.assert_allclose(saliency.values, (w - w.min()) / (w.max() - w.min()))
        assert saliency.class_index == 2 and not saliency.degenerate

    def test_values_lie_in_unit_interval(self, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 3)
        saliency = saliency_grad(net, rng.standard_normal(100), 1)
        assert saliency.values.min() == pytest.approx(0.0) and saliency.values.max() == pytest.approx(1.0)

    def test_constant_gradient_gives_zero_map(self):
        net = build_branch(LINEAR, 10, n_classes=2, seed=0)
        net.view("head/W")[...] = 1.0
        with pytest.warns(DegenerateInputWarning):
            saliency = saliency_grad(net, np.zeros(10), 0, sigma=0.0)
        assert saliency.degenerate
        np.testing.assert_array_equal(saliency.values, 0.0)

    def test_smoothgrad_equals_saliency_for_linear_models(self, blind_linear, rng):
        x = rng.standard_normal(100)
        np.testing.assert_allclose(smoothgrad(blind_linear, x, 1, n=10, noise_sigma=0.2, seed=3).values,
                                   saliency_grad(blind_linear, x, 1).values, atol=1e-12)

    def test_smoothgrad_is_deterministic(self, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 3)
        x = rng.standard_normal(100)
        np.testing.assert_array_equal(smoothgrad(net, x, 0, n=5, seed=8).values, smoothgrad(net, x, 0, n=5, seed=8).values)

    def test_smoothgrad_averages_normalized_maps(self, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 3)
        x = rng.standard_normal(100)
        noise = child_rng(8, "smoothgrad").standard_normal((4, 100))
        expected = np.mean([saliency_grad(net, x + 0.3 * eta, 2).values for eta in noise], axis=0)
        np.testing.assert_allclose(smoothgrad(net, x, 2, n=4, noise_sigma=0.3, seed=8).values, expected, atol=1e-10)

    def test_fused_saliency_explains_the_time_input(self, rng):
        fused = build_fused(build_branch(TIME_CONV, 100, 6, 4, 1), build_branch(LINEAR, 16, n_classes=4, seed=2))
        saliency = saliency_grad(fused, (rng.standard_normal(100), rng.standard_normal(16)), 0)
        assert saliency.values.shape == (100,)


class TestIntegratedGradients:
    def test_linear_attributions_are_exact(self, rng):
        net = build_branch(LINEAR, 30, n_classes=3, seed=4)
        x, baseline = rng.standard_normal(30), rng.standard_normal(30)
        attributions = integrated_gradients(net, x, baseline, steps=4, class_index=1)
        np.testing.assert_allclose(attributions, (x - baseline) * net.view("head/W")[1])
        delta = logits_batch(net, x[None])[0, 1] - logits_batch(net, baseline[None])[0, 1]
        assert attributions.sum() == pytest.approx(delta)

    def test_completeness_on_a_conv_net(self, rng):
        net = build_branch(TIME_CONV, 64, 6, 3, 2)
        x = rng.standard_normal(64)
        attributions = integrated_gradients(net, x, steps=512, class_index=0)
        delta = logits_batch(net, x[None])[0, 0] - logits_batch(net, np.zeros((1, 64)))[0, 0]
        assert attributions.sum() == pytest.approx(delta, abs=0.02 * max(1.0, abs(delta)))

    def test_additive_fusion_splits_into_branch_attributions(self, rng):
        a, b = build_branch(LINEAR, 12, n_classes=3, seed=1), build_branch(LINEAR, 8, n_classes=3, seed=2)
        fused = build_fused(a, b, mode="additive")
        xa, xb = rng.standard_normal(12), rng.standard_normal(8)
        ig_a, ig_b = integrated_gradients(fused, (xa, xb), steps=16, class_index=2)
        np.testing.assert_allclose(ig_a, integrated_gradients(a, xa, steps=16, class_index=2))
        np.testing.assert_allclose(ig_b, integrated_gradients(b, xb, steps=16, class_index=2))

    def test_baseline_shape_must_match(self):
        net = build_branch(LINEAR, 5, n_classes=2, seed=0)
        with pytest.raises(InvalidArgument):
            integrated_gradients(net, np.zeros(5), np.zeros(4))


class TestAttacks:
    def test_perturbation_stays_in_the_masked_box(self, st_mask, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 5)
        x = rng.standard_normal(100)
        for adv in (fgsm_stt(net, x, st_mask, 0.02, 1), pgd_stt(net, x, st_mask, 0.02, steps=5, true_class=1)):
            delta = adv - x
            np.testing.assert_array_equal(delta[~st_mask], 0.0)
            assert np.max(np.abs(delta[st_mask])) <= 0.02 + 1e-12

    def test_fgsm_moves_every_masked_sample_by_epsilon(self, st_mask, rng):
        net = build_branch(LINEAR, 100, n_classes=4, seed=6)
        x = rng.standard_normal(100)
        adv = fgsm_stt(net, x, st_mask, 0.01, 0)
        np.testing.assert_allclose(np.abs(adv - x)[st_mask], 0.01)

    def test_pgd_loss_at_least_fgsm_loss(self, st_mask, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 7)
        x = rng.standard_normal(100)
        fgsm = fgsm_stt(net, x, st_mask, 0.05, 2)
        pgd = pgd_stt(net, x, st_mask, 0.05, steps=10, true_class=2)
        assert _loss(net, pgd, 2) >= _loss(net, fgsm, 2) - 1e-12

    def test_fgsm_raises_the_loss_of_a_linear_model(self, st_mask, rng):
        net = build_branch(LINEAR, 100, n_classes=4, seed=6)
        x = rng.standard_normal(100)
        assert _loss(net, fgsm_stt(net, x, st_mask, 0.05, 2), 2) > _loss(net, x, 2)

    def test_zero_budget_is_identity(self, st_mask, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 5)
        x = rng.standard_normal(100)
        np.testing.assert_array_equal(pgd_stt(net, x, st_mask, 0.0, true_class=0), x)

    def test_mask_blind_model_is_unmoved(self, blind_linear, st_mask, rng):
        X = rng.standard_normal((6, 100))
        y = np.array([0, 1, 2, 3, 0, 1])
        report = attack_report(blind_linear, (X, y, np.tile(st_mask, (6, 1))), AttackSpec("PGD_STT", 0.05, steps=5))
        assert report.flip_rate == 0.0
        assert report.delta_p_true == pytest.approx(0.0, abs=1e-12)
        assert report.saliency_cosine == pytest.approx(1.0)
        assert report.dice_at_k == pytest.approx(1.0)
        assert report.n == 6

    def test_fused_attack_only_touches_the_chosen_modality(self, st_mask, rng):
        fused = build_fused(build_branch(TIME_CONV, 100, 6, 4, 1), build_branch(LINEAR, 16, n_classes=4, seed=2))
        X = (rng.standard_normal((3, 100)), rng.standard_normal((3, 16)))
        adv = attack_batch(fused, X, [0, 1, 2], np.tile(st_mask, (3, 1)), 0.02, "PGD_STT", 4)
        np.testing.assert_array_equal(adv[1], X[1])
        assert np.max(np.abs(adv[0] - X[0])) <= 0.02 + 1e-12

    @pytest.mark.parametrize("kwargs", [dict(kind="CW", epsilon=0.01), dict(kind="FGSM_STT", epsilon=-0.1),
                                        dict(kind="PGD_STT", epsilon=0.01, steps=0)])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(InvalidArgument):
            AttackSpec(**kwargs)

    def test_default_step_size(self):
        assert AttackSpec("PGD_STT", 0.02).resolved_step_size == pytest.approx(0.005)


class TestSanityChecks:
    def test_cosine_rows_conventions(self):
        A = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        B = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(cosine_rows(A, B), [1.0, 1.0, 0.0])

    def test_model_agrees_with_itself(self, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 3)
        X = rng.standard_normal((4, 100))
        result = saliency_agreement(net, net, X, [0, 1, 2, 3], n_perm=100)
        assert result["mean_cosine"] == pytest.approx(1.0)
        assert result["p_value"] == pytest.approx(1 / 101)

    def test_randomized_weights_report(self, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 3)
        result = sanity_randomized_weights(net, rng.standard_normal((4, 100)), seed=1, n_perm=100)
        assert set(result) == {"mean_cosine", "mean_abs_cosine", "p_value", "n"}
        assert 1 / 101 <= result["p_value"] <= 1.0
        assert result["n"] == 4

    def test_shuffled_labels_report(self, st_mask, rng):
        net = build_branch(TIME_CONV, 100, 6, 4, 3)
        X = rng.standard_normal((20, 100))
        y = np.repeat([0, 1, 2, 3], 5)
        result = sanity_shuffled_labels(net, (X, y), TrainConfig(max_epochs=2, batch=8), 5, np.tile(st_mask, (20, 1)),
                                        window=10, n_perm=100)
        assert 0.0 <= result["chance_low"] <= 0.25 <= result["chance_high"] <= 1.0
        assert 0.0 <= result["val_accuracy"] <= 1.0
        assert 0.0 <= result["nmi"] <= 1.0
        assert 1 / 101 <= result["p_value"] <= 1.0
