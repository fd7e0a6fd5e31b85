import numpy as np
import pytest
from scipy import signal as sps

from ecg_eat.module_utils.errors import ArtifactError, InvalidArgument
from ecg_eat.signals import (
    CLASSES,
    J_POINT,
    QRS_ONSET,
    T_END,
    DenoiseSpec,
    EcgRecord,
    FilterSpec,
    NoiseSpec,
    bandpass,
    bandpass_ablation,
    crop_or_pad,
    dwt_denoise,
    filter_response,
    image_to_signal,
    inject_noise,
    load_record,
    preprocess,
    qrs_hf_metrics,
    save_record,
    soft_threshold,
    synth_ecg,
)

FS = 250.0
BASELINE = FilterSpec(0.5, 45.0, 4, True)


# #############################################################################
# SYNTHESIS
# #############################################################################
class TestSynthesis:
    @pytest.mark.parametrize("label", CLASSES)
    def test_mask_lies_between_j_point_and_t_end(self, label):
        record = synth_ecg(label, FS, 6, 11)
        expected = np.zeros(record.samples.size, dtype=bool)
        for beat in record.fiducials:
            expected[beat[J_POINT] : beat[T_END] + 1] = True
        np.testing.assert_array_equal(record.stt_mask, expected)
        assert record.fiducials.shape == (6, 4)

    def test_same_seed_same_record(self):
        a, b = synth_ecg("HistoryMI", FS, 5, 42), synth_ecg("HistoryMI", FS, 5, 42)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.fiducials, b.fiducials)

    def test_stemi_differs_from_normal_only_by_st_plateau(self, stemi_record, normal_record):
        diff = stemi_record.samples - normal_record.samples
        np.testing.assert_array_equal(stemi_record.fiducials, normal_record.fiducials)
        np.testing.assert_allclose(diff[~stemi_record.stt_mask], 0.0, atol=1e-12)
        assert diff[stemi_record.stt_mask].mean() > 0.16
        assert diff.max() == pytest.approx(0.2)

    def test_history_mi_has_wider_qrs(self):
        def qrs_width(label):
            beats = synth_ecg(label, FS, 6, 5).fiducials
            return np.mean(beats[:, J_POINT] - beats[:, QRS_ONSET])

        assert qrs_width("HistoryMI") > qrs_width("Normal")

    def test_abnormal_hb_has_irregular_rhythm(self):
        def rr_spread(label):
            return np.std(np.diff(synth_ecg(label, FS, 12, 9).fiducials[:, QRS_ONSET]))

        assert rr_spread("AbnormalHB") > 3 * rr_spread("Normal")

    @pytest.mark.parametrize(
        "kwargs",
        [dict(label="Unknown"), dict(label="Normal", fs=50.0), dict(label="Normal", n_beats=0)],
    )
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(InvalidArgument):
            synth_ecg(**kwargs)

    def test_record_rejects_mismatched_mask(self):
        with pytest.raises(InvalidArgument):
            EcgRecord(np.zeros(10), FS, "Normal", np.zeros((0, 4)), np.zeros(9, dtype=bool))

    def test_image_to_signal_averages_columns(self):
        np.testing.assert_allclose(image_to_signal([[1.0, 3.0], [2.0, 2.0], [0.0, 4.0]]), [2.0, 2.0, 2.0])
        with pytest.raises(InvalidArgument):
            image_to_signal(np.zeros((0, 3)))


# #############################################################################
# PREPROCESSING
# #############################################################################
class TestDenoise:
    def test_soft_threshold(self):
        np.testing.assert_allclose(soft_threshold([-2.0, -0.5, 0.0, 0.5, 2.0], 1.0), [-1.0, 0.0, 0.0, 0.0, 1.0])

    @pytest.mark.parametrize("n", [64, 256, 1024])
    def test_zero_threshold_is_identity(self, n, rng):
        x = rng.standard_normal(n)
        np.testing.assert_allclose(dwt_denoise(x, DenoiseSpec(4, 0.0)), x, atol=1e-10)

    def test_isolated_spikes_are_removed(self):
        n = 1024
        smooth = 0.5 * np.sin(2 * np.pi * np.arange(n) / n)
        positions = np.arange(10) * 100 + 20
        x = smooth.copy()
        x[positions] += 0.05
        residual = dwt_denoise(x, DenoiseSpec(5, 0.1)) - smooth
        assert np.sum(residual[positions] ** 2) <= 0.1 * 10 * 0.05**2

    def test_signal_too_short_for_levels(self):
        with pytest.raises(InvalidArgument):
            dwt_denoise(np.zeros(8), DenoiseSpec(4, 0.05))


class TestBandpass:
    def test_rejects_baseline_drift(self):
        t = np.arange(int(60 * FS)) / FS
        out = bandpass(np.sin(2 * np.pi * 0.1 * t), FS, BASELINE)
        middle = slice(int(20 * FS), int(40 * FS))
        assert np.max(np.abs(out[middle])) < 0.01

    def test_passes_in_band_tone(self):
        t = np.arange(int(20 * FS)) / FS
        out = bandpass(np.sin(2 * np.pi * 10.0 * t), FS, BASELINE)
        middle = slice(int(5 * FS), int(15 * FS))
        assert np.max(np.abs(out[middle])) >= 0.95

    def test_zero_phase_has_no_lag(self, normal_record):
        x = normal_record.samples - normal_record.samples.mean()
        y = bandpass(x, FS, BASELINE)
        corr = sps.correlate(y, x, mode="full")
        assert np.argmax(corr) - (x.size - 1) == 0

    @pytest.mark.parametrize("zero_phase", [True, False])
    def test_response_matches_pole_zero_design(self, zero_phase):
        spec = FilterSpec(0.5, 45.0, 4, zero_phase)
        freqs = np.array([0.1, 0.5, 5.0, 20.0, 45.0, 80.0])
        z, p, k = sps.butter(4, [0.5, 45.0], btype="bandpass", fs=FS, output="zpk")
        _, h = sps.freqz_zpk(z, p, k, worN=freqs, fs=FS)
        expected = np.abs(h) ** 2 if zero_phase else np.abs(h)
        np.testing.assert_allclose(filter_response(spec, FS, freqs), expected, rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("spec", [FilterSpec(45.0, 0.5), FilterSpec(0.5, 125.0), FilterSpec(0.5, 45.0, 0)])
    def test_invalid_band(self, spec):
        with pytest.raises(InvalidArgument):
            bandpass(np.zeros(500), FS, spec)

    def test_ablation_settings(self):
        settings = bandpass_ablation()
        assert (settings["narrow"].hi_hz, settings["baseline"].hi_hz, settings["wide"].hi_hz) == (4.5, 45.0, 100.0)
        for spec in settings.values():
            spec.validate(FS)

    def test_preprocess_keeps_annotations(self, stemi_record):
        cleaned = preprocess(stemi_record, BASELINE, DenoiseSpec())
        assert cleaned.samples.shape == stemi_record.samples.shape
        np.testing.assert_array_equal(cleaned.stt_mask, stemi_record.stt_mask)
        np.testing.assert_array_equal(cleaned.fiducials, stemi_record.fiducials)
        assert cleaned.label == "STEMI"

    def test_crop_or_pad(self, normal_record):
        samples, mask = crop_or_pad(normal_record, 100)
        np.testing.assert_array_equal(samples, normal_record.samples[:100])
        n = normal_record.samples.size
        samples, mask = crop_or_pad(normal_record, n + 10)
        assert samples.size == n + 10 and not mask[n:].any()
        np.testing.assert_array_equal(samples[n:], normal_record.samples[-1])


# #############################################################################
# NOISE
# #############################################################################
class TestNoise:
    def test_gaussian_hits_target_snr(self, normal_record):
        noisy = inject_noise(normal_record, NoiseSpec("Gaussian", snr_db=15.0, seed=4))
        noise = noisy.samples - normal_record.samples
        snr = 10 * np.log10(np.mean(normal_record.samples**2) / np.mean(noise**2))
        assert snr == pytest.approx(15.0, abs=1e-9)

    def test_baseline_wander_is_bounded(self, normal_record):
        noisy = inject_noise(normal_record, NoiseSpec("BaselineWander", wander_hz=0.15, amplitude=0.3, seed=1))
        assert np.max(np.abs(noisy.samples - normal_record.samples)) <= 0.3 + 1e-12

    def test_muscle_noise_rms(self, normal_record):
        noisy = inject_noise(normal_record, NoiseSpec("Muscle", band_hz=(20.0, 50.0), amplitude=0.05, seed=2))
        noise = noisy.samples - normal_record.samples
        assert np.sqrt(np.mean(noise**2)) == pytest.approx(0.05)

    @pytest.mark.parametrize("kind", ["Gaussian", "BaselineWander", "Muscle"])
    def test_zero_amplitude_leaves_record_unchanged(self, kind, stemi_record):
        noisy = inject_noise(stemi_record, NoiseSpec(kind, amplitude=0.0))
        np.testing.assert_array_equal(noisy.samples, stemi_record.samples)
        np.testing.assert_array_equal(noisy.stt_mask, stemi_record.stt_mask)
        assert noisy.label == stemi_record.label

    def test_same_seed_same_noise(self, normal_record):
        spec = NoiseSpec("Gaussian", seed=8)
        np.testing.assert_array_equal(inject_noise(normal_record, spec).samples,
                                      inject_noise(normal_record, spec).samples)

    def test_muscle_band_above_nyquist(self, normal_record):
        with pytest.raises(InvalidArgument):
            inject_noise(normal_record, NoiseSpec("Muscle", band_hz=(20.0, 150.0)))


# #############################################################################
# QRS DIAGNOSTICS
# #############################################################################
class TestQrsMetrics:
    def test_counts_one_notch_for_two_bumps(self):
        n = np.arange(500)
        samples = np.exp(-0.5 * ((n - 110) / 2.0) ** 2) + 0.8 * np.exp(-0.5 * ((n - 120) / 2.0) ** 2)
        record = EcgRecord(samples, FS, "HistoryMI", [[50, 100, 130, 200]], np.zeros(500, dtype=bool))
        metrics = qrs_hf_metrics(record)
        assert metrics["notch_count"] == 1
        assert set(metrics) == {"notch_count", "rms_30_45", "rms_45_90"}
        assert metrics["rms_30_45"] >= 0 and metrics["rms_45_90"] >= 0

    def test_counts_two_notches_for_three_bumps(self):
        n = np.arange(500)
        samples = sum(a * np.exp(-0.5 * ((n - c) / 2.0) ** 2) for a, c in [(1.0, 110), (0.9, 120), (0.8, 130)])
        record = EcgRecord(samples, FS, "HistoryMI", [[50, 100, 145, 200]], np.zeros(500, dtype=bool))
        assert qrs_hf_metrics(record)["notch_count"] == 2

    def test_counts_a_notch_on_a_negative_lobe(self):
        n = np.arange(500)
        samples = sum(a * np.exp(-0.5 * ((n - c) / 2.0) ** 2) for a, c in [(1.0, 110), (-0.5, 120), (-0.4, 128)])
        record = EcgRecord(samples, FS, "HistoryMI", [[50, 100, 140, 200]], np.zeros(500, dtype=bool))
        assert qrs_hf_metrics(record)["notch_count"] == 1

    def test_clean_qrs_has_no_notch(self):
        record = synth_ecg("Normal", FS, 3, 0, noise_mv=0.0)
        assert qrs_hf_metrics(record)["notch_count"] == 0

    def test_requires_sampling_rate_for_high_band(self):
        record = synth_ecg("Normal", 150.0, 3, 0)
        with pytest.raises(InvalidArgument):
            qrs_hf_metrics(record)


# #############################################################################
# PERSISTENCE
# #############################################################################
class TestPersistence:
    def test_save_and_load(self, tmp_path, stemi_record):
        save_record(stemi_record, tmp_path / "data" / "STEMI_0000")
        loaded = load_record(tmp_path / "data" / "STEMI_0000")
        np.testing.assert_array_equal(loaded.samples, stemi_record.samples)
        np.testing.assert_array_equal(loaded.stt_mask, stemi_record.stt_mask)
        np.testing.assert_array_equal(loaded.fiducials, stemi_record.fiducials)
        assert (loaded.fs, loaded.label, loaded.seed) == (250.0, "STEMI", 7)

    def test_missing_record(self, tmp_path):
        with pytest.raises(ArtifactError):
            load_record(tmp_path / "absent")
