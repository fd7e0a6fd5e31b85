import numpy as np
import pytest

from ecg_eat.module_utils.errors import InvalidArgument
from ecg_eat.signals import DenoiseSpec, FilterSpec, preprocess
from ecg_eat.transforms import (
    CwtConfig,
    build_bundle,
    cwt_scalogram,
    fft_band_energy,
    fft_features,
    load_bundles,
    resize_bilinear,
    save_bundles,
)

FS = 250.0


class TestFrequencyFeatures:
    @pytest.mark.parametrize("n", [1000, 1001])
    def test_band_energy_preserves_detrended_energy(self, n, rng):
        from scipy.signal import detrend

        x = rng.standard_normal(n) + np.linspace(0, 3, n)
        energy = fft_band_energy(x, 128)
        assert energy.size == 128
        assert energy.sum() == pytest.approx(np.sum(detrend(x) ** 2), rel=1e-9)

    def test_tone_lands_in_its_band(self):
        n = 1000
        x = np.sin(2 * np.pi * 10.0 * np.arange(n) / FS)
        energy = fft_band_energy(x, 128)
        bin_index = int(round(10.0 * n / FS))
        bands = np.array_split(np.arange(n // 2 + 1), 128)
        expected = next(i for i, band in enumerate(bands) if bin_index in band)
        assert int(np.argmax(energy)) == expected

    def test_features_are_unit_norm(self, rng):
        features = fft_features(rng.standard_normal(512), 64)
        assert np.linalg.norm(features) == pytest.approx(1.0)
        assert np.all(features >= 0)

    def test_constant_signal_maps_to_zeros(self):
        np.testing.assert_array_equal(fft_features(np.full(512, 3.0), 64), np.zeros(64))

    def test_signal_too_short(self):
        with pytest.raises(InvalidArgument):
            fft_features(np.zeros(100), 128)


class TestScalogram:
    def test_resize_keeps_corners_and_constants(self, rng):
        grid = rng.standard_normal((20, 50))
        out = resize_bilinear(grid, 8)
        assert out.shape == (8, 8)
        for (i, j), (r, c) in zip([(0, 0), (0, -1), (-1, 0), (-1, -1)], [(0, 0), (0, 7), (7, 0), (7, 7)]):
            assert out[r, c] == pytest.approx(grid[i, j])
        np.testing.assert_allclose(resize_bilinear(np.full((5, 9), 2.5), 4), 2.5)

    def test_tone_peaks_near_its_frequency(self):
        config = CwtConfig.from_band(FS, 1.0, 40.0, 32, out_size=32)
        x = np.sin(2 * np.pi * 10.0 * np.arange(1000) / FS)
        scalogram = cwt_scalogram(x, config)
        assert scalogram.shape == (32, 32)
        assert np.all(scalogram >= 0)
        row = int(np.argmax(scalogram[:, 8:24].sum(axis=1)))
        assert config.frequencies(FS)[row] == pytest.approx(10.0, rel=0.2)

    def test_scales_cover_band(self):
        config = CwtConfig.from_band(FS, 1.0, 40.0, 32)
        freqs = config.frequencies(FS)
        assert freqs[0] == pytest.approx(40.0) and freqs[-1] == pytest.approx(1.0)
        assert np.all(np.diff(config.scales) > 0)

    @pytest.mark.parametrize(
        "config",
        [
            CwtConfig(scales=(8.0, 4.0)),
            CwtConfig(scales=(4.0, 8.0), mother_wavelet="Mexican hat"),
            CwtConfig(scales=(4.0, 8.0), out_size=4),
            CwtConfig(scales=(4.0, 500.0)),
        ],
    )
    def test_invalid_config(self, config):
        with pytest.raises(InvalidArgument):
            cwt_scalogram(np.zeros(256), config)

    def test_band_outside_nyquist(self):
        with pytest.raises(InvalidArgument):
            CwtConfig.from_band(FS, 1.0, 200.0)


class TestBundles:
    def test_bundle_shapes(self, stemi_record):
        cleaned = preprocess(stemi_record, FilterSpec(0.5, 45.0), DenoiseSpec())
        bundle = build_bundle(cleaned, CwtConfig.from_band(FS))
        assert bundle.time_vec.shape == (1000,)
        assert bundle.time_vec.mean() == pytest.approx(0.0, abs=1e-9)
        assert bundle.time_vec.std() == pytest.approx(1.0)
        assert bundle.freq_vec.shape == (128,)
        assert bundle.scalogram.shape == (32, 32)
        np.testing.assert_array_equal(bundle.stt_mask, stemi_record.stt_mask[:1000])
        assert bundle.label == "STEMI"

    def test_save_and_load(self, store, stemi_record, normal_record):
        config = CwtConfig.from_band(FS, 4.0, 40.0, 16, out_size=8)
        bundles = [build_bundle(r, config, 256, 32) for r in (stemi_record, normal_record)]
        save_bundles(store, "features/train", bundles)
        loaded = load_bundles(store, "features/train")
        assert [b.label for b in loaded] == ["STEMI", "Normal"]
        for original, copy in zip(bundles, loaded):
            for name in ("time", "freq", "tf"):
                np.testing.assert_array_equal(copy.modality(name), original.modality(name))
            np.testing.assert_array_equal(copy.stt_mask, original.stt_mask)
