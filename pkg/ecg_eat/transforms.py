"""
Modality representations of a preprocessed record.

    time      fixed-length standardized waveform (crop or edge-pad)
    frequency band-averaged magnitude spectrum, L2-normalized
    scalogram complex-Morlet CWT power, bilinearly resized to a square grid
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pywt
from scipy import ndimage
from scipy import signal as sps

from ecg_eat.module_utils.errors import require
from ecg_eat.signals import crop_or_pad

LOGGER = logging.getLogger(__name__)

TIME_LEN = 1000
N_BINS = 128
SCALOGRAM_SIZE = 32


@dataclass(eq=False)
class FeatureBundle:
    """The three modality inputs of one record."""

    time_vec: np.ndarray
    freq_vec: np.ndarray
    scalogram: np.ndarray
    label: Optional[str] = None
    stt_mask: Optional[np.ndarray] = None

    def modality(self, name):
        return {"time": self.time_vec, "freq": self.freq_vec, "tf": self.scalogram}[name]


@dataclass(frozen=True)
class CwtConfig:
    """Complex Morlet CWT settings; `scales` are in samples and strictly increasing."""

    scales: tuple
    mother_wavelet: str = "Morlet"
    center_freq: float = 1.0
    bandwidth: float = 1.5
    out_size: int = SCALOGRAM_SIZE

    @classmethod
    def from_band(cls, fs, f_min=1.0, f_max=40.0, n_scales=32, center_freq=1.0, bandwidth=1.5, out_size=SCALOGRAM_SIZE):
        """Log-spaced scales whose Morlet centre frequencies cover [f_min, f_max] Hz."""
        require(0 < f_min < f_max < fs / 2.0, f"CWT band ({f_min}, {f_max}) must lie inside (0, fs/2)")
        freqs = np.geomspace(f_max, f_min, n_scales)
        return cls(tuple(center_freq * fs / freqs), "Morlet", center_freq, bandwidth, out_size)

    @property
    def wavelet_name(self):
        return f"cmor{self.bandwidth}-{self.center_freq}"

    def support(self, scale):
        """Samples covered by +-2 sigma of the Morlet envelope at `scale`."""
        return 4.0 * np.sqrt(self.bandwidth / 2.0) * scale

    def frequencies(self, fs):
        return self.center_freq * fs / np.asarray(self.scales)

    def validate(self, n_samples):
        scales = np.asarray(self.scales, dtype=np.float64)
        require(self.mother_wavelet == "Morlet", f"unsupported mother wavelet {self.mother_wavelet!r}")
        require(scales.ndim == 1 and scales.size >= 1 and bool(np.all(scales > 0)), "scales must be positive")
        require(bool(np.all(np.diff(scales) > 0)), "scales must be strictly increasing")
        require(self.out_size >= 8, f"out_size must be >= 8, got {self.out_size}")
        require(
            self.support(scales[-1]) <= n_samples,
            f"scale {scales[-1]:.1f} needs {self.support(scales[-1]):.0f} samples, signal has {n_samples}",
        )


# #############################################################################
# FREQUENCY DOMAIN
# #############################################################################
def fft_band_energy(x, n_bins=N_BINS):
    """One-sided spectral energy of the detrended signal summed into `n_bins` equal-width bands.

    The bands sum to the time-domain energy of the detrended signal.
    """
    x = np.asarray(x, dtype=np.float64)
    require(x.ndim == 1 and x.size >= 2 * n_bins, f"signal needs at least {2 * n_bins} samples, got {x.size}")
    detrended = sps.detrend(x, type="linear")
    n = detrended.size
    power = np.abs(np.fft.rfft(detrended)) ** 2 / n
    last = power.size - 1 if n % 2 == 0 else power.size
    power[1:last] *= 2.0
    return np.array([chunk.sum() for chunk in np.array_split(power, n_bins)])


def fft_features(x, n_bins=N_BINS):
    """Root band energies, L2-normalized; a signal with no AC content maps to zeros."""
    energy = fft_band_energy(x, n_bins)
    magnitude = np.sqrt(energy)
    norm = np.linalg.norm(magnitude)
    if norm <= 1e-9 * (np.linalg.norm(x) + 1e-300):
        return np.zeros(n_bins)
    return magnitude / norm


# #############################################################################
# TIME-FREQUENCY DOMAIN
# #############################################################################
def resize_bilinear(grid, s):
    """Bilinear resize of an H x W grid to s x s with corners aligned."""
    grid = np.asarray(grid, dtype=np.float64)
    require(s >= 2, f"output size must be >= 2, got {s}")
    require(grid.ndim == 2 and grid.shape[0] >= 2 and grid.shape[1] >= 2, "grid must be at least 2 x 2")
    rows = np.linspace(0.0, grid.shape[0] - 1, s)
    cols = np.linspace(0.0, grid.shape[1] - 1, s)
    coords = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(grid, coords, order=1, mode="nearest")


def cwt_scalogram(x, config):
    """|CWT|^2 on the scale x time grid, resized to out_size x out_size."""
    x = np.asarray(x, dtype=np.float64)
    config.validate(x.size)
    coefs, _ = pywt.cwt(x, np.asarray(config.scales, dtype=np.float64), config.wavelet_name, method="fft")
    power = np.abs(coefs) ** 2
    return np.maximum(resize_bilinear(power, config.out_size), 0.0)


# #############################################################################
# BUNDLES
# #############################################################################
def standardize(x):
    std = x.std()
    return (x - x.mean()) / (std if std > 0 else 1.0)


def build_bundle(record, cwt_config, time_len=TIME_LEN, n_bins=N_BINS):
    """FeatureBundle for one preprocessed record.

    The spectrum is taken over the whole record, the waveform and scalogram over the
    first `time_len` samples so that the scalogram columns stay aligned with the mask.
    """
    window, mask = crop_or_pad(record, time_len)
    time_vec = standardize(window)
    return FeatureBundle(
        time_vec=time_vec,
        freq_vec=fft_features(record.samples, n_bins),
        scalogram=cwt_scalogram(time_vec, cwt_config),
        label=record.label,
        stt_mask=mask,
    )


def stack_modality(bundles, name):
    """N x ... array of one modality across bundles."""
    return np.stack([b.modality(name) for b in bundles])


def save_bundles(store, prefix, bundles):
    """Persist one split as per-modality CSV matrices plus labels and masks."""
    store.put_matrix(f"{prefix}/time.csv", stack_modality(bundles, "time"))
    store.put_matrix(f"{prefix}/freq.csv", stack_modality(bundles, "freq"))
    scalograms = stack_modality(bundles, "tf")
    store.put_matrix(f"{prefix}/scalogram.csv", scalograms.reshape(len(bundles), -1))
    store.put_matrix(f"{prefix}/stt_mask.csv", np.stack([b.stt_mask for b in bundles]).astype(float))
    store.put_rows(f"{prefix}/labels.csv", ["label"], [[b.label] for b in bundles])


def load_bundles(store, prefix):
    time = store.get_matrix(f"{prefix}/time.csv")
    freq = store.get_matrix(f"{prefix}/freq.csv")
    flat = store.get_matrix(f"{prefix}/scalogram.csv")
    side = int(round(np.sqrt(flat.shape[1])))
    masks = store.get_matrix(f"{prefix}/stt_mask.csv") > 0.5
    _, rows = store.get_rows(f"{prefix}/labels.csv")
    return [
        FeatureBundle(time[i], freq[i], flat[i].reshape(side, side), rows[i][0], masks[i]) for i in range(time.shape[0])
    ]
