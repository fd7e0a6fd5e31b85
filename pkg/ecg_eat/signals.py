"""
Single-lead ECG records: synthesis, preprocessing, noise injection and QRS diagnostics.

Records are synthesized from Gaussian wave bumps on an RR grid so that every record comes
with exact fiducials and an exact ST-T mask. The preprocessing chain is a zero-phase
Butterworth bandpass followed by Daubechies-4 soft-threshold denoising.
"""

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pywt
from scipy import signal as sps

from ecg_eat.module_utils.errors import ArtifactError, require
from ecg_eat.module_utils.rng import make_rng

LOGGER = logging.getLogger(__name__)

CLASSES = ("Normal", "STEMI", "HistoryMI", "AbnormalHB")

# fiducial columns, one row per beat
P_ONSET, QRS_ONSET, J_POINT, T_END = range(4)

NOISE_KINDS = ("Gaussian", "BaselineWander", "Muscle")


# #############################################################################
# DATA MODEL
# #############################################################################
@dataclass(eq=False)
class EcgRecord:
    """A sampled single-lead waveform with fiducials and its ST-T mask."""

    samples: np.ndarray
    fs: float
    label: str
    fiducials: np.ndarray
    stt_mask: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.fiducials = np.asarray(self.fiducials, dtype=np.int64).reshape(-1, 4)
        self.stt_mask = np.asarray(self.stt_mask, dtype=bool)
        require(self.fs > 0, f"fs must be positive, got {self.fs}")
        require(self.label in CLASSES, f"unknown label {self.label!r}, expected one of {CLASSES}")
        require(self.samples.ndim == 1, "samples must be one-dimensional")
        require(self.stt_mask.shape == self.samples.shape, "stt_mask must match samples in length")
        if self.fiducials.size:
            require(bool(np.all(np.diff(self.fiducials, axis=1) > 0)), "fiducials must increase within each beat")
            require(
                int(self.fiducials.min()) >= 0 and int(self.fiducials.max()) < self.samples.size,
                "fiducials fall outside the record",
            )

    @property
    def duration(self):
        return self.samples.size / self.fs

    @property
    def qrs_windows(self):
        """(start, stop) sample slices from QRS onset to J-point, stop exclusive."""
        return [(int(b[QRS_ONSET]), int(b[J_POINT]) + 1) for b in self.fiducials]


@dataclass(frozen=True)
class FilterSpec:
    """Butterworth bandpass settings."""

    lo_hz: float
    hi_hz: float
    order: int = 4
    zero_phase: bool = True

    def validate(self, fs):
        require(self.order >= 1, f"filter order must be >= 1, got {self.order}")
        require(
            0 < self.lo_hz < self.hi_hz < fs / 2.0,
            f"band edges must satisfy 0 < lo < hi < fs/2 (lo={self.lo_hz}, hi={self.hi_hz}, fs={fs})",
        )


@dataclass(frozen=True)
class DenoiseSpec:
    """Wavelet soft-threshold denoising settings."""

    wavelet_levels: int = 4
    threshold: float = 0.05
    wavelet: str = "db4"

    def validate(self, n_samples):
        require(self.wavelet_levels >= 1, f"wavelet_levels must be >= 1, got {self.wavelet_levels}")
        require(self.threshold >= 0, f"threshold must be >= 0, got {self.threshold}")
        require(
            n_samples >= 2**self.wavelet_levels,
            f"signal of {n_samples} samples is too short for {self.wavelet_levels} wavelet levels",
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise description; only the fields of `kind` are read.

    Gaussian noise is scaled to `snr_db` and then multiplied by `amplitude`, so amplitude 1
    gives the target SNR exactly. For the other kinds `amplitude` is in millivolts (peak for
    baseline wander, RMS for muscle noise).
    """

    kind: str
    snr_db: float = 15.0
    wander_hz: float = 0.15
    band_hz: tuple = (20.0, 50.0)
    amplitude: float = 1.0
    seed: int = 0

    def validate(self, fs):
        require(self.kind in NOISE_KINDS, f"unknown noise kind {self.kind!r}")
        require(self.amplitude >= 0, f"noise amplitude must be >= 0, got {self.amplitude}")
        if self.kind == "BaselineWander":
            require(0 < self.wander_hz < fs / 2.0, f"wander frequency {self.wander_hz} Hz is outside (0, fs/2)")
        if self.kind == "Muscle":
            lo, hi = self.band_hz
            require(hi < fs / 2.0, f"muscle band {self.band_hz} exceeds the Nyquist frequency {fs / 2.0}")
            FilterSpec(lo, hi).validate(fs)


# #############################################################################
# SYNTHESIS
# #############################################################################
@dataclass(frozen=True)
class Wave:
    amp: float
    offset: float
    width: float


@dataclass(frozen=True)
class Morphology:
    waves: dict = field(default_factory=dict)
    notches: tuple = ()
    rr_mean: float = 0.8
    rr_spread: float = 0.0
    rr_jitter: float = 0.01


_BASE_WAVES = {
    "P": Wave(0.15, -0.20, 0.025),
    "Q": Wave(-0.10, -0.035, 0.008),
    "R": Wave(1.00, 0.0, 0.010),
    "S": Wave(-0.25, 0.035, 0.009),
    "T": Wave(0.30, 0.28, 0.035),
}

MORPHOLOGY = {
    "Normal": Morphology(waves=_BASE_WAVES, rr_mean=0.8),
    "STEMI": Morphology(waves=_BASE_WAVES, rr_mean=0.8),
    "HistoryMI": Morphology(
        waves={
            **_BASE_WAVES,
            "Q": Wave(-0.35, -0.050, 0.0144),
            "R": Wave(0.80, 0.0, 0.018),
            "S": Wave(-0.30, 0.055, 0.0162),
            "T": Wave(0.18, 0.30, 0.035),
        },
        notches=(Wave(0.14, 0.022, 0.004), Wave(0.10, -0.022, 0.004)),
        rr_mean=0.85,
    ),
    "AbnormalHB": Morphology(waves=_BASE_WAVES, rr_mean=0.95, rr_spread=0.18, rr_jitter=0.0),
}

FIRST_R_SEC = 0.4
TAIL_SEC = 0.55
ST_RAMP_SEC = 0.02


def _gauss(t, wave, scale=1.0):
    return scale * wave.amp * np.exp(-0.5 * ((t - wave.offset) / wave.width) ** 2)


def _rr_intervals(morph, n_beats, rng):
    base = morph.rr_mean * rng.uniform(0.92, 1.08)
    if morph.rr_spread > 0:
        return base * (1.0 + morph.rr_spread * rng.uniform(-1.0, 1.0, n_beats))
    return base * (1.0 + morph.rr_jitter * rng.standard_normal(n_beats))


def _beat_fiducials(r_sec, waves, notches, fs):
    p, q, s, t = waves["P"], waves["Q"], waves["S"], waves["T"]
    j_sec = max([s.offset + 3 * s.width] + [n.offset + 3 * n.width for n in notches])
    return [
        int(round((r_sec + p.offset - 3 * p.width) * fs)),
        int(round((r_sec + q.offset - 3 * q.width) * fs)),
        int(round((r_sec + j_sec) * fs)),
        int(round((r_sec + t.offset + 3 * t.width) * fs)),
    ]


def _st_plateau(n, start, stop, fs, elevation):
    """Raised-cosine tapered plateau over [start, stop]."""
    out = np.zeros(n)
    length = stop - start + 1
    ramp = max(1, min(int(round(ST_RAMP_SEC * fs)), length // 2))
    window = np.ones(length)
    edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 0.5) / ramp)
    window[:ramp] = edge
    window[-ramp:] = edge[::-1]
    out[start : stop + 1] = elevation * window
    return out


def synth_ecg(label, fs=250.0, n_beats=8, seed=0, st_elevation_mv=0.2, noise_mv=0.02):
    """Synthesize a labelled record with exact fiducials and ST-T mask.

    Normal beats sit on a regular RR grid with an isoelectric ST segment, STEMI adds a
    plateau of `st_elevation_mv` over every ST-T window, HistoryMI widens the QRS and adds
    two notches, AbnormalHB draws RR intervals with high variability.
    """
    require(label in CLASSES, f"unknown label {label!r}, expected one of {CLASSES}")
    require(fs >= 100, f"fs must be >= 100 Hz, got {fs}")
    require(n_beats >= 1, f"n_beats must be >= 1, got {n_beats}")

    rng = make_rng(seed)
    morph = MORPHOLOGY[label]
    scale = rng.uniform(0.85, 1.15)
    rr = _rr_intervals(morph, n_beats, rng)
    r_times = FIRST_R_SEC + np.concatenate(([0.0], np.cumsum(rr[:-1])))
    n = int(round(fs * (r_times[-1] + TAIL_SEC)))
    t = np.arange(n) / fs

    samples = np.zeros(n)
    fiducials = []
    for r_sec in r_times:
        local = t - r_sec
        near = np.abs(local) < 0.6
        for wave in morph.waves.values():
            samples[near] += _gauss(local[near], wave, scale)
        for notch in morph.notches:
            samples[near] += _gauss(local[near], notch, scale)
        fiducials.append(_beat_fiducials(r_sec, morph.waves, morph.notches, fs))
    fiducials = np.array(fiducials, dtype=np.int64)

    stt_mask = np.zeros(n, dtype=bool)
    for beat in fiducials:
        stt_mask[beat[J_POINT] : beat[T_END] + 1] = True
        if label == "STEMI":
            samples += _st_plateau(n, beat[J_POINT], beat[T_END], fs, st_elevation_mv)

    samples += noise_mv * rng.standard_normal(n)
    LOGGER.debug("synthesized %s record: %d beats, %d samples, seed %d", label, n_beats, n, seed)
    return EcgRecord(samples=samples, fs=float(fs), label=label, fiducials=fiducials, stt_mask=stt_mask, seed=int(seed))


def image_to_signal(matrix):
    """Collapse an H x W intensity grid into an H-sample signal by averaging columns."""
    grid = np.asarray(matrix, dtype=np.float64)
    require(grid.ndim == 2 and grid.shape[0] >= 1 and grid.shape[1] >= 1, "matrix must be a non-empty 2-D grid")
    return grid.mean(axis=1)


# #############################################################################
# PREPROCESSING
# #############################################################################
def soft_threshold(detail, lam):
    """sign(d) * max(|d| - lam, 0), elementwise."""
    require(lam >= 0, f"threshold must be >= 0, got {lam}")
    return pywt.threshold(np.asarray(detail, dtype=np.float64), lam, mode="soft")


def dwt_denoise(x, spec):
    """Decompose, soft-threshold every detail level with one global threshold, reconstruct."""
    x = np.asarray(x, dtype=np.float64)
    spec.validate(x.size)
    with warnings.catch_warnings():
        # deep decompositions of short signals are still perfectly reconstructing
        warnings.filterwarnings("ignore", message=".*boundary effects.*")
        coeffs = pywt.wavedec(x, spec.wavelet, mode="periodization", level=spec.wavelet_levels)
    approx, details = coeffs[0], coeffs[1:]
    if spec.threshold > 0:
        details = [soft_threshold(d, spec.threshold) for d in details]
    out = pywt.waverec([approx] + list(details), spec.wavelet, mode="periodization")
    return out[: x.size]


def _butter_sos(spec, fs):
    spec.validate(fs)
    return sps.butter(spec.order, [spec.lo_hz, spec.hi_hz], btype="bandpass", fs=fs, output="sos")


def bandpass(x, fs, spec):
    """Butterworth bandpass as cascaded second-order sections.

    With `zero_phase` the filter runs forward and backward over an even (reflect) extension
    of 3 x filter order samples at each end.
    """
    x = np.asarray(x, dtype=np.float64)
    sos = _butter_sos(spec, fs)
    if not spec.zero_phase:
        return sps.sosfilt(sos, x)
    padlen = min(3 * 2 * spec.order, x.size - 1)
    return sps.sosfiltfilt(sos, x, padtype="even", padlen=max(padlen, 0))


def filter_response(spec, fs, freqs):
    """Magnitude of the single-pass response at `freqs` (Hz); zero-phase mode squares it."""
    sos = _butter_sos(spec, fs)
    _, h = sps.sosfreqz(sos, worN=np.asarray(freqs, dtype=np.float64), fs=fs)
    gain = np.abs(h)
    return gain**2 if spec.zero_phase else gain


def preprocess(record, filter_spec, denoise_spec):
    """Bandpass then wavelet-denoise a record; fiducials and mask are carried over."""
    cleaned = dwt_denoise(bandpass(record.samples, record.fs, filter_spec), denoise_spec)
    return replace(record, samples=cleaned)


def bandpass_ablation(order=4):
    """The three band settings compared in the preprocessing ablation."""
    return {
        "narrow": FilterSpec(0.5, 4.5, order),
        "baseline": FilterSpec(0.5, 45.0, order),
        "wide": FilterSpec(0.05, 100.0, order),
    }


def crop_or_pad(record, length):
    """First `length` samples and mask; shorter records are edge-padded with mask False."""
    require(length >= 1, f"length must be >= 1, got {length}")
    samples, mask = record.samples, record.stt_mask
    if samples.size >= length:
        return samples[:length].copy(), mask[:length].copy()
    extra = length - samples.size
    return np.pad(samples, (0, extra), mode="edge"), np.pad(mask, (0, extra), constant_values=False)


# #############################################################################
# NOISE
# #############################################################################
def inject_noise(record, spec):
    """Return a copy of `record` with additive noise; labels, fiducials and mask are kept."""
    spec.validate(record.fs)
    if spec.amplitude == 0:
        return replace(record, samples=record.samples.copy())

    rng = make_rng(spec.seed)
    x = record.samples
    n = x.size
    if spec.kind == "Gaussian":
        white = rng.standard_normal(n)
        p_signal = np.mean(x**2)
        p_white = np.mean(white**2)
        noise = white * np.sqrt(p_signal / (10.0 ** (spec.snr_db / 10.0) * p_white))
        noise *= spec.amplitude
    elif spec.kind == "BaselineWander":
        t = np.arange(n) / record.fs
        phase = rng.uniform(0.0, 2.0 * np.pi)
        noise = spec.amplitude * np.sin(2.0 * np.pi * spec.wander_hz * t + phase)
    else:
        lo, hi = spec.band_hz
        shaped = bandpass(rng.standard_normal(n), record.fs, FilterSpec(lo, hi, 4, True))
        rms = np.sqrt(np.mean(shaped**2))
        noise = shaped * (spec.amplitude / rms) if rms > 0 else shaped
    LOGGER.debug("injected %s noise into %s record", spec.kind, record.label)
    return replace(record, samples=x + noise)


# #############################################################################
# QRS HIGH-FREQUENCY DIAGNOSTICS
# #############################################################################
NOTCH_PROMINENCE = 0.05
HF_BANDS = {"rms_30_45": (30.0, 45.0), "rms_45_90": (45.0, 90.0)}


def _turning_points(x, floor):
    """(index, kind) where the first derivative changes sign and the reversal clears `floor`.

    kind is +1 at a maximum and -1 at a minimum.
    """
    points = []
    anchor, direction = 0, 0
    lo = hi = x[0]
    for i in range(1, x.size):
        if direction == 0:
            lo, hi = min(lo, x[i]), max(hi, x[i])
            if x[i] - lo >= floor or hi - x[i] >= floor:
                anchor, direction = i, 1 if x[i] - lo >= floor else -1
        elif (x[i] - x[anchor]) * direction > 0:
            anchor = i
        elif abs(x[i] - x[anchor]) >= floor:
            points.append((anchor, direction))
            anchor, direction = i, -direction
    return points


def qrs_hf_metrics(record, prominence_fraction=NOTCH_PROMINENCE):
    """Notch count and band-limited RMS inside the QRS windows.

    Turning points are first-derivative sign changes whose reversal clears
    `prominence_fraction` of the R amplitude. A notch is a turning point that stays inside
    its lobe: a minimum above the floor or a maximum below minus the floor. The Q, R and S
    peaks themselves never count.
    """
    require(record.fiducials.size > 0, "record has no QRS fiducials")
    require(record.fs >= 200, f"fs must be >= 200 Hz for the 45-90 Hz band, got {record.fs}")

    windows = record.qrs_windows
    in_qrs = np.zeros(record.samples.size, dtype=bool)
    for start, stop in windows:
        in_qrs[start:stop] = True

    r_amplitude = float(np.max(record.samples[in_qrs]))
    notch_count = 0
    if r_amplitude > 0:
        floor = prominence_fraction * r_amplitude
        for start, stop in windows:
            x = record.samples[start:stop]
            notch_count += sum(1 for i, kind in _turning_points(x, floor) if kind * x[i] < -floor)

    metrics = {"notch_count": int(notch_count)}
    for name, (lo, hi) in HF_BANDS.items():
        banded = bandpass(record.samples, record.fs, FilterSpec(lo, hi, 4, True))
        metrics[name] = float(np.sqrt(np.mean(banded[in_qrs] ** 2)))
    return metrics


# #############################################################################
# PERSISTENCE
# #############################################################################
def save_record(record, path):
    """Write `<path>.csv` (t_sec, mv, stt_mask) and `<path>.json` (fs, label, fiducials, seed)."""
    base = Path(path)
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(base.with_suffix(".csv"), "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t_sec", "mv", "stt_mask"])
            for i, (value, flag) in enumerate(zip(record.samples, record.stt_mask)):
                writer.writerow([format(i / record.fs, ".17g"), format(float(value), ".17g"), int(flag)])
        sidecar = {
            "fs": record.fs,
            "label": record.label,
            "fiducials": record.fiducials.tolist(),
            "seed": record.seed,
        }
        with open(base.with_suffix(".json"), "w", encoding="utf-8") as handle:
            json.dump(sidecar, handle, sort_keys=True, indent=2)
    except OSError as error:
        raise ArtifactError(f"cannot write record ({error.strerror})", base) from error


def load_record(path):
    """Inverse of save_record."""
    base = Path(path)
    try:
        with open(base.with_suffix(".json"), encoding="utf-8") as handle:
            sidecar = json.load(handle)
        with open(base.with_suffix(".csv"), newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))[1:]
    except OSError as error:
        raise ArtifactError(f"cannot read record ({error.strerror})", base) from error
    return EcgRecord(
        samples=np.array([float(row[1]) for row in rows]),
        fs=float(sidecar["fs"]),
        label=sidecar["label"],
        fiducials=np.array(sidecar["fiducials"], dtype=np.int64).reshape(-1, 4),
        stt_mask=np.array([row[2] == "1" for row in rows], dtype=bool),
        seed=int(sidecar["seed"]),
    )
