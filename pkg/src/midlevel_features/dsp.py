#!/usr/bin/env python3
"""
Signal-processing frontend:
- load_wav (PCM WAV → mono AudioClip)
- stft_magnitude, mel_spectrogram, crop_patch
- chroma, bark_bands, onset_envelope, spectral_peaks

Every function here is a pure function of its arguments.
"""
import functools
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import librosa
import numpy as np
import scipy.fft
import scipy.signal
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view

from midlevel_features.errors import (
    ClipTooShort,
    CorruptFile,
    InvalidArgument,
    InvalidMelCount,
    InvalidRange,
    TooFewFrames,
    UnsupportedFormat,
)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 44100
DEFAULT_WINDOW = 2048
DEFAULT_HOP = 1536
DEFAULT_N_MELS = 299
DEFAULT_FMAX = 18000.0
LOG_OFFSET = 1e-10

CHROMA_FMIN = 55.0
CHROMA_FMAX = 8000.0
PITCH_CLASSES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# Zwicker critical-band edges in Hz (24 bands)
# fmt: off
BARK_EDGES = (
    0, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480, 1720,
    2000, 2320, 2700, 3150, 3700, 4400, 5300, 6400, 7700, 9500, 12000, 15500,
)
# fmt: on

_WAV_FORMATS = {"WAV", "WAVEX"}
_PCM_SUBTYPES = {"PCM_U8", "PCM_S8", "PCM_16", "PCM_24", "PCM_32", "FLOAT"}


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono samples in [-1, 1] with their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InvalidArgument("AudioClip needs a non-empty 1-D sample buffer")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgument("AudioClip samples must be finite")
        if np.max(np.abs(samples)) > 1.0 + 1e-12:
            raise InvalidArgument(
                "AudioClip samples exceed [-1, 1]; use AudioClip.from_samples"
            )
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidArgument(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @classmethod
    def from_samples(cls, samples, sample_rate, normalize=True):
        """Build a clip, peak-normalizing buffers that leave [-1, 1]."""
        samples = np.asarray(samples, dtype=np.float64)
        peak = np.max(np.abs(samples)) if samples.size else 0.0
        if normalize and peak > 1.0:
            samples = samples / peak
        return cls(samples, sample_rate)

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True, eq=False)
class MagnitudeSpectrogram:
    frames: np.ndarray
    window_size: int
    hop: int
    sample_rate: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.window_size // 2 + 1:
            raise InvalidArgument("spectrogram needs window_size/2 + 1 bins per frame")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_bins(self):
        return self.frames.shape[1]

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop

    @property
    def bin_frequencies(self):
        return np.arange(self.n_bins) * self.sample_rate / self.window_size


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-compressed mel frames [n_frames x n_mels]."""

    frames: np.ndarray
    n_mels: int
    fmax: float
    sample_rate: int
    hop: int

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def frame_rate(self):
        return self.sample_rate / self.hop


@dataclass(frozen=True, eq=False)
class MelPatch:
    """Square [time x mel] network input scaled to [0, 1]."""

    values: np.ndarray
    offset: int = 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise InvalidArgument(f"MelPatch must be square, got {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise InvalidArgument("MelPatch values must lie in [0, 1]")

    @property
    def size(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class ChromaGram:
    frames: np.ndarray

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class BarkBandGram:
    frames: np.ndarray
    edges: tuple = BARK_EDGES


@dataclass(frozen=True, eq=False)
class OnsetEnvelope:
    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvalidArgument("onset envelope must be 1-D")
        if values.size and values.min() < 0.0:
            raise InvalidArgument("onset envelope values must be non-negative")
        if self.frame_rate <= 0:
            raise InvalidArgument("onset envelope frame rate must be positive")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True, eq=False)
class SpectralPeakList:
    """Peaks in ascending frequency order."""

    frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return self.frequencies.size


def _resample(samples, rate, target_rate):
    n_out = int(round(samples.size * target_rate / rate))
    positions = np.arange(n_out) * (rate / target_rate)
    return np.interp(positions, np.arange(samples.size), samples)


def _missing_data_bytes(path):
    """Bytes the RIFF data chunk declares beyond the end of the file."""
    size = Path(path).stat().st_size
    with open(path, "rb") as f:
        if f.read(12)[:4] not in (b"RIFF", b"RF64"):
            return 0
        pos = 12
        while pos + 8 <= size:
            f.seek(pos)
            chunk_id, chunk_size = struct.unpack("<4sI", f.read(8))
            if chunk_id == b"data":
                # RF64 keeps the real size in its ds64 chunk
                if chunk_size == 0xFFFFFFFF:
                    return 0
                return max(0, pos + 8 + chunk_size - size)
            pos += 8 + chunk_size + (chunk_size & 1)
    return 0


def load_wav(path, target_rate=DEFAULT_SAMPLE_RATE):
    """
    Read a PCM WAV file into a mono clip.

    Stereo is downmixed by channel mean and integer formats are scaled to
    [-1, 1]. When ``target_rate`` is set and differs from the file's rate the
    signal is linearly interpolated onto the new sample grid.
    """
    if not Path(path).is_file():
        raise FileNotFoundError(f"No such WAV file: {path}")
    path = str(Path(path))
    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise CorruptFile(f"{path}: unreadable WAV header ({e})") from e

    if info.format not in _WAV_FORMATS or info.subtype not in _PCM_SUBTYPES:
        raise UnsupportedFormat(f"{path}: {info.format}/{info.subtype} is not PCM WAV")
    if not 1 <= info.channels <= 2:
        raise UnsupportedFormat(f"{path}: {info.channels} channels (max 2)")
    missing = _missing_data_bytes(path)
    if missing:
        raise CorruptFile(f"{path}: data chunk is {missing} bytes short")

    try:
        data, rate = sf.read(path, dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise CorruptFile(f"{path}: truncated or damaged data ({e})") from e
    if data.shape[0] == 0:
        raise CorruptFile(f"{path}: no audio frames")
    if data.shape[0] < info.frames:
        raise CorruptFile(f"{path}: read {data.shape[0]} of {info.frames} frames")
    if not np.all(np.isfinite(data)):
        raise CorruptFile(f"{path}: non-finite samples")

    mono = np.clip(data.mean(axis=1), -1.0, 1.0)
    if target_rate and rate != target_rate:
        logger.debug(f"Resampling {path} from {rate} Hz to {target_rate} Hz")
        mono = np.clip(_resample(mono, rate, target_rate), -1.0, 1.0)
        rate = target_rate
    return AudioClip(mono, rate)


def n_stft_frames(length, window=DEFAULT_WINDOW, hop=DEFAULT_HOP):
    return 1 + (length - window) // hop


def stft_magnitude(clip, window=DEFAULT_WINDOW, hop=DEFAULT_HOP):
    """Hann-windowed magnitude STFT without center padding."""
    if window < 2 or hop < 1:
        raise InvalidArgument(f"invalid window/hop ({window}, {hop})")
    if len(clip) < window:
        raise ClipTooShort(f"clip has {len(clip)} samples, window needs {window}")
    frames = sliding_window_view(clip.samples, window)[::hop]
    hann = scipy.signal.get_window("hann", window)
    mags = np.abs(scipy.fft.rfft(frames * hann, axis=1))
    return MagnitudeSpectrogram(mags, window, hop, clip.sample_rate)


def mel_band_centers(n_mels=DEFAULT_N_MELS, fmax=DEFAULT_FMAX):
    return librosa.mel_frequencies(n_mels + 2, fmin=0.0, fmax=fmax, htk=True)[1:-1]


@functools.lru_cache(maxsize=16)
def mel_filterbank(n_bins, sample_rate, window_size, n_mels, fmax):
    """
    Triangular HTK-scale filters, each scaled so its largest weight is 1.

    A filter narrower than the FFT bin spacing would cover no bin at all; it
    collapses onto the bin nearest its center instead.
    """
    with warnings.catch_warnings():
        # librosa warns about the empty filters handled below
        warnings.simplefilter("ignore", UserWarning)
        weights = librosa.filters.mel(
            sr=sample_rate,
            n_fft=window_size,
            n_mels=n_mels,
            fmin=0.0,
            fmax=fmax,
            htk=True,
            norm=None,
            dtype=np.float64,
        )[:, :n_bins]
    freqs = np.arange(n_bins) * sample_rate / window_size
    center = mel_band_centers(n_mels, fmax)

    peak = weights.max(axis=1)
    empty = np.flatnonzero(peak <= 0.0)
    if empty.size:
        nearest = np.argmin(np.abs(freqs[None, :] - center[empty, None]), axis=1)
        weights[empty, nearest] = 1.0
        peak[empty] = 1.0
    weights /= peak[:, None]
    weights.setflags(write=False)
    return weights


def mel_spectrogram(spec, n_mels=DEFAULT_N_MELS, fmax=DEFAULT_FMAX):
    if fmax <= 0 or fmax > spec.sample_rate / 2:
        raise InvalidRange(f"fmax {fmax} outside (0, {spec.sample_rate / 2}]")
    if n_mels < 1 or n_mels > spec.n_bins:
        raise InvalidMelCount(f"n_mels {n_mels} outside [1, {spec.n_bins}]")
    fb = mel_filterbank(
        spec.n_bins, spec.sample_rate, spec.window_size, n_mels, float(fmax)
    )
    frames = np.log(spec.frames @ fb.T + LOG_OFFSET)
    return MelSpectrogram(frames, n_mels, float(fmax), spec.sample_rate, spec.hop)


def crop_patch(mel, offset=0, seed=None):
    """
    Cut a square patch (n_mels frames) and min-max scale it to [0, 1].

    ``offset`` is a frame index or ``"random"``, in which case the start is
    drawn from ``numpy.random.default_rng(seed)``.
    """
    size = mel.n_mels
    n = mel.n_frames
    if n < size:
        raise TooFewFrames(f"{n} frames, patch needs {size}")
    if isinstance(offset, str):
        if offset != "random":
            raise InvalidArgument(f"unknown offset mode '{offset}'")
        start = int(np.random.default_rng(seed).integers(0, n - size + 1))
    else:
        start = int(offset)
        if not 0 <= start <= n - size:
            raise InvalidArgument(f"offset {start} outside [0, {n - size}]")

    block = mel.frames[start : start + size, :]
    lo, hi = block.min(), block.max()
    if hi - lo <= 0.0:
        values = np.zeros_like(block)
    else:
        values = np.clip((block - lo) / (hi - lo), 0.0, 1.0)
    return MelPatch(values, start)


def clip_to_patch(clip, size=DEFAULT_N_MELS, offset=0, seed=None):
    """The network input recipe: STFT → mel (``size`` bands) → square crop."""
    spec = stft_magnitude(clip)
    fmax = min(DEFAULT_FMAX, clip.sample_rate / 2)
    return crop_patch(mel_spectrogram(spec, n_mels=size, fmax=fmax), offset, seed)


def chroma(spec):
    freqs = spec.bin_frequencies
    mask = (freqs >= CHROMA_FMIN) & (freqs <= CHROMA_FMAX)
    classes = (np.rint(12.0 * np.log2(freqs[mask] / 440.0)).astype(int) + 9) % 12
    fold = np.zeros((classes.size, 12))
    fold[np.arange(classes.size), classes] = 1.0

    energy = spec.frames[:, mask] ** 2 @ fold
    totals = energy.sum(axis=1, keepdims=True)
    frames = np.divide(energy, totals, out=np.zeros_like(energy), where=totals > 0)
    return ChromaGram(frames)


def bark_bands(spec):
    freqs = spec.bin_frequencies
    band = np.searchsorted(BARK_EDGES, freqs, side="right") - 1
    frames = np.zeros((spec.n_frames, len(BARK_EDGES) - 1))
    power = spec.frames**2
    for b in range(frames.shape[1]):
        cols = band == b
        if cols.any():
            frames[:, b] = power[:, cols].sum(axis=1)
    return BarkBandGram(frames)


def onset_envelope(mel):
    """Half-wave rectified spectral flux; the first value is 0."""
    if mel.n_frames < 2:
        raise TooFewFrames("onset envelope needs at least 2 frames")
    rise = np.maximum(np.diff(mel.frames, axis=0), 0.0).sum(axis=1)
    return OnsetEnvelope(np.concatenate([[0.0], rise]), mel.frame_rate)


def spectral_peaks(frame, sample_rate, window_size, max_peaks=100, floor_db=-60.0):
    """
    Local maxima of one magnitude frame above ``max * 10**(floor_db/20)``.

    Frequency and amplitude are refined by a parabola through the dB values
    of the peak bin and its neighbours. The ``max_peaks`` loudest peaks are
    kept and returned in ascending frequency.
    """
    mag = np.asarray(frame, dtype=np.float64)
    if mag.ndim != 1 or mag.size == 0:
        raise InvalidArgument("spectral_peaks needs a non-empty 1-D frame")
    top = mag.max()
    if mag.size < 3 or top <= 0.0:
        return SpectralPeakList()

    threshold = top * 10.0 ** (floor_db / 20.0)
    left, mid, right = mag[:-2], mag[1:-1], mag[2:]
    idx = np.flatnonzero((mid > left) & (mid >= right) & (mid > threshold)) + 1
    if idx.size == 0:
        return SpectralPeakList()

    db = 20.0 * np.log10(np.maximum(mag, np.finfo(np.float64).tiny))
    a, b, c = db[idx - 1], db[idx], db[idx + 1]
    curvature = a - 2.0 * b + c
    safe = np.where(curvature < 0.0, curvature, -1.0)
    shift = np.where(curvature < 0.0, 0.5 * (a - c) / safe, 0.0)
    freqs = np.clip((idx + shift) * sample_rate / window_size, 0.0, sample_rate / 2)
    amps = 10.0 ** ((b - 0.25 * (a - c) * shift) / 20.0)

    keep = np.sort(np.argsort(-amps, kind="stable")[:max_peaks])
    return SpectralPeakList(freqs[keep], amps[keep])
