#!/usr/bin/env python3
"""
Hand-crafted scalar descriptors, one value per clip:
- sensory dissonance and inharmonicity (spectral peaks)
- pulse clarity and attack leap (onset envelope)
- HCDF and majorness (chroma)

There is deliberately no extractor for melodiousness or rhythmic complexity.
"""
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import scipy.signal

from midlevel_features.dsp import (
    AudioClip,
    MelSpectrogram,
    OnsetEnvelope,
    chroma,
    mel_spectrogram,
    onset_envelope,
    spectral_peaks,
    stft_magnitude,
)
from midlevel_features.errors import (
    ClipTooShort,
    EnvelopeTooShort,
    InvalidArgument,
    InvalidFrequency,
    TooFewFrames,
    UnknownFeature,
)

logger = logging.getLogger(__name__)


class MidLevelName(str, Enum):
    MELODIOUSNESS = "melodiousness"
    ARTICULATION = "articulation"
    RHYTHMIC_STABILITY = "rhythmic_stability"
    RHYTHMIC_COMPLEXITY = "rhythmic_complexity"
    DISSONANCE = "dissonance"
    TONAL_STABILITY = "tonal_stability"
    MODALITY = "modality"

    @property
    def label(self):
        return self.value.replace("_", " ").capitalize()

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace(" ", "_").replace("-", "_")
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise UnknownFeature(f"unknown mid-level feature '{text}'")


MIDLEVEL_NAMES = tuple(MidLevelName)


@dataclass(frozen=True)
class HandcraftedFeatures:
    dissonance: float
    inharmonicity: float
    pulse_clarity: float
    attack_leap: float
    hcdf_mean: float
    majorness: float
    clip_id: str = ""

    def __post_init__(self):
        for name in FEATURE_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgument(f"{name} must be finite")
        checks = (
            self.dissonance >= 0.0,
            0.0 <= self.inharmonicity <= 0.5,
            0.0 <= self.pulse_clarity <= 1.0,
            self.attack_leap >= 0.0,
            self.hcdf_mean >= 0.0,
            -1.0 <= self.majorness <= 1.0,
        )
        if not all(checks):
            raise InvalidArgument(f"feature values out of range: {asdict(self)}")


FEATURE_FIELDS = (
    "dissonance",
    "inharmonicity",
    "pulse_clarity",
    "attack_leap",
    "hcdf_mean",
    "majorness",
)

# Sethares' fit of the Plomp-Levelt roughness curve
SETHARES_B1 = 3.5
SETHARES_B2 = 5.75
SETHARES_S1 = 0.0207
SETHARES_S2 = 18.96
SETHARES_X_STAR = 0.24

PEAK_WINDOW = 8192
PEAK_HOP = 4096
F0_CEILING = 2000.0

RHYTHM_HOP_SECONDS = 0.01
RHYTHM_N_MELS = 64
RHYTHM_TOP_DB = 80.0
RHYTHM_MIN_FLUX = 2.0

MIN_EXTRACT_SECONDS = 2.0

# Krumhansl-Kessler probe-tone ratings, tonic first
KK_MAJOR = np.array(
    [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88]
)
KK_MINOR = np.array(
    [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17]
)


def _tonal_centroid_matrix():
    pc = np.arange(12)
    rows = []
    circles = ((1.0, 7 * np.pi / 6), (1.0, 3 * np.pi / 2), (0.5, 2 * np.pi / 3))
    for radius, angle in circles:
        rows.append(radius * np.sin(angle * pc))
        rows.append(radius * np.cos(angle * pc))
    return np.vstack(rows)


TONAL_CENTROID = _tonal_centroid_matrix()


def dissonance_pair(f1, a1, f2, a2):
    """Roughness of two partials on the Plomp-Levelt curve."""
    if f1 <= 0 or f2 <= 0:
        raise InvalidFrequency(f"frequencies must be positive, got {f1}, {f2}")
    if a1 < 0 or a2 < 0:
        raise InvalidArgument("amplitudes must be non-negative")
    df = abs(f2 - f1)
    s = SETHARES_X_STAR / (SETHARES_S1 * min(f1, f2) + SETHARES_S2)
    return a1 * a2 * (math.exp(-SETHARES_B1 * s * df) - math.exp(-SETHARES_B2 * s * df))


def _frame_dissonance(peaks):
    f = peaks.frequencies
    a = peaks.amplitudes / peaks.amplitudes.max()
    i, j = np.triu_indices(f.size, k=1)
    s = SETHARES_X_STAR / (SETHARES_S1 * np.minimum(f[i], f[j]) + SETHARES_S2)
    df = np.abs(f[j] - f[i])
    curve = np.exp(-SETHARES_B1 * s * df) - np.exp(-SETHARES_B2 * s * df)
    return float(np.sum(a[i] * a[j] * curve))


def analysis_peaks(clip, window=PEAK_WINDOW, hop=PEAK_HOP):
    """Per-frame spectral peaks on the long analysis window."""
    samples = clip.samples
    if samples.size < window:
        samples = np.pad(samples, (0, window - samples.size))
    spec = stft_magnitude(AudioClip(samples, clip.sample_rate), window, hop)
    return [spectral_peaks(row, spec.sample_rate, window) for row in spec.frames]


def _dissonance_from_peaks(peak_frames):
    values = [_frame_dissonance(p) for p in peak_frames if len(p) >= 2]
    return float(np.mean(values)) if values else 0.0


def sensory_dissonance(clip):
    """
    Mean over frames of the summed pairwise roughness of spectral peaks.

    Peak amplitudes are normalized per frame (loudest = 1), so the value does
    not depend on playback gain. Frames with fewer than two peaks are skipped.
    """
    return _dissonance_from_peaks(analysis_peaks(clip))


def frame_inharmonicity(peaks, f0_ceiling=F0_CEILING):
    """Amplitude-weighted distance of the peaks from the harmonics of f0.

    Returns None when no peak lies below ``f0_ceiling`` (unvoiced frame).
    """
    f, a = peaks.frequencies, peaks.amplitudes
    below = np.flatnonzero(f < f0_ceiling)
    if below.size == 0:
        return None
    f0 = f[below[np.argmax(a[below])]]
    harmonic = np.maximum(1.0, np.rint(f / f0))
    deviation = np.abs(f - harmonic * f0) / (f0 / 2.0)
    score = float(np.sum(a * deviation) / np.sum(a))
    return min(max(score, 0.0), 0.5)


def _inharmonicity_from_peaks(peak_frames):
    scores = [frame_inharmonicity(p) for p in peak_frames if len(p)]
    scores = [s for s in scores if s is not None]
    return float(np.mean(scores)) if scores else 0.0


def inharmonicity(clip):
    return _inharmonicity_from_peaks(analysis_peaks(clip))


def _tempo_lags(env, min_bpm, max_bpm):
    min_lag = max(1, int(math.floor(env.frame_rate * 60.0 / max_bpm)))
    max_lag = int(math.ceil(env.frame_rate * 60.0 / min_bpm))
    return min_lag, max_lag


def tempo_autocorrelation(env, min_bpm=40.0, max_bpm=200.0):
    """Return (lags, r[lag]/r[0]) over the tempo range; r is not mean-removed."""
    min_lag, max_lag = _tempo_lags(env, min_bpm, max_bpm)
    if len(env) < 2 * max_lag:
        raise EnvelopeTooShort(
            f"envelope has {len(env)} frames, tempo range needs {2 * max_lag}"
        )
    e = env.values
    full = scipy.signal.correlate(e, e, mode="full", method="direct")
    r = full[e.size - 1 :]
    lags = np.arange(min_lag, max_lag + 1)
    if r[0] <= 0.0:
        return lags, np.zeros(lags.size)
    return lags, np.clip(r[lags] / r[0], 0.0, 1.0)


def pulse_clarity(env, min_bpm=40.0, max_bpm=200.0):
    _, normalized = tempo_autocorrelation(env, min_bpm, max_bpm)
    return float(normalized.max()) if normalized.size else 0.0


def dominant_tempo(env, min_bpm=40.0, max_bpm=200.0):
    """Tempo in BPM of the strongest autocorrelation lag (0 for silence)."""
    lags, normalized = tempo_autocorrelation(env, min_bpm, max_bpm)
    if not normalized.any():
        return 0.0
    return 60.0 * env.frame_rate / lags[int(np.argmax(normalized))]


def attack_leap(env, threshold_std=1.0):
    """
    Mean amplitude rise from the preceding valley to each onset peak.

    Onsets are local maxima above mean + threshold_std * std of the envelope.
    """
    e = env.values
    if e.size == 0:
        raise InvalidArgument("attack_leap needs a non-empty envelope")
    threshold = e.mean() + threshold_std * e.std()
    nxt = np.append(e[1:], -np.inf)
    peak = (e[1:] > e[:-1]) & (e[1:] >= nxt[1:]) & (e[1:] > threshold)
    candidates = np.flatnonzero(peak) + 1

    leaps = []
    for t in candidates:
        i = t
        while i > 0 and e[i - 1] <= e[i]:
            i -= 1
        leaps.append(e[t] - e[i])
    return float(np.mean(leaps)) if leaps else 0.0


def tonal_centroids(chroma_gram):
    frames = chroma_gram.frames
    norms = np.abs(frames).sum(axis=1, keepdims=True)
    weighted = np.divide(frames, norms, out=np.zeros_like(frames), where=norms > 0)
    return weighted @ TONAL_CENTROID.T


def hcdf(chroma_gram):
    """Mean Euclidean distance between consecutive 6-D tonal centroids."""
    if chroma_gram.n_frames < 2:
        raise TooFewFrames("hcdf needs at least 2 chroma frames")
    steps = np.linalg.norm(np.diff(tonal_centroids(chroma_gram), axis=0), axis=1)
    return float(steps.mean())


def _max_profile_correlation(profile, template):
    rotations = np.stack([np.roll(template, k) for k in range(12)])
    rotations = rotations - rotations.mean(axis=1, keepdims=True)
    centered = profile - profile.mean()
    norms = np.linalg.norm(rotations, axis=1) * np.linalg.norm(centered)
    r = rotations @ centered / norms
    return float(r.max())


def majorness(chroma_gram):
    """Best major-key correlation minus best minor-key correlation."""
    if chroma_gram.n_frames < 1:
        raise TooFewFrames("majorness needs at least 1 chroma frame")
    profile = chroma_gram.frames.mean(axis=0)
    if np.ptp(profile) == 0.0:
        return 0.0
    value = _max_profile_correlation(profile, KK_MAJOR) - _max_profile_correlation(
        profile, KK_MINOR
    )
    return float(np.clip(value, -1.0, 1.0))


def rhythm_envelope(clip):
    """
    Onset envelope for rhythm descriptors: 10 ms hop, log-mel floored 80 dB
    below the clip maximum, flux values under RHYTHM_MIN_FLUX zeroed.

    Steady tones therefore give an all-zero envelope.
    """
    hop = max(1, int(round(clip.sample_rate * RHYTHM_HOP_SECONDS)))
    samples = clip.samples
    if samples.size < 2048 + hop:
        samples = np.pad(samples, (0, 2048 + hop - samples.size))
    spec = stft_magnitude(AudioClip(samples, clip.sample_rate), 2048, hop)
    fmax = min(18000.0, clip.sample_rate / 2)
    mel = mel_spectrogram(spec, n_mels=RHYTHM_N_MELS, fmax=fmax)

    floor = mel.frames.max() - RHYTHM_TOP_DB / 20.0 * math.log(10.0)
    clamped = MelSpectrogram(
        np.maximum(mel.frames, floor), mel.n_mels, mel.fmax, mel.sample_rate, mel.hop
    )
    env = onset_envelope(clamped)
    gated = np.where(env.values >= RHYTHM_MIN_FLUX, env.values, 0.0)
    return OnsetEnvelope(gated, env.frame_rate)


def extract_all(clip, clip_id=""):
    """Compute all six descriptors over shared intermediates."""
    if clip.duration < MIN_EXTRACT_SECONDS:
        raise ClipTooShort(
            f"clip lasts {clip.duration:.2f}s, extraction needs {MIN_EXTRACT_SECONDS}s"
        )
    peaks = analysis_peaks(clip)
    env = rhythm_envelope(clip)
    try:
        clarity = pulse_clarity(env)
    except EnvelopeTooShort as e:
        logger.warning(f"Pulse clarity skipped for '{clip_id or 'clip'}': {e}")
        clarity = 0.0
    cg = chroma(stft_magnitude(clip))

    return HandcraftedFeatures(
        dissonance=_dissonance_from_peaks(peaks),
        inharmonicity=_inharmonicity_from_peaks(peaks),
        pulse_clarity=clarity,
        attack_leap=attack_leap(env),
        hcdf_mean=hcdf(cg),
        majorness=majorness(cg),
        clip_id=clip_id,
    )
