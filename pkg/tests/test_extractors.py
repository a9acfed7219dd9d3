import time

import numpy as np
import pytest

from midlevel_features.dsp import (
    ChromaGram,
    OnsetEnvelope,
    SpectralPeakList,
    chroma,
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
from midlevel_features.extractors import (
    FEATURE_FIELDS,
    MIDLEVEL_NAMES,
    HandcraftedFeatures,
    MidLevelName,
    attack_leap,
    dissonance_pair,
    dominant_tempo,
    extract_all,
    frame_inharmonicity,
    hcdf,
    inharmonicity,
    majorness,
    pulse_clarity,
    rhythm_envelope,
    sensory_dissonance,
    tonal_centroids,
)
from tests.conftest import click_train, sine, tones


def _pitch_classes(*classes):
    frame = np.zeros(12)
    frame[list(classes)] = 1.0
    return frame / frame.sum()


def _envelope(values, frame_rate=100.0):
    return OnsetEnvelope(np.asarray(values, dtype=np.float64), frame_rate)


def _spikes(positions, length=1000):
    values = np.zeros(length)
    values[np.asarray(positions)] = 1.0
    return _envelope(values)


# ──────────────────────────────────────────────────────────────────────────────
# Names and record
# ──────────────────────────────────────────────────────────────────────────────
def test_midlevel_names_order_and_labels():
    assert len(MIDLEVEL_NAMES) == 7
    assert MIDLEVEL_NAMES[0] is MidLevelName.MELODIOUSNESS
    assert MIDLEVEL_NAMES[-1] is MidLevelName.MODALITY
    assert MidLevelName.RHYTHMIC_STABILITY.label == "Rhythmic stability"


@pytest.mark.parametrize(
    "text", ["tonal_stability", "Tonal stability", "TONAL_STABILITY", "tonal-stability"]
)
def test_midlevel_name_parse(text):
    assert MidLevelName.parse(text) is MidLevelName.TONAL_STABILITY


def test_midlevel_name_parse_rejects_unknown():
    assert MidLevelName.parse(MidLevelName.DISSONANCE) is MidLevelName.DISSONANCE
    with pytest.raises(UnknownFeature):
        MidLevelName.parse("danceability")


def test_handcrafted_features_ranges():
    ok = HandcraftedFeatures(0.1, 0.2, 0.3, 0.4, 0.5, -0.6, clip_id="x")
    assert [getattr(ok, f) for f in FEATURE_FIELDS] == [0.1, 0.2, 0.3, 0.4, 0.5, -0.6]
    with pytest.raises(InvalidArgument):
        HandcraftedFeatures(0.1, 0.7, 0.3, 0.4, 0.5, 0.0)
    with pytest.raises(InvalidArgument):
        HandcraftedFeatures(float("nan"), 0.2, 0.3, 0.4, 0.5, 0.0)


# ──────────────────────────────────────────────────────────────────────────────
# Dissonance
# ──────────────────────────────────────────────────────────────────────────────
def test_dissonance_pair_trivial_cases():
    assert dissonance_pair(440.0, 1.0, 440.0, 1.0) == 0.0
    assert dissonance_pair(440.0, 0.0, 466.0, 1.0) == 0.0


def test_dissonance_pair_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(50):
        f1, f2 = rng.uniform(50, 5000, 2)
        a1, a2 = rng.uniform(0, 1, 2)
        assert dissonance_pair(f1, a1, f2, a2) == pytest.approx(
            dissonance_pair(f2, a2, f1, a1), rel=1e-12
        )


def test_dissonance_pair_sweep_maximum():
    sweep = np.array([dissonance_pair(440.0, 1.0, f, 1.0) for f in range(441, 661)])
    peak_df = int(np.argmax(sweep)) + 1
    # closed form: s * df = ln(b2 / b1) / (b2 - b1), i.e. df ≈ 25.8 Hz at 440 Hz
    assert 25 <= peak_df <= 27
    assert sweep.max() == pytest.approx(0.181, abs=0.005)


def test_dissonance_pair_rejects_bad_input():
    with pytest.raises(InvalidFrequency):
        dissonance_pair(0.0, 1.0, 440.0, 1.0)
    with pytest.raises(InvalidArgument):
        dissonance_pair(440.0, -1.0, 660.0, 1.0)


def test_sensory_dissonance_trivial_clips(make_clip):
    assert sensory_dissonance(make_clip(sine(440, 0.5))) == 0.0
    assert sensory_dissonance(make_clip(np.zeros(22050))) == 0.0


def test_minor_second_rougher_than_fifth(make_clip):
    second = sensory_dissonance(make_clip(tones([440.0, 466.16], 0.5)))
    fifth = sensory_dissonance(make_clip(tones([440.0, 660.0], 0.5)))
    assert second > fifth > 0.0


@pytest.mark.parametrize("gain", [0.5, 0.25])
def test_sensory_dissonance_gain_invariant(make_clip, gain):
    mix = tones([300.0, 317.0, 450.0, 710.0], 0.5)
    base = sensory_dissonance(make_clip(mix))
    assert abs(sensory_dissonance(make_clip(gain * mix)) - base) < 1e-6


# ──────────────────────────────────────────────────────────────────────────────
# Inharmonicity
# ──────────────────────────────────────────────────────────────────────────────
def test_frame_inharmonicity_harmonic_series_is_zero():
    peaks = SpectralPeakList(np.array([220.0, 440.0, 660.0, 880.0]), np.ones(4))
    assert frame_inharmonicity(peaks) == 0.0


def test_frame_inharmonicity_sharp_partial():
    peaks = SpectralPeakList(np.array([220.0, 455.0]), np.ones(2))
    # f0 = 220, second partial 15 Hz off 440, scaled by f0/2 and averaged
    assert frame_inharmonicity(peaks) == pytest.approx(3 / 44)


def test_frame_inharmonicity_unvoiced():
    peaks = SpectralPeakList(np.array([2500.0, 3100.0]), np.ones(2))
    assert frame_inharmonicity(peaks) is None


def test_inharmonicity_clips(make_clip):
    assert inharmonicity(make_clip(np.zeros(22050))) == 0.0
    amps = [1.0, 0.7, 0.5, 0.35]
    harmonic = inharmonicity(make_clip(tones([220, 440, 660, 880], 0.5, amps=amps)))
    detuned = inharmonicity(make_clip(tones([220, 470, 610, 930], 0.5, amps=amps)))
    assert 0.0 <= harmonic < 0.02
    assert detuned > harmonic


# ──────────────────────────────────────────────────────────────────────────────
# Pulse clarity and attack leap
# ──────────────────────────────────────────────────────────────────────────────
def test_pulse_clarity_periodic_envelope():
    env = _spikes(np.arange(0, 1000, 50))
    assert pulse_clarity(env) == pytest.approx(0.95)
    assert dominant_tempo(env) == pytest.approx(120.0)


def test_pulse_clarity_beats_random_timing():
    periodic = pulse_clarity(_spikes(np.arange(0, 1000, 50)))
    for seed in range(20):
        rng = np.random.default_rng(seed)
        onsets = np.cumsum(rng.integers(20, 81, size=40))
        jittered = pulse_clarity(_spikes(onsets[onsets < 1000]))
        assert 0.0 <= jittered < periodic


def test_pulse_clarity_zero_and_short_envelopes():
    assert pulse_clarity(_envelope(np.zeros(400))) == 0.0
    assert dominant_tempo(_envelope(np.zeros(400))) == 0.0
    with pytest.raises(EnvelopeTooShort):
        pulse_clarity(_envelope(np.ones(100)))


def test_pulse_clarity_click_train_audio(make_clip):
    env = rhythm_envelope(make_clip(click_train(bpm=120, seconds=15)))
    assert env.frame_rate == pytest.approx(100.0)
    assert pulse_clarity(env) >= 0.9
    assert dominant_tempo(env) == pytest.approx(120.0)


def test_rhythm_envelope_steady_tone_is_flat(make_clip):
    env = rhythm_envelope(make_clip(sine(440, 3.0)))
    assert not env.values.any()


def test_attack_leap_cases():
    assert attack_leap(_envelope(np.zeros(50))) == 0.0

    single = np.zeros(50)
    single[20] = 1.7
    assert attack_leap(_envelope(single)) == pytest.approx(1.7)

    double = np.zeros(20)
    double[5], double[14] = 2.0, 4.0
    assert attack_leap(_envelope(double)) == pytest.approx(3.0)


def test_attack_leap_measures_from_valley():
    values = np.zeros(30)
    values[9:13] = [1.0, 2.0, 3.0, 6.0]
    assert attack_leap(_envelope(values)) == pytest.approx(6.0)


def test_attack_leap_rejects_empty():
    with pytest.raises(InvalidArgument):
        attack_leap(_envelope(np.zeros(0)))


# ──────────────────────────────────────────────────────────────────────────────
# HCDF and majorness
# ──────────────────────────────────────────────────────────────────────────────
def test_hcdf_constant_chroma_is_zero():
    frames = np.tile(_pitch_classes(0, 4, 7), (10, 1))
    assert hcdf(ChromaGram(frames)) == 0.0


def test_hcdf_tritone_moves_further_than_fifth():
    c = _pitch_classes(0, 4, 7)
    g = _pitch_classes(7, 11, 2)
    fsharp = _pitch_classes(6, 10, 1)
    c_fsharp = hcdf(ChromaGram(np.array([c, fsharp] * 5)))
    c_g = hcdf(ChromaGram(np.array([c, g] * 5)))
    assert c_fsharp > c_g > 0.0


def test_hcdf_single_change_is_local():
    frames = np.array([_pitch_classes(0)] * 4 + [_pitch_classes(1)] * 4)
    gram = ChromaGram(frames)
    steps = np.linalg.norm(np.diff(tonal_centroids(gram), axis=0), axis=1)
    assert np.flatnonzero(steps > 1e-12).tolist() == [3]
    assert hcdf(gram) == pytest.approx(steps[3] / 7)


def test_hcdf_needs_two_frames():
    with pytest.raises(TooFewFrames):
        hcdf(ChromaGram(np.zeros((1, 12))))


def test_majorness_sign():
    assert majorness(ChromaGram(_pitch_classes(0, 4, 7)[None, :])) > 0.0
    assert majorness(ChromaGram(_pitch_classes(0, 3, 7)[None, :])) < 0.0
    assert majorness(ChromaGram(np.full((3, 12), 1 / 12))) == 0.0
    assert majorness(ChromaGram(np.zeros((3, 12)))) == 0.0


def test_majorness_transposition_invariant():
    profile = np.random.default_rng(5).uniform(0, 1, 12)
    base = majorness(ChromaGram(profile[None, :]))
    for k in range(1, 12):
        rotated = majorness(ChromaGram(np.roll(profile, k)[None, :]))
        assert abs(rotated - base) < 1e-9
    assert -1.0 <= base <= 1.0


# ──────────────────────────────────────────────────────────────────────────────
# extract_all
# ──────────────────────────────────────────────────────────────────────────────
def test_extract_all_pure_sine(make_clip):
    feats = extract_all(make_clip(sine(440, 15.0)), clip_id="sine")
    assert feats.clip_id == "sine"
    assert feats.dissonance == 0.0
    assert feats.inharmonicity == 0.0
    assert feats.pulse_clarity == pytest.approx(0.0, abs=1e-9)


def test_extract_all_matches_components(make_clip):
    clip = make_clip(click_train(bpm=120, seconds=15))
    feats = extract_all(clip)
    assert abs(feats.pulse_clarity - pulse_clarity(rhythm_envelope(clip))) <= 0.05
    assert feats.dissonance == sensory_dissonance(clip)
    assert feats.inharmonicity == inharmonicity(clip)
    assert feats.majorness == majorness(chroma(stft_magnitude(clip)))


def test_extract_all_major_triad(make_clip):
    feats = extract_all(make_clip(tones([261.63, 329.63, 392.0], 3.0)))
    assert feats.majorness > 0.0


def test_extract_all_rejects_short_clip(make_clip):
    with pytest.raises(ClipTooShort):
        extract_all(make_clip(sine(440, 1.0)))


def test_extract_all_fifteen_seconds_under_a_second(make_clip):
    mix = tones([261.63, 329.63, 392.0], 15.0) * 0.5 + click_train(seconds=15.0) * 0.4
    clip = make_clip(mix)
    extract_all(make_clip(mix[: 3 * 44100]))
    start = time.perf_counter()
    extract_all(clip)
    assert time.perf_counter() - start < 1.0
