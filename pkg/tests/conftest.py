# tests/conftest.py

import os
import sys

# ──────────────────────────────────────────────────────────────────────────────
# Ensure src/ is on the PYTHONPATH so midlevel_features can be imported
# ──────────────────────────────────────────────────────────────────────────────
SRC_PATH = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir, "src"))
if SRC_PATH not in sys.path:
    sys.path.insert(0, SRC_PATH)

import numpy as np  # noqa: E402
import pytest  # noqa: E402
import soundfile as sf  # noqa: E402

from midlevel_features.dsp import AudioClip  # noqa: E402

SR = 44100


# ──────────────────────────────────────────────────────────────────────────────
# Synthetic signals
# ──────────────────────────────────────────────────────────────────────────────
def sine(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def tones(freqs, seconds=1.0, amp=0.8, sr=SR, amps=None):
    amps = amps if amps is not None else [1.0] * len(freqs)
    mix = sum(a * sine(f, seconds, 1.0, sr) for f, a in zip(freqs, amps))
    return amp * mix / np.max(np.abs(mix))


def click_train(bpm=120.0, seconds=15.0, sr=SR, offset=1000, width=64):
    samples = np.zeros(int(seconds * sr))
    period = int(round(sr * 60.0 / bpm))
    for start in range(offset, samples.size - width, period):
        samples[start : start + width] = np.hanning(width)
    return samples


@pytest.fixture
def make_clip():
    def _make(samples, sr=SR):
        return AudioClip(np.asarray(samples, dtype=np.float64), sr)

    return _make


@pytest.fixture
def write_wav(tmp_path):
    """Write float samples as 16-bit PCM WAV and return the path."""

    def _write(name, samples, sr=SR, subtype="PCM_16"):
        path = tmp_path / name
        sf.write(str(path), np.asarray(samples), sr, subtype=subtype)
        return path

    return _write


@pytest.fixture
def data_dir():
    """Released annotation files, when MIDLEVEL_DATA_DIR points at them."""
    root = os.getenv("MIDLEVEL_DATA_DIR", "")
    path = os.path.join(root, "annotations.csv") if root else ""
    if not path or not os.path.isfile(path):
        pytest.skip("released annotations not found under MIDLEVEL_DATA_DIR")
    return root
