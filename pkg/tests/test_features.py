import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnsmos.audio import CLIP_SAMPLES, AudioClip
from dnsmos.errors import CorruptHeader, WrongLength
from dnsmos.features import (
    FLOOR_DB,
    N_BINS,
    extract_features,
    load_features,
    mel_filterbank_matrix,
    power_spectrogram,
    save_features,
)

T = np.arange(CLIP_SAMPLES) / 16000


def _tone(freq, amp=0.5):
    return AudioClip(amp * np.sin(2 * np.pi * freq * T))


def _dft_power(frame, n_fft=512):
    """Direct O(N^2) DFT of a Hann-windowed, zero-padded frame."""
    n = np.arange(len(frame))
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / len(frame))
    k = np.arange(n_fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * n[None, :] / n_fft)
    return np.abs(basis @ (frame * w)) ** 2


def test_power_matches_direct_dft():
    x = np.random.default_rng(0).normal(0, 0.1, CLIP_SAMPLES)
    power = power_spectrogram(AudioClip(x))
    assert power.shape == (900, N_BINS)
    for t in (0, 1, 450, 898):
        np.testing.assert_allclose(power[t], _dft_power(x[160 * t:160 * t + 320]), rtol=1e-9, atol=1e-12)
    # last frame runs off the clip end and is zero-padded
    last = np.zeros(320)
    last[:160] = x[160 * 899:]
    np.testing.assert_allclose(power[899], _dft_power(last), rtol=1e-9, atol=1e-12)


def test_impulse_energy_stays_in_one_frame():
    # sample 80 lies only in frame 0; its spectrum is flat at w[80]^2
    x = np.zeros(CLIP_SAMPLES)
    x[80] = 1.0
    power = power_spectrogram(AudioClip(x))
    assert np.all(power[1:] == 0)
    w80 = 0.5 - 0.5 * np.cos(2 * np.pi * 80 / 320)
    np.testing.assert_allclose(power[0], w80 ** 2, rtol=1e-12)


def test_impulse_at_clip_start_hits_window_zero():
    x = np.zeros(CLIP_SAMPLES)
    x[0] = 1.0
    assert np.all(power_spectrogram(AudioClip(x)) == 0)


def test_silence_is_floored_everywhere():
    feats = extract_features(AudioClip(np.zeros(CLIP_SAMPLES)))
    assert feats.shape == (900, 120)
    assert feats.values.dtype == np.float32
    assert FLOOR_DB == pytest.approx(-120.0)
    assert np.all(feats.values == np.float32(-120.0))


def test_filterbank_geometry():
    fb = mel_filterbank_matrix()
    w = fb.weights
    assert w.shape == (120, N_BINS)
    assert np.all(w >= 0) and np.all(w <= 1)
    assert np.all(w.sum(axis=1) > 0)
    assert np.all(np.diff(fb.centers_hz) > 0)
    assert fb.centers_hz[0] > 0 and fb.centers_hz[-1] < 8000
    # each triangle peaks at a bin adjacent to its center
    peak_hz = np.argmax(w, axis=1) * 16000 / 512
    assert np.all(np.abs(peak_hz - fb.centers_hz) <= 31.25)
    # upper bands are untouched HTK triangles: consecutive bands overlap by one edge
    assert np.count_nonzero(w[-1]) > 5


@pytest.mark.parametrize("freq", [300.0, 1000.0, 3500.0])
def test_tone_peaks_in_nearest_band(freq):
    feats = extract_features(_tone(freq)).values
    nearest = int(np.argmin(np.abs(mel_filterbank_matrix().centers_hz - freq)))
    assert np.all(np.argmax(feats[1:-1], axis=1) == nearest)


def test_halving_amplitude_shifts_by_six_db():
    a = extract_features(_tone(1000.0, 0.5)).values.astype(np.float64)
    b = extract_features(_tone(1000.0, 0.25)).values.astype(np.float64)
    live = (a > FLOOR_DB + 1) & (b > FLOOR_DB + 1)
    assert live.sum() > 1000
    np.testing.assert_allclose(b[live] - a[live], -20 * np.log10(2), atol=0.01)


@settings(max_examples=10, deadline=None)
@given(gain_db=st.floats(-30, 10))
def test_features_track_level(gain_db):
    # no normalization: scaling the waveform moves every live bin by the same dB
    x = np.random.default_rng(5).normal(0, 0.05, CLIP_SAMPLES)
    a = extract_features(AudioClip(x)).values.astype(np.float64)
    b = extract_features(AudioClip(x * 10 ** (gain_db / 20))).values.astype(np.float64)
    np.testing.assert_allclose(b - a, gain_db, atol=1e-3)


def test_deterministic_and_length_checked():
    clip = _tone(440.0)
    assert np.array_equal(extract_features(clip).values, extract_features(clip).values)
    with pytest.raises(WrongLength):
        extract_features(AudioClip(np.zeros(1000)))
    with pytest.raises(WrongLength):
        extract_features(AudioClip(np.zeros(CLIP_SAMPLES), sample_rate_hz=8000))


def test_dump_round_trip(tmp_path):
    feats = extract_features(_tone(700.0))
    save_features(feats, tmp_path / "f.bin")
    assert (tmp_path / "f.bin").stat().st_size == 16 + 900 * 120 * 4
    back = load_features(tmp_path / "f.bin")
    assert np.array_equal(back.values, feats.values)
    (tmp_path / "bad.bin").write_bytes(b"nope" + bytes(20))
    with pytest.raises(CorruptHeader):
        load_features(tmp_path / "bad.bin")
