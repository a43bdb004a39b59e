import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segwright.audio_io import AudioBuffer
from segwright.features import (
    FeatureConfig,
    FeatureMatrix,
    compute_log_mel,
    frame_signal,
    mel_center_frequencies,
    mel_filterbank,
    stack_window_array,
    stack_windows,
)

SR = 16000
CFG = FeatureConfig()


def tone(freq, amp, seconds=1.0):
    t = np.arange(int(seconds * SR)) / SR
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), SR)


def test_one_second_gives_100_frames():
    feats = compute_log_mel(tone(440, 0.1))
    assert feats.frames.shape == (100, 32)


def test_silence_hits_floor():
    feats = compute_log_mel(AudioBuffer(np.zeros(SR), SR))
    assert np.all(feats.frames == np.log(1e-10))


def test_short_audio_gives_no_frames():
    feats = compute_log_mel(AudioBuffer(np.ones(300) * 0.1, SR))
    assert feats.frames.shape == (0, 32)


def test_entries_above_floor():
    rng = np.random.default_rng(0)
    feats = compute_log_mel(AudioBuffer(rng.normal(0, 0.1, SR), SR))
    assert np.all(feats.frames >= np.log(CFG.log_floor))


def _dft_power(x, n_fft):
    # direct O(N^2) DFT of the zero-padded frame, independent of np.fft
    xp = np.zeros(n_fft)
    xp[: len(x)] = x
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    return np.abs(basis @ xp) ** 2


def test_sine_peak_band_matches_dft_oracle():
    audio = tone(1000.0, 0.5)
    feats = compute_log_mel(audio)
    centers = mel_center_frequencies(CFG)
    expected_band = int(np.argmin(np.abs(centers - 1000.0)))

    frame = frame_signal(audio.samples, CFG, SR)[50]
    win = np.hanning(len(frame) + 1)[:-1]
    oracle = np.log(np.maximum(mel_filterbank(CFG, SR) @ _dft_power(frame * win, CFG.fft_size), 1e-10))
    np.testing.assert_allclose(feats.frames[50], oracle, rtol=1e-9, atol=1e-9)
    assert int(np.argmax(oracle)) == expected_band
    assert int(np.argmax(feats.frames[50])) == expected_band


def test_filterbank_partition():
    bank = mel_filterbank(CFG, SR)
    hz = np.arange(CFG.fft_size // 2 + 1) * SR / CFG.fft_size
    inside = (hz > CFG.mel_low_hz) & (hz < CFG.mel_high_hz)
    total = bank.sum(axis=0)
    assert np.all(total[inside] > 0)
    assert np.all(total <= 1.0 + 1e-12)
    assert np.all(total[~inside] == 0)
    # neighbours overlap
    assert all(np.any((bank[m] > 0) & (bank[m + 1] > 0)) for m in range(31))


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(1.0, 20.0), seed=st.integers(0, 1000))
def test_energy_monotone_in_gain(alpha, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 0.01, 4000)
    a = compute_log_mel(AudioBuffer(x, SR)).frames
    b = compute_log_mel(AudioBuffer(alpha * x, SR)).frames
    above = a > np.log(CFG.log_floor)
    assert np.all(b[above] >= a[above] - 1e-9)


@pytest.mark.parametrize("bad", [dict(mel_high_hz=9000.0), dict(mel_low_hz=8000.0, mel_high_hz=7000.0)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        compute_log_mel(tone(440, 0.1), FeatureConfig(**bad))


def test_rect_window_option():
    feats = compute_log_mel(tone(440, 0.1), FeatureConfig(window_sec=0.010, window_type="rect"))
    assert feats.frames.shape == (100, 32)


def test_normalize_option():
    rng = np.random.default_rng(1)
    feats = compute_log_mel(AudioBuffer(rng.normal(0, 0.1, SR), SR), FeatureConfig(normalize=True))
    np.testing.assert_allclose(feats.frames.mean(axis=0), 0.0, atol=1e-9)


def test_stack_constant():
    feats = FeatureMatrix(np.ones((40, 32)) * 3.0)
    wins = stack_windows(feats)
    assert len(wins) == 40
    assert all(np.array_equal(w.values, wins[0].values) for w in wins)


def test_stack_count_and_empty():
    assert len(stack_windows(FeatureMatrix(np.zeros((100, 32))))) == 100
    assert stack_windows(FeatureMatrix(np.zeros((0, 32)))) == []


def test_stack_slice_oracle():
    ramp = np.arange(100 * 32, dtype=float).reshape(100, 32)
    wins = stack_windows(FeatureMatrix(ramp))
    naive = np.array([ramp[r] for r in range(34, 66)])
    np.testing.assert_array_equal(wins[50].values, naive)
    assert wins[50].center_frame == 50


def test_stack_edge_replication():
    ramp = np.arange(10 * 32, dtype=float).reshape(10, 32)
    arr = stack_window_array(FeatureMatrix(ramp))
    # window 0 covers frames -16..15, clamped into 0..9
    expected = np.array([ramp[min(max(r, 0), 9)] for r in range(-16, 16)])
    np.testing.assert_array_equal(arr[0], expected)
