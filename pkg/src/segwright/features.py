"""Log-mel filterbank features and stacked spectrogram windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer

WINDOW_FRAMES = 32


@dataclass(frozen=True)
class FeatureConfig:
    num_mel_bands: int = 32
    frame_period_sec: float = 0.010
    window_sec: float = 0.025
    fft_size: int = 512
    mel_low_hz: float = 20.0
    mel_high_hz: float = 7800.0
    log_floor: float = 1e-10
    window_type: str = "hann"  # or "rect"
    normalize: bool = False  # per-file mean/variance normalization

    def validate(self, sample_rate: int) -> None:
        if self.num_mel_bands < 1:
            raise ValueError("num_mel_bands must be positive")
        if self.frame_period_sec <= 0 or self.window_sec <= 0:
            raise ValueError("frame period and window length must be positive")
        if not 0 <= self.mel_low_hz < self.mel_high_hz <= sample_rate / 2:
            raise ValueError(
                f"need 0 <= mel_low_hz < mel_high_hz <= {sample_rate / 2}, "
                f"got {self.mel_low_hz}, {self.mel_high_hz}"
            )
        if self.window_samples(sample_rate) > self.fft_size:
            raise ValueError("analysis window longer than fft_size")
        if self.window_type not in ("hann", "rect"):
            raise ValueError(f"unknown window type {self.window_type!r}")

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(self.frame_period_sec * sample_rate))

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_sec * sample_rate))


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray  # (T, num_mel_bands)
    frame_period_sec: float = 0.010

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SpectrogramWindow:
    values: np.ndarray  # (32, num_mel_bands), time x mel
    center_frame: int


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.num_mel_bands + 2)
    )
    return edges[1:-1]


def mel_filterbank(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters with unit peak, shape (num_mel_bands, fft_size // 2 + 1).

    Adjacent triangles share edges, so weights sum to one between the first
    and last centers and taper to zero at ``mel_low_hz`` / ``mel_high_hz``.
    """
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.num_mel_bands + 2)
    )
    bin_hz = np.arange(cfg.fft_size // 2 + 1) * sample_rate / cfg.fft_size
    bank = np.zeros((cfg.num_mel_bands, len(bin_hz)))
    for m in range(cfg.num_mel_bands):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def num_frames(num_samples: int, cfg: FeatureConfig, sample_rate: int) -> int:
    """Frame count shared by every per-frame producer (features, energy VAD)."""
    if num_samples < cfg.window_samples(sample_rate):
        return 0
    return num_samples // cfg.hop_samples(sample_rate)


def frame_signal(samples: np.ndarray, cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Centered analysis frames, shape (T, window_samples).

    Frame ``t`` is centered on ``(t + 0.5) * hop`` so it lines up with the
    frame-center rule used for labels; the signal is zero-padded at both ends.
    """
    hop = cfg.hop_samples(sample_rate)
    win = cfg.window_samples(sample_rate)
    n = num_frames(len(samples), cfg, sample_rate)
    if n == 0:
        return np.zeros((0, win))
    left = win // 2 - hop // 2
    starts = np.arange(n) * hop - left
    pad_left = max(0, left)
    pad_right = max(0, int(starts[-1]) + win - len(samples))
    padded = np.concatenate([np.zeros(pad_left), samples, np.zeros(pad_right)])
    view = np.lib.stride_tricks.sliding_window_view(padded, win)
    return view[starts + pad_left]


def power_spectrum(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    win = frames.shape[1]
    taper = np.hanning(win + 1)[:-1] if cfg.window_type == "hann" else np.ones(win)
    spec = np.fft.rfft(frames * taper, n=cfg.fft_size, axis=1)
    return spec.real**2 + spec.imag**2


def compute_log_mel(audio: AudioBuffer, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    sr = audio.sample_rate_hz
    cfg.validate(sr)
    frames = frame_signal(np.asarray(audio.samples, dtype=np.float64), cfg, sr)
    if frames.shape[0] == 0:
        return FeatureMatrix(np.zeros((0, cfg.num_mel_bands)), cfg.frame_period_sec)
    energies = power_spectrum(frames, cfg) @ mel_filterbank(cfg, sr).T
    logmel = np.log(np.maximum(energies, cfg.log_floor))
    if cfg.normalize:
        logmel = mean_variance_normalize(logmel)
    return FeatureMatrix(logmel, cfg.frame_period_sec)


def mean_variance_normalize(frames: np.ndarray) -> np.ndarray:
    mu = frames.mean(axis=0)
    sd = frames.std(axis=0)
    return (frames - mu) / np.where(sd > 0, sd, 1.0)


def window_indices(n_frames: int, width: int = WINDOW_FRAMES) -> np.ndarray:
    """Row indices for every stacked window, shape (n_frames, width).

    Window ``t`` covers frames ``t - width // 2 .. t + width // 2 - 1`` with
    out-of-range indices clamped to the nearest edge frame.
    """
    offsets = np.arange(width) - width // 2
    return np.clip(np.arange(n_frames)[:, None] + offsets[None, :], 0, max(n_frames - 1, 0))


def stack_window_array(feats: FeatureMatrix, width: int = WINDOW_FRAMES) -> np.ndarray:
    """All windows as one array, shape (T, width, bands)."""
    n = feats.num_frames
    if n == 0:
        return np.zeros((0, width, feats.frames.shape[1]))
    return feats.frames[window_indices(n, width)]


def stack_windows(feats: FeatureMatrix, width: int = WINDOW_FRAMES) -> list[SpectrogramWindow]:
    stacked = stack_window_array(feats, width)
    return [SpectrogramWindow(values=stacked[t], center_frame=t) for t in range(len(stacked))]
