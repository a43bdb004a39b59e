"""Energy-threshold VAD baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioBuffer
from .features import FeatureConfig, num_frames

ENERGY_FLOOR = 1e-10
# Frames within this many dB of the threshold count as ties (no speech), so
# summation round-off in the mean cannot flip equal-energy frames.
TIE_EPS_DB = 1e-9


@dataclass(frozen=True)
class EnergyVadConfig:
    threshold_offset_db: float = 0.0
    frame_period_sec: float = 0.010

    def __post_init__(self):
        if self.frame_period_sec <= 0:
            raise ValueError("frame_period_sec must be positive")


def frame_log_energy(audio: AudioBuffer, frame_period_sec: float = 0.010,
                     feature_cfg: FeatureConfig | None = None) -> np.ndarray:
    """10*log10 of mean squared amplitude per non-overlapping frame, floored.

    The frame count matches :func:`segwright.features.compute_log_mel` for the
    same audio, and frame ``t`` covers ``[t, t + 1) * frame_period_sec``.
    """
    sr = audio.sample_rate_hz
    fcfg = feature_cfg or FeatureConfig(frame_period_sec=frame_period_sec)
    hop = int(round(frame_period_sec * sr))
    n = num_frames(len(audio.samples), fcfg, sr)
    if n == 0:
        return np.zeros(0)
    x = np.asarray(audio.samples, dtype=np.float64)
    need = n * hop
    if len(x) < need:
        x = np.concatenate([x, np.zeros(need - len(x))])
    power = np.mean(x[:need].reshape(n, hop) ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(power, ENERGY_FLOOR))


def decide(log_energy: np.ndarray, threshold_offset_db: float) -> np.ndarray:
    """Speech where frame energy is strictly above the file mean plus the offset."""
    if len(log_energy) == 0:
        return np.zeros(0, dtype=np.int8)
    return (log_energy > log_energy.mean() + threshold_offset_db + TIE_EPS_DB).astype(np.int8)


def energy_vad(audio: AudioBuffer, cfg: EnergyVadConfig = EnergyVadConfig()) -> np.ndarray:
    return decide(frame_log_energy(audio, cfg.frame_period_sec), cfg.threshold_offset_db)
