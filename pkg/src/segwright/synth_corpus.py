"""Seeded synthetic corpus with dense four-condition labels.

Stand-ins for the acoustic classes:

* speech  - harmonic complex with a gliding 120-300 Hz fundamental, moving
            formant-like spectral peaks, syllable-rate amplitude modulation
            and short inter-word pauses, silent or faint (labeled as speech,
            like utterance-level dense annotation)
* music   - sustained triads with note changes every 0.4-1.5 s
* noise   - coloured broadband noise with slow level fluctuation

NoSpeech events are silence, music alone or noise alone, at a random level
up to the nominal speech level. Speech events have a random gain and are
clean or overlaid with music/noise at ``snr_db`` +- ``snr_jitter_db``. Condition durations follow ``condition_mix`` exactly (up to
event-length quantization) and events are shuffled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .audio_io import (
    CLEAN_SPEECH,
    CONDITIONS,
    NO_SPEECH,
    SAMPLE_RATE,
    SPEECH_MUSIC,
    SPEECH_NOISE,
    AudioBuffer,
    LabelTrack,
    Span,
)


@dataclass(frozen=True)
class SynthConfig:
    duration_sec: float = 60.0
    seed: int = 0
    # proportions in CONDITIONS order: NoSpeech, CleanSpeech, SpeechMusic, SpeechNoise
    condition_mix: tuple = (0.4, 0.3, 0.15, 0.15)
    snr_db: float = 0.0
    snr_jitter_db: float = 6.0  # per-event SNR drawn uniformly from snr_db +- this
    event_len_range_sec: tuple = (0.3, 3.0)
    nospeech_len_range_sec: tuple | None = (0.1, 1.0)  # None: use event_len_range_sec
    pause_len_range_sec: tuple = (0.08, 0.4)  # intra-word pauses, labeled speech
    weak_pause_prob: float = 0.5  # share of intra-word pauses that stay faintly voiced
    speech_rms: float = 0.05
    speech_gain_range_db: tuple = (-10.0, 6.0)
    background_level_range_db: tuple = (-20.0, 0.0)  # NoSpeech sounds, relative to speech_rms
    floor_rms: float = 3e-4
    file_id: str = "synth"

    def __post_init__(self):
        if self.duration_sec <= 0:
            raise ValueError("duration_sec must be positive")
        mix = np.asarray(self.condition_mix, dtype=float)
        if mix.shape != (4,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("condition_mix must be 4 non-negative proportions summing to 1")
        for name in ("event_len_range_sec", "nospeech_len_range_sec"):
            value = getattr(self, name)
            if value is not None and not 0 < value[0] <= value[1]:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        if not 0.0 <= self.weak_pause_prob <= 1.0:
            raise ValueError("weak_pause_prob must lie in [0, 1]")


def _rms(x):
    return float(np.sqrt(np.mean(x * x))) if len(x) else 0.0


def _scale_to(x, rms):
    r = _rms(x)
    return x * (rms / r) if r > 0 else x


def _ramp(n, sr, ramp_sec=0.01):
    m = min(n // 2, int(ramp_sec * sr))
    env = np.ones(n)
    if m > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(m) / m)
        env[:m] = r
        env[n - m:] = r[::-1]
    return env


def synth_speech(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE,
                 weak_pause_prob: float = 0.5, pause_len_range_sec: tuple = (0.08, 0.4)) -> np.ndarray:
    t = np.arange(n) / sr
    f0_base = rng.uniform(120.0, 300.0)
    glide = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
    jitter = np.cumsum(rng.normal(0.0, 0.002, n))
    jitter -= np.linspace(0.0, jitter[-1] if n else 0.0, n)
    f0 = f0_base * glide * (1.0 + np.clip(jitter, -0.05, 0.05))
    phase = 2 * np.pi * np.cumsum(f0) / sr

    # syllables: each gets its own formant pair and an amplitude bump
    rate = rng.uniform(3.0, 6.0)
    syl_len = int(sr / rate)
    n_syl = n // max(syl_len, 1) + 1
    f1 = np.repeat(rng.uniform(300, 900, n_syl), syl_len)[:n]
    f2 = np.repeat(rng.uniform(900, 2500, n_syl), syl_len)[:n]
    am = 0.5 - 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    env = 0.08 + 0.92 * am**1.5

    env *= _word_gate(n, rng, sr, weak_pause_prob, pause_len_range_sec)

    out = np.zeros(n)
    k_max = int(4000 // f0_base)
    for k in range(1, k_max + 1):
        fk = k * f0
        gain = (1.0 / k) * (
            0.3 + np.exp(-0.5 * ((fk - f1) / 150.0) ** 2) + 0.7 * np.exp(-0.5 * ((fk - f2) / 200.0) ** 2)
        )
        out += gain * np.sin(k * phase)
    return out * env * _ramp(n, sr)


def _word_gate(n: int, rng: np.random.Generator, sr: int, weak_pause_prob: float = 0.0,
               pause_len_range_sec: tuple = (0.08, 0.4)) -> np.ndarray:
    """Envelope with short inter-word pauses; never paused at either end.

    A pause is silent, or with probability ``weak_pause_prob`` drops to
    -24..-12 dB instead (breathy or trailing material).
    """
    gate = np.ones(n)
    pos = int(rng.uniform(0.3, 1.2) * sr)
    while True:
        pause = int(rng.uniform(*pause_len_range_sec) * sr)
        if pos + pause + int(0.2 * sr) >= n:
            break
        if rng.random() < 0.6:
            weak = rng.random() < weak_pause_prob
            gate[pos:pos + pause] = 10 ** (rng.uniform(-24.0, -12.0) / 20) if weak else 0.0
            pos += pause
        pos += int(rng.uniform(0.3, 1.2) * sr)
    # soften gate edges (5 ms)
    k = int(0.005 * sr)
    return np.convolve(gate, np.ones(k) / k, mode="same") if n > k else gate


def synth_music(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n)
    pos = 0
    while pos < n:
        length = min(n - pos, int(rng.uniform(0.4, 1.5) * sr))
        root = rng.integers(45, 70)
        chord = root + np.array([0, 4 if rng.random() < 0.5 else 3, 7])
        t = np.arange(length) / sr
        seg = np.zeros(length)
        for midi in chord:
            f = 440.0 * 2 ** ((midi - 69) / 12)
            for k in range(1, 7):
                if k * f < sr / 2 - 200:
                    seg += (1.0 / k**1.5) * np.sin(2 * np.pi * k * f * t + rng.uniform(0, 2 * np.pi))
        decay = np.exp(-t * rng.uniform(0.2, 1.0))
        out[pos:pos + length] = seg * decay * _ramp(length, sr, 0.02)
        pos += length
    return out


def synth_noise(n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    white = rng.standard_normal(n)
    a = rng.uniform(0.0, 0.95)
    coloured = lfilter([1.0 - a], [1.0, -a], white)
    if rng.random() < 0.5:
        coloured = np.diff(coloured, prepend=0.0)  # tilt towards high frequencies
    t = np.arange(n) / sr
    wobble = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return coloured * wobble


def _plan_events(cfg: SynthConfig, rng: np.random.Generator, sr: int) -> list[tuple[str, int]]:
    total = int(round(cfg.duration_sec * sr))
    events = []
    for cond, share in zip(CONDITIONS, cfg.condition_mix):
        rng_sec = cfg.event_len_range_sec
        if cond == NO_SPEECH and cfg.nospeech_len_range_sec is not None:
            rng_sec = cfg.nospeech_len_range_sec
        lo = int(round(rng_sec[0] * sr))
        hi = int(round(rng_sec[1] * sr))
        budget = int(round(share * total))
        while budget > 0:
            length = int(rng.integers(lo, hi + 1))
            if budget - length < lo:
                length = budget  # absorb the remainder so shares stay exact
            events.append((cond, length))
            budget -= length
    order = rng.permutation(len(events))
    return [events[i] for i in order]


def generate(cfg: SynthConfig = SynthConfig()) -> tuple[AudioBuffer, LabelTrack]:
    sr = SAMPLE_RATE
    rng = np.random.default_rng(cfg.seed)
    events = _plan_events(cfg, rng, sr)
    total = sum(length for _, length in events)
    audio = rng.standard_normal(total) * cfg.floor_rms
    spans = []
    pos = 0
    for cond, length in events:
        if cond == NO_SPEECH:
            kind = rng.integers(0, 3)
            level = cfg.speech_rms * 10 ** (rng.uniform(*cfg.background_level_range_db) / 20)
            if kind == 1:
                audio[pos:pos + length] += _scale_to(synth_music(length, rng, sr), level)
            elif kind == 2:
                audio[pos:pos + length] += _scale_to(synth_noise(length, rng, sr), level) * _ramp(length, sr)
        else:
            level = cfg.speech_rms * 10 ** (rng.uniform(*cfg.speech_gain_range_db) / 20)
            x = _scale_to(synth_speech(length, rng, sr, cfg.weak_pause_prob, cfg.pause_len_range_sec), level)
            snr = cfg.snr_db + rng.uniform(-cfg.snr_jitter_db, cfg.snr_jitter_db)
            overlay_gain = 10 ** (-snr / 20)
            if cond == SPEECH_MUSIC:
                x += _scale_to(synth_music(length, rng, sr), level * overlay_gain)
            elif cond == SPEECH_NOISE:
                x += _scale_to(synth_noise(length, rng, sr), level * overlay_gain) * _ramp(length, sr)
            audio[pos:pos + length] += x
        spans.append(Span(pos / sr, (pos + length) / sr, cond))
        pos += length
    np.clip(audio, -1.0, 32767 / 32768, out=audio)
    return AudioBuffer(audio, sr), LabelTrack(cfg.file_id, tuple(spans))


def corpus_configs(seconds: float, seed: int, file_sec: float = 60.0, prefix: str = "synth",
                   stream: int = 0, **overrides) -> list[SynthConfig]:
    """Split a corpus into files of at most ``file_sec`` seconds with derived seeds.

    File seeds come from ``(seed, stream, index)``, so corpora built with the
    same seed but different streams (train/test/calibration) never share audio.
    """
    n_files = max(1, int(np.ceil(seconds / file_sec - 1e-9)))
    configs = []
    remaining = seconds
    for i in range(n_files):
        dur = min(file_sec, remaining)
        file_seed = int(np.random.SeedSequence([seed, stream, i]).generate_state(1)[0])
        configs.append(SynthConfig(duration_sec=dur, seed=file_seed, file_id=f"{prefix}_{i:03d}", **overrides))
        remaining -= dur
    return configs
