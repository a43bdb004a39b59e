"""Audio and label file IO.

Audio is normalized to mono float64 at 16 kHz on load. Labels follow a flat
CSV layout, one span per row: ``file_id,start_sec,end_sec,condition``.
"""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SAMPLE_RATE = 16000
# Absorbs decimal round-off when comparing frame centers to span edges.
_TIME_EPS = 1e-9

NO_SPEECH = "NoSpeech"
CLEAN_SPEECH = "CleanSpeech"
SPEECH_MUSIC = "SpeechMusic"
SPEECH_NOISE = "SpeechNoise"

CONDITIONS = (NO_SPEECH, CLEAN_SPEECH, SPEECH_MUSIC, SPEECH_NOISE)
SPEECH_CONDITIONS = frozenset({CLEAN_SPEECH, SPEECH_MUSIC, SPEECH_NOISE})

# AVA-Speech style spellings are accepted on input.
_ALIASES = {
    "NO_SPEECH": NO_SPEECH,
    "CLEAN_SPEECH": CLEAN_SPEECH,
    "SPEECH_WITH_MUSIC": SPEECH_MUSIC,
    "SPEECH_WITH_NOISE": SPEECH_NOISE,
    "Speech+Music": SPEECH_MUSIC,
    "Speech+Noise": SPEECH_NOISE,
}


class AudioError(Exception):
    """Raised when an audio file cannot be read or has an unsupported encoding."""


class LabelError(Exception):
    """Raised on malformed or inconsistent label files."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    @property
    def duration_sec(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class Span:
    start_sec: float
    end_sec: float
    condition: str


@dataclass(frozen=True)
class LabelTrack:
    file_id: str
    spans: tuple[Span, ...] = field(default_factory=tuple)


def is_speech(condition: str) -> bool:
    return condition in SPEECH_CONDITIONS


def canonical_condition(name: str) -> str:
    name = name.strip()
    if name in CONDITIONS:
        return name
    if name in _ALIASES:
        return _ALIASES[name]
    raise LabelError(f"unknown condition {name!r}")


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return samples
    n_out = int(round(len(samples) * dst_rate / src_rate))
    t_out = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(t_out, np.arange(len(samples)), samples)


def load_audio(path) -> AudioBuffer:
    """Read a 16-bit PCM WAV file as mono 16 kHz samples in [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if width != 2:
        raise AudioError(f"{path}: unsupported sample width {8 * width} bits")
    if n_channels not in (1, 2):
        raise AudioError(f"{path}: unsupported channel count {n_channels}")

    pcm = np.frombuffer(raw, dtype="<i2")
    n_frames = len(pcm) // n_channels
    if n_frames == 0:
        raise AudioError(f"{path}: zero-length audio")
    pcm = pcm[: n_frames * n_channels].reshape(n_frames, n_channels).astype(np.float64)
    samples = pcm.mean(axis=1) / 32768.0
    samples = resample_linear(samples, rate, SAMPLE_RATE)
    return AudioBuffer(samples=samples, sample_rate_hz=SAMPLE_RATE)


def write_audio(path, audio: AudioBuffer) -> None:
    """Write mono 16-bit PCM. Samples are clipped to the int16 range."""
    pcm = np.clip(np.round(np.asarray(audio.samples) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate_hz)
        wf.writeframes(pcm.astype("<i2").tobytes())


def _check_spans(file_id: str, spans: Sequence[Span]) -> tuple[Span, ...]:
    ordered = sorted(spans, key=lambda s: (s.start_sec, s.end_sec))
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start_sec < prev.end_sec:
            raise LabelError(
                f"{file_id}: overlapping spans ({prev.start_sec}, {prev.end_sec}) "
                f"and ({cur.start_sec}, {cur.end_sec})"
            )
    return tuple(ordered)


def make_track(file_id: str, spans: Sequence[Span]) -> LabelTrack:
    for s in spans:
        if not s.start_sec < s.end_sec:
            raise LabelError(f"{file_id}: span start {s.start_sec} >= end {s.end_sec}")
        canonical_condition(s.condition)
    return LabelTrack(file_id=file_id, spans=_check_spans(file_id, spans))


def load_label_track(path) -> list[LabelTrack]:
    """Parse a label CSV into one track per file_id, in order of first appearance."""
    grouped: dict[str, list[Span]] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and [c.strip() for c in row] == ["file_id", "start", "end", "label"]:
                continue
            if len(row) != 4:
                raise LabelError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            file_id, start, end, cond = (c.strip() for c in row)
            try:
                start_sec, end_sec = float(start), float(end)
            except ValueError as exc:
                raise LabelError(f"{path}:{lineno}: bad time value") from exc
            try:
                cond = canonical_condition(cond)
            except LabelError as exc:
                raise LabelError(f"{path}:{lineno}: {exc}") from None
            if not start_sec < end_sec:
                raise LabelError(f"{path}:{lineno}: start {start_sec} >= end {end_sec}")
            grouped.setdefault(file_id, []).append(Span(start_sec, end_sec, cond))
    return [LabelTrack(fid, _check_spans(fid, spans)) for fid, spans in grouped.items()]


def write_label_tracks(path, tracks: Sequence[LabelTrack]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("file_id,start,end,label\n")
        for track in tracks:
            for s in track.spans:
                fh.write(f"{track.file_id},{s.start_sec:.7f},{s.end_sec:.7f},{s.condition}\n")


def rasterize_labels(track: LabelTrack, frame_period_sec: float, num_frames: int) -> list[str]:
    """Per-frame condition by frame-center containment.

    Frame ``t`` takes the condition of the span with
    ``start <= (t + 0.5) * frame_period < end``; uncovered frames are NoSpeech.
    """
    if frame_period_sec <= 0:
        raise ValueError("frame_period_sec must be positive")
    out = [NO_SPEECH] * max(num_frames, 0)
    if num_frames <= 0:
        return out
    centers = (np.arange(num_frames) + 0.5) * frame_period_sec
    for span in track.spans:
        lo = int(np.searchsorted(centers, span.start_sec - _TIME_EPS, side="left"))
        hi = int(np.searchsorted(centers, span.end_sec - _TIME_EPS, side="left"))
        for t in range(lo, hi):
            out[t] = span.condition
    return out


def speech_bits(conditions: Sequence[str]) -> np.ndarray:
    """Collapse the three speech conditions to 1 and NoSpeech to 0."""
    return np.array([1 if is_speech(c) else 0 for c in conditions], dtype=np.int8)
