"""Per-frame decisions to time-stamped speech segments.

Each segment carries its own id, which doubles as a pseudo-speaker label
when segments are handed downstream without diarization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_EPS = 1e-9


@dataclass(frozen=True)
class Segment:
    file_id: str
    start_sec: float
    end_sec: float
    segment_id: str

    @property
    def duration(self) -> float:
        return self.end_sec - self.start_sec


@dataclass(frozen=True)
class SegmentPostConfig:
    min_speech_sec: float = 0.2
    min_gap_sec: float = 0.1
    pad_sec: float = 0.0

    def __post_init__(self):
        if min(self.min_speech_sec, self.min_gap_sec, self.pad_sec) < 0:
            raise ValueError("segment post-processing values must be >= 0")


RAW = SegmentPostConfig(0.0, 0.0, 0.0)


def speech_runs(decisions) -> list[tuple[int, int]]:
    """Maximal runs of 1s as half-open frame ranges [first, last + 1)."""
    d = np.asarray(decisions, dtype=np.int8).reshape(-1)
    if len(d) == 0:
        return []
    edges = np.diff(np.concatenate([[0], d, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), ends.tolist()))


def decisions_to_segments(decisions, frame_period_sec: float = 0.010, file_id: str = "",
                          cfg: SegmentPostConfig = SegmentPostConfig()) -> list[Segment]:
    """Run extraction, then gap merging, then short-segment dropping, then padding."""
    if frame_period_sec <= 0:
        raise ValueError("frame_period_sec must be positive")
    n_frames = len(np.asarray(decisions).reshape(-1))
    runs = speech_runs(decisions)

    merged: list[list[int]] = []
    for start, end in runs:
        if merged and (start - merged[-1][1]) * frame_period_sec < cfg.min_gap_sec - _EPS:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    kept = [(s, e) for s, e in merged if (e - s) * frame_period_sec >= cfg.min_speech_sec - _EPS]

    file_end = n_frames * frame_period_sec
    bounds = [(s * frame_period_sec, e * frame_period_sec) for s, e in kept]
    if cfg.pad_sec > 0:
        padded = []
        for i, (s, e) in enumerate(bounds):
            lo = 0.0 if i == 0 else (bounds[i - 1][1] + s) / 2
            hi = file_end if i == len(bounds) - 1 else (e + bounds[i + 1][0]) / 2
            padded.append((max(lo, s - cfg.pad_sec), min(hi, e + cfg.pad_sec)))
        bounds = padded
    return [Segment(file_id, s, e, f"{file_id}_{i:04d}") for i, (s, e) in enumerate(bounds)]


def segments_to_decisions(segments: Iterable[Segment], frame_period_sec: float, num_frames: int) -> np.ndarray:
    """Rasterize segments back to frames with the frame-center rule."""
    out = np.zeros(num_frames, dtype=np.int8)
    centers = (np.arange(num_frames) + 0.5) * frame_period_sec
    for seg in segments:
        lo = int(np.searchsorted(centers, seg.start_sec - _EPS, side="left"))
        hi = int(np.searchsorted(centers, seg.end_sec - _EPS, side="left"))
        out[lo:hi] = 1
    return out


CSV_HEADER = "file_id,segment_id,start_sec,end_sec"


def format_segments(segments: Sequence[Segment], fmt: str = "csv") -> str:
    if fmt == "csv":
        rows = [CSV_HEADER]
        rows += [f"{s.file_id},{s.segment_id},{s.start_sec:.6f},{s.end_sec:.6f}" for s in segments]
    elif fmt == "rttm":
        rows = [
            f"SPEAKER {s.file_id} 1 {s.start_sec:.6f} {s.end_sec - s.start_sec:.6f} <NA> <NA> {s.segment_id} <NA> <NA>"
            for s in segments
        ]
    else:
        raise ValueError(f"unknown segment format {fmt!r}")
    return "".join(r + "\n" for r in rows)


def write_segments(segments: Sequence[Segment], path, fmt: str = "csv") -> None:
    text = format_segments(segments, fmt)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def read_segments(path) -> list[Segment]:
    """Read segments back from the CSV or RTTM layout written above."""
    out = []
    with open(path, newline="") as fh:
        first = fh.readline()
        fh.seek(0)
        if first.startswith("SPEAKER"):
            for line in fh:
                f = line.split()
                if not f:
                    continue
                start, dur = float(f[3]), float(f[4])
                out.append(Segment(f[1], start, start + dur, f[7]))
        else:
            for row in csv.DictReader(fh):
                out.append(Segment(row["file_id"], float(row["start_sec"]), float(row["end_sec"]), row["segment_id"]))
    return out
