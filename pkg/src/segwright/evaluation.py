"""Frame-level TPR/FPR scoring, operating-point tuning and system ranking."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .audio_io import CLEAN_SPEECH, CONDITIONS, NO_SPEECH, SPEECH_MUSIC, SPEECH_NOISE, canonical_condition

DEFAULT_TARGET_FPR = 0.315
DEFAULT_FPR_TOL = 0.005


class EvaluationError(Exception):
    pass


class UnreachableTarget(EvaluationError):
    def __init__(self, target, lo, hi, fpr_lo, fpr_hi):
        super().__init__(
            f"target FPR {target} not reachable in control range [{lo}, {hi}] "
            f"(FPR {fpr_lo:.4f} .. {fpr_hi:.4f})"
        )
        self.fpr_range = (fpr_lo, fpr_hi)


@dataclass(frozen=True)
class EvalReport:
    """Rates are ``None`` where a condition has no frames (undefined TPR)."""

    tpr_clean: Optional[float]
    tpr_noise: Optional[float]
    tpr_music: Optional[float]
    tpr_all: Optional[float]
    fpr: Optional[float]
    frame_counts: Mapping[str, int] = field(default_factory=dict)
    hit_counts: Mapping[str, int] = field(default_factory=dict)
    num_frames_total: int = 0


def _rate(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def _report_from_counts(counts: Mapping[str, int], hits: Mapping[str, int]) -> EvalReport:
    speech = (CLEAN_SPEECH, SPEECH_NOISE, SPEECH_MUSIC)
    return EvalReport(
        tpr_clean=_rate(hits[CLEAN_SPEECH], counts[CLEAN_SPEECH]),
        tpr_noise=_rate(hits[SPEECH_NOISE], counts[SPEECH_NOISE]),
        tpr_music=_rate(hits[SPEECH_MUSIC], counts[SPEECH_MUSIC]),
        tpr_all=_rate(sum(hits[c] for c in speech), sum(counts[c] for c in speech)),
        fpr=_rate(hits[NO_SPEECH], counts[NO_SPEECH]),
        frame_counts=dict(counts),
        hit_counts=dict(hits),
        num_frames_total=sum(counts.values()),
    )


def _counts(decisions, labels):
    d = np.asarray(decisions).reshape(-1)
    if len(d) != len(labels):
        raise EvaluationError(f"length mismatch: {len(d)} decisions, {len(labels)} labels")
    if not np.all((d == 0) | (d == 1)):
        raise EvaluationError("decisions must be 0/1")
    labels = [canonical_condition(c) for c in labels]
    counts = {c: 0 for c in CONDITIONS}
    hits = {c: 0 for c in CONDITIONS}
    for bit, cond in zip(d.tolist(), labels):
        counts[cond] += 1
        hits[cond] += bit
    return counts, hits


def score_frames(decisions, labels: Sequence[str]) -> EvalReport:
    """Per-condition TPR and the NoSpeech FPR over aligned frames.

    The three speech conditions form one positive class; ``tpr_all`` is the
    micro average over them.
    """
    return _report_from_counts(*_counts(decisions, labels))


def score_many(pairs: Sequence[tuple[Sequence[int], Sequence[str]]]) -> EvalReport:
    """Pool frame counts over several files before forming rates."""
    counts = {c: 0 for c in CONDITIONS}
    hits = {c: 0 for c in CONDITIONS}
    for decisions, labels in pairs:
        c, h = _counts(decisions, labels)
        for k in CONDITIONS:
            counts[k] += c[k]
            hits[k] += h[k]
    return _report_from_counts(counts, hits)


# -- operating point ----------------------------------------------------------


@dataclass(frozen=True)
class TuneResult:
    control_value: float
    achieved_fpr: float
    iterations: int
    converged: bool
    report: Optional[EvalReport] = None


def tune_operating_point(
    system: Callable[[float], Sequence[tuple[Sequence[int], Sequence[str]]]],
    control_range: tuple[float, float],
    target_fpr: float = DEFAULT_TARGET_FPR,
    tol: float = DEFAULT_FPR_TOL,
    max_iter: int = 40,
) -> TuneResult:
    """Bisection on a scalar control until the calibration FPR is within ``tol``.

    ``system(control)`` returns ``(decisions, labels)`` pairs for the
    calibration set. FPR must be monotone in the control; the direction is
    read off the two range endpoints. Both endpoint evaluations count as
    iterations. If ``max_iter`` runs out, the evaluated control whose FPR is
    closest to the target is returned with ``converged=False``.
    """
    lo, hi = float(control_range[0]), float(control_range[1])
    evaluated: list[tuple[float, EvalReport]] = []

    def evaluate(c: float) -> float:
        rep = score_many(system(c))
        if rep.fpr is None:
            raise EvaluationError("calibration set has no NoSpeech frames")
        evaluated.append((c, rep))
        return rep.fpr

    def result(converged: bool) -> TuneResult:
        c, rep = min(evaluated, key=lambda cr: abs(cr[1].fpr - target_fpr))
        return TuneResult(c, rep.fpr, len(evaluated), converged, rep)

    f_lo = evaluate(lo)
    if abs(f_lo - target_fpr) <= tol:
        return result(True)
    f_hi = evaluate(hi)
    if abs(f_hi - target_fpr) <= tol:
        return result(True)
    if not min(f_lo, f_hi) <= target_fpr <= max(f_lo, f_hi):
        raise UnreachableTarget(target_fpr, lo, hi, f_lo, f_hi)

    increasing = f_hi > f_lo
    while len(evaluated) < max_iter:
        mid = 0.5 * (lo + hi)
        f_mid = evaluate(mid)
        if abs(f_mid - target_fpr) <= tol:
            return result(True)
        if (f_mid < target_fpr) == increasing:
            lo = mid
        else:
            hi = mid
    return result(False)


# -- system comparison ---------------------------------------------------------

COLUMNS = ("clean", "noise", "music", "all")


@dataclass(frozen=True)
class Ranking:
    order: tuple[str, ...]  # best first; ties keep input order
    ties: tuple[tuple[str, ...], ...]  # groups of systems with equal tpr_all
    reports: Mapping[str, EvalReport]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("system,clean,noise,music,all,fpr\n")
        for name in self.order:
            r = self.reports[name]
            vals = [r.tpr_clean, r.tpr_noise, r.tpr_music, r.tpr_all, r.fpr]
            buf.write(name + "," + ",".join(_cell(v) for v in vals) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("system")] + [len(n) for n in self.order])
        lines = [f"{'system':<{width}}  " + "  ".join(f"{c:>6}" for c in COLUMNS + ("fpr",))]
        for name in self.order:
            r = self.reports[name]
            vals = [r.tpr_clean, r.tpr_noise, r.tpr_music, r.tpr_all, r.fpr]
            lines.append(f"{name:<{width}}  " + "  ".join(f"{_cell(v, 3):>6}" for v in vals))
        for group in self.ties:
            lines.append("tie: " + " = ".join(group))
        return "\n".join(lines) + "\n"


def _cell(v: Optional[float], digits: int = 6) -> str:
    return "nan" if v is None else f"{v:.{digits}f}"


def compare_systems(reports: Mapping[str, EvalReport], fpr_tol: float = DEFAULT_FPR_TOL) -> Ranking:
    """Rank systems by tpr_all after checking they share an operating point."""
    if not reports:
        raise EvaluationError("no reports to compare")
    fprs = {n: r.fpr for n, r in reports.items()}
    known = [f for f in fprs.values() if f is not None]
    if known and max(known) - min(known) > 2 * fpr_tol:
        raise EvaluationError(
            "reports are not at a common operating point: "
            + ", ".join(f"{n}={f:.4f}" for n, f in fprs.items() if f is not None)
        )

    def key(name):
        v = reports[name].tpr_all
        return -math.inf if v is None else v

    names = list(reports)
    order = sorted(names, key=key, reverse=True)  # stable: equal scores keep input order
    ties = []
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and key(order[j + 1]) == key(order[i]):
            j += 1
        if j > i:
            ties.append(tuple(order[i : j + 1]))
        i = j + 1
    return Ranking(tuple(order), tuple(ties), dict(reports))
