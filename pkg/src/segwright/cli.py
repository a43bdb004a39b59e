"""Command-line entry point: ``segwright <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure (one diagnostic line on
stderr) and 2 on a usage error. ``SEGWRIGHT_LOG`` selects how chatty the
diagnostics are: ``error`` (default), ``info`` or ``debug``.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import pipeline as pl
from .audio_io import AudioError, LabelError, LabelTrack, load_audio, load_label_track, rasterize_labels
from .cnn import ModelFormatError, TrainConfig, TrainingError, cnn_train, load_model, save_model
from .evaluation import (
    DEFAULT_FPR_TOL,
    DEFAULT_TARGET_FPR,
    EvaluationError,
    UnreachableTarget,
    compare_systems,
    score_many,
)
from .features import FeatureConfig, num_frames
from .segmentation import (
    SegmentPostConfig,
    decisions_to_segments,
    format_segments,
    read_segments,
    segments_to_decisions,
)
from .smoothing import (
    SmootherError,
    fit_gmm_hmm_supervised,
    fit_hmm_supervised,
    hard_bits,
    load_smoother,
    save_smoother,
)

log = logging.getLogger("segwright")

RUNTIME_ERRORS = (
    AudioError,
    LabelError,
    ModelFormatError,
    TrainingError,
    SmootherError,
    EvaluationError,
    ValueError,
    OSError,
)

NEEDS_MODEL = ("cnn", "cnn-hmm", "cnn-gmm-hmm")
NEEDS_SMOOTHER = ("cnn-hmm", "cnn-gmm-hmm")


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    method: str
    model_path: Optional[Path] = None
    smoother_path: Optional[Path] = None
    features: FeatureConfig = field(default_factory=FeatureConfig)
    post: SegmentPostConfig = field(default_factory=SegmentPostConfig)
    target_fpr: Optional[float] = None

    def __post_init__(self):
        if self.method not in pl.METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if self.method in NEEDS_MODEL and self.model_path is None:
            raise UsageError(f"--method {self.method} requires --model")
        if self.method not in NEEDS_MODEL and self.model_path is not None:
            raise UsageError(f"--method {self.method} does not take --model")
        if self.method in NEEDS_SMOOTHER and self.smoother_path is None:
            raise UsageError(f"--method {self.method} requires --smoother")
        if self.method not in NEEDS_SMOOTHER and self.smoother_path is not None:
            raise UsageError(f"--method {self.method} does not take --smoother")

    def load(self):
        model = load_model(self.model_path) if self.model_path else None
        smoother = load_smoother(self.smoother_path) if self.smoother_path else None
        if smoother is not None:
            want = "hard" if self.method == "cnn-hmm" else "soft"
            if smoother.mode != want:
                kind = "Bernoulli" if smoother.mode == "hard" else "GMM"
                raise SmootherError(f"{self.smoother_path} holds {kind} emissions, not usable with {self.method}")
        return model, smoother


# -- helpers -------------------------------------------------------------------


def _feature_cfg(args) -> FeatureConfig:
    return FeatureConfig(
        num_mel_bands=args.mel_bands,
        frame_period_sec=args.frame_period,
        window_sec=args.window_len,
    )


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _pool_map(fn, items, jobs: int):
    """``map`` over a process pool, results in input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def _read_operating_point(path) -> dict[str, str]:
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#") and "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
    for key in ("method", "control"):
        if key not in kv:
            raise ValueError(f"{path}: missing {key!r}")
    return kv


# -- subcommands ---------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    files = pl.synth_files(args.seconds, args.seed, args.prefix, args.file_sec, stream=args.stream)
    pl.write_corpus(files, args.out)
    log.info("wrote %d files to %s", len(files), args.out)
    return 0


def cmd_train_cnn(args) -> int:
    fcfg = _feature_cfg(args)
    files = pl.load_labeled_dir(args.data, args.labels, fcfg)
    x, y = pl.training_arrays(files, args.frame_stride)
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        seed=args.seed,
        optimizer=args.optimizer,
    )
    validation = None
    if args.validation:
        validation = pl.training_arrays(pl.load_labeled_dir(args.validation, None, fcfg), args.frame_stride)
    log.info("training on %d windows from %d files", len(x), len(files))
    model = cnn_train(x, y, cfg, validation=validation)
    save_model(model, args.out)
    return 0


def _smoother_data(args):
    files = pl.load_labeled_dir(args.data, args.labels, _feature_cfg(args))
    return pl.smoother_training_data(files, load_model(args.model))


def cmd_fit_hmm(args) -> int:
    probs, states = _smoother_data(args)
    save_smoother(fit_hmm_supervised(hard_bits(probs), states), args.out)
    return 0


def cmd_fit_gmm_hmm(args) -> int:
    probs, states = _smoother_data(args)
    params = fit_gmm_hmm_supervised(probs, states, args.mixtures)
    for s, hist in enumerate(params.emissions.loglik_history):
        log.info("state %d: EM stopped after %d iterations, loglik %.3f", s, len(hist), hist[-1])
    save_smoother(params, args.out)
    return 0


def cmd_tune(args) -> int:
    cfg = PipelineConfig(args.method, args.model, args.smoother, _feature_cfg(args), target_fpr=args.target_fpr)
    model, smoother = cfg.load()
    files = pl.load_labeled_dir(args.data, args.labels, cfg.features)
    try:
        res = pl.tune_method(args.method, files, args.target_fpr, args.tol, args.max_iter, model, smoother)
    except UnreachableTarget as exc:
        raise EvaluationError(str(exc)) from None
    if not res.converged:
        msg = (f"no control within {args.tol} of FPR {args.target_fpr} after {res.iterations} iterations "
               f"(closest: control {res.control_value!r}, FPR {res.achieved_fpr:.4f})")
        if not args.allow_miss:
            raise EvaluationError(msg)
        log.warning("%s; writing the closest point", msg)
    lines = [
        "# segwright operating point",
        f"method = {args.method}",
        f"control = {res.control_value!r}",
        f"target_fpr = {args.target_fpr!r}",
        f"achieved_fpr = {res.achieved_fpr!r}",
        f"iterations = {res.iterations}",
        f"converged = {'true' if res.converged else 'false'}",
    ]
    _write_text(args.out, "\n".join(lines) + "\n")
    log.info("%s: control %.6g gives FPR %.4f", args.method, res.control_value, res.achieved_fpr)
    return 0


def _segment_control(args) -> Optional[float]:
    given = {
        "--offset-db": args.offset_db,
        "--threshold": args.threshold,
        "--speech-bias": args.speech_bias,
    }
    given = {k: v for k, v in given.items() if v is not None}
    allowed = {"energy": "--offset-db", "cnn": "--threshold"}.get(args.method, "--speech-bias")
    for flag in given:
        if flag != allowed:
            raise UsageError(f"{flag} does not apply to --method {args.method}")
    if args.operating_point and given:
        raise UsageError("--operating-point conflicts with " + ", ".join(given))
    if args.operating_point:
        op = _read_operating_point(args.operating_point)
        if op["method"] != args.method:
            raise ValueError(f"{args.operating_point} was tuned for {op['method']}, not {args.method}")
        return float(op["control"])
    if args.threshold is not None:
        if not 0.0 < args.threshold < 1.0:
            raise UsageError("--threshold must lie strictly between 0 and 1")
        return math.log(args.threshold / (1.0 - args.threshold))
    if args.offset_db is not None:
        return args.offset_db
    return args.speech_bias


@dataclass(frozen=True)
class _SegmentJob:
    path: Path
    cfg: PipelineConfig
    control: Optional[float]


def _segment_one(job: _SegmentJob) -> tuple[str, np.ndarray]:
    model, smoother = job.cfg.load()
    f = pl.LabeledFile(job.path.stem, load_audio(job.path), None, job.cfg.features)
    control = job.control if job.control is not None else pl.default_control(job.cfg.method, smoother)
    log.debug("%s: %d frames", f.file_id, f.num_frames)
    return f.file_id, pl.decisions_for(job.cfg.method, f, control, model, smoother)


def cmd_segment(args) -> int:
    post = SegmentPostConfig(args.min_speech, args.min_gap, args.pad)
    cfg = PipelineConfig(args.method, args.model, args.smoother, _feature_cfg(args), post)
    control = _segment_control(args)
    cfg.load()  # fail early on bad artifacts
    paths = pl.list_audio(args.inp)
    if not paths:
        raise ValueError(f"no .wav files in {args.inp}")
    results = _pool_map(_segment_one, [_SegmentJob(p, cfg, control) for p in paths], args.jobs)
    fp = cfg.features.frame_period_sec
    segments = []
    for fid, dec in results:
        segments += decisions_to_segments(dec, fp, fid, post)
    _write_text(args.out, format_segments(segments, args.format))
    if args.decisions_out:
        _write_text(args.decisions_out, pl.format_decisions(results))
    log.info("%d segments from %d files", len(segments), len(results))
    return 0


def _audio_frames(job) -> tuple[str, int]:
    path, fcfg = job
    audio = load_audio(path)
    return path.stem, num_frames(len(audio.samples), fcfg, audio.sample_rate_hz)


def _hyp_name(item: str) -> tuple[str, Path]:
    name, sep, path = item.partition("=")
    if sep and name and not Path(item).exists():
        return name, Path(path)
    return Path(item).stem, Path(item)


def cmd_evaluate(args) -> int:
    fcfg = _feature_cfg(args)
    fp = fcfg.frame_period_sec
    tracks = {t.file_id: t for t in load_label_track(args.ref)}
    lengths: dict[str, int] = {}
    if args.audio_dir:
        jobs = [(p, fcfg) for p in pl.list_audio(args.audio_dir)]
        lengths = dict(_pool_map(_audio_frames, jobs, args.jobs))

    hyps = {}
    for item in args.hyp:
        name, path = _hyp_name(item)
        if name in hyps:
            raise UsageError(f"system name {name!r} given twice (use NAME=PATH)")
        hyps[name] = path

    reports = {}
    for name, path in hyps.items():
        if pl.is_decisions_file(path):
            decisions = pl.read_decisions(path)
            segments = None
        else:
            decisions = None
            segments = {}
            for seg in read_segments(path):
                segments.setdefault(seg.file_id, []).append(seg)
        file_ids = sorted(lengths) if lengths else sorted(set(tracks) | set(decisions or segments))
        pairs = []
        for fid in file_ids:
            if fid in lengths:
                n = lengths[fid]
            elif decisions is not None and fid in decisions:
                n = len(decisions[fid])
            else:
                ends = [s.end_sec for s in tracks[fid].spans] if fid in tracks else []
                ends += [s.end_sec for s in (segments or {}).get(fid, [])]
                n = int(round(max(ends, default=0.0) / fp))
            if decisions is not None:
                if fid not in decisions:
                    raise ValueError(f"{path}: no decisions for {fid}")
                dec = decisions[fid]
                if len(dec) != n:
                    raise ValueError(f"{path}: {fid} has {len(dec)} decisions, audio has {n} frames")
            else:
                dec = segments_to_decisions(segments.get(fid, []), fp, n)
            track = tracks.get(fid, LabelTrack(fid, ()))
            pairs.append((dec, rasterize_labels(track, fp, n)))
        reports[name] = score_many(pairs)
        fpr = reports[name].fpr
        if fpr is not None and args.target_fpr is not None and abs(fpr - args.target_fpr) > args.fpr_tol:
            log.warning("%s: FPR %.4f is off the %.3f operating point", name, fpr, args.target_fpr)

    ranking = compare_systems(reports, args.fpr_tol)
    if args.out:
        _write_text(args.out, ranking.to_csv())
    sys.stdout.write(ranking.to_text())
    return 0


# -- argument parsing ----------------------------------------------------------


def _add_feature_flags(p):
    g = p.add_argument_group("features")
    g.add_argument("--frame-period", type=float, default=0.010, help="hop in seconds (default 0.010)")
    g.add_argument("--window-len", type=float, default=0.025, help="analysis window in seconds (default 0.025)")
    g.add_argument("--mel-bands", type=int, default=32)


def _add_system_flags(p, need_method=True):
    p.add_argument("--method", choices=pl.METHODS, required=need_method)
    p.add_argument("--model", type=Path, help="CNN model file (cnn methods)")
    p.add_argument("--smoother", type=Path, help="smoother parameter file (*-hmm methods)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segwright", description="Speech/non-speech segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a seeded synthetic labeled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seconds", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--file-sec", type=float, default=60.0, help="length of each file (default 60)")
    p.add_argument("--prefix", default="synth")
    p.add_argument("--stream", type=int, default=0, help="independent sub-corpus index for the same seed")
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train-cnn", help="train the window classifier")
    p.add_argument("--data", type=Path, required=True, help="directory of WAVs plus labels.csv")
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--frame-stride", type=int, default=4, help="use every Nth frame as a training window")
    p.add_argument("--validation", type=Path, help="labeled directory; keep the best epoch on it")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_train_cnn)

    for name, func in (("fit-hmm", cmd_fit_hmm), ("fit-gmm-hmm", cmd_fit_gmm_hmm)):
        p = sub.add_parser(name, help="fit a smoother on CNN outputs for labeled audio")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--labels", type=Path)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        if name == "fit-gmm-hmm":
            p.add_argument("--mixtures", type=int, default=3)
        _add_feature_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("tune", help="find the control value hitting a target FPR on a calibration set")
    _add_system_flags(p)
    p.add_argument("--data", type=Path, required=True, help="labeled calibration directory")
    p.add_argument("--labels", type=Path)
    p.add_argument("--target-fpr", type=float, default=DEFAULT_TARGET_FPR)
    p.add_argument("--tol", type=float, default=DEFAULT_FPR_TOL)
    p.add_argument("--max-iter", type=int, default=40)
    p.add_argument("--out", type=Path, required=True, help="operating-point file")
    p.add_argument("--allow-miss", action="store_true",
                   help="write the closest point instead of failing when the tolerance is not met")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("segment", help="write speech segments for a WAV file or directory")
    _add_system_flags(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=("csv", "rttm"), default="csv")
    p.add_argument("--operating-point", type=Path, help="file written by 'tune'")
    p.add_argument("--offset-db", type=float, help="energy: threshold above the file mean")
    p.add_argument("--threshold", type=float, help="cnn: speech probability threshold")
    p.add_argument("--speech-bias", type=float, help="*-hmm: override the stored speech bias")
    p.add_argument("--min-speech", type=float, default=0.2)
    p.add_argument("--min-gap", type=float, default=0.1)
    p.add_argument("--pad", type=float, default=0.0)
    p.add_argument("--decisions-out", type=Path, help="also write raw per-frame decisions")
    p.add_argument("--jobs", type=int, default=pl.default_jobs())
    _add_feature_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score hypotheses against reference labels")
    p.add_argument("--hyp", action="append", required=True,
                   help="segments or decisions file, optionally NAME=PATH; repeatable")
    p.add_argument("--ref", type=Path, required=True, help="reference labels.csv")
    p.add_argument("--audio-dir", type=Path, help="audio the hypotheses came from (exact frame counts)")
    p.add_argument("--target-fpr", type=float, default=DEFAULT_TARGET_FPR)
    p.add_argument("--fpr-tol", type=float, default=DEFAULT_FPR_TOL)
    p.add_argument("--out", type=Path, help="report CSV")
    p.add_argument("--jobs", type=int, default=pl.default_jobs())
    _add_feature_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("SEGWRIGHT_LOG", "error").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.ERROR),
        format="segwright: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except RUNTIME_ERRORS as exc:
        log.debug("traceback", exc_info=True)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"segwright: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
