"""Glue between the stages: labeled files, CNN outputs, and tunable systems.

The four methods map onto a single scalar operating-point control each:

=============  ===============================================
energy         threshold offset in dB above the file mean
cnn            threshold on the speech-neuron logit
cnn-hmm        speech bias of a Bernoulli-emission smoother
cnn-gmm-hmm    speech bias of a GMM-emission smoother
=============  ===============================================
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cnn as cnn_mod
from .audio_io import (
    AudioBuffer,
    LabelTrack,
    load_audio,
    load_label_track,
    rasterize_labels,
    speech_bits,
    write_audio,
    write_label_tracks,
)
from .evaluation import EvalReport, TuneResult, score_many, tune_operating_point
from .features import FeatureConfig, compute_log_mel, stack_window_array
from .smoothing import (
    SmootherParams,
    fit_gmm_hmm_supervised,
    fit_hmm_supervised,
    hard_bits,
    smooth_decisions,
)
from .synth_corpus import corpus_configs, generate
from .vad_energy import decide, frame_log_energy

METHODS = ("energy", "cnn", "cnn-hmm", "cnn-gmm-hmm")

CONTROL_RANGES = {
    "energy": (-60.0, 60.0),
    "cnn": (-40.0, 40.0),
    "cnn-hmm": (-200.0, 200.0),
    "cnn-gmm-hmm": (-200.0, 200.0),
}

LABELS_FILE = "labels.csv"


@dataclass
class LabeledFile:
    file_id: str
    audio: AudioBuffer
    track: Optional[LabelTrack] = None
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)
    _feats: Optional[np.ndarray] = field(default=None, repr=False)
    _energy: Optional[np.ndarray] = field(default=None, repr=False)
    _logits: dict = field(default_factory=dict, repr=False)

    @property
    def features(self) -> np.ndarray:
        if self._feats is None:
            self._feats = compute_log_mel(self.audio, self.feature_cfg).frames
        return self._feats

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def conditions(self) -> list[str]:
        if self.track is None:
            raise ValueError(f"{self.file_id}: no labels")
        return rasterize_labels(self.track, self.feature_cfg.frame_period_sec, self.num_frames)

    @property
    def log_energy(self) -> np.ndarray:
        if self._energy is None:
            self._energy = frame_log_energy(self.audio, self.feature_cfg.frame_period_sec, self.feature_cfg)
        return self._energy

    def windows(self) -> np.ndarray:
        from .features import FeatureMatrix

        return stack_window_array(FeatureMatrix(self.features, self.feature_cfg.frame_period_sec))

    def logits(self, model: cnn_mod.CnnModel) -> np.ndarray:
        """CNN pre-sigmoid outputs (T, 2), cached for the most recent model."""
        key = id(model)
        if key not in self._logits:
            self._logits = {key: model.logits(self.windows())}
        return self._logits[key]

    def probabilities(self, model: cnn_mod.CnnModel) -> np.ndarray:
        return cnn_mod._sigmoid(self.logits(model))


# -- corpus IO -----------------------------------------------------------------


def synth_files(seconds: float, seed: int, prefix: str = "synth", file_sec: float = 60.0,
                feature_cfg: FeatureConfig = FeatureConfig(), stream: int = 0, **overrides) -> list[LabeledFile]:
    out = []
    for cfg in corpus_configs(seconds, seed, file_sec=file_sec, prefix=prefix, stream=stream, **overrides):
        audio, track = generate(cfg)
        out.append(LabeledFile(cfg.file_id, audio, track, feature_cfg))
    return out


def write_corpus(files: Sequence[LabeledFile], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for f in files:
        write_audio(out_dir / f"{f.file_id}.wav", f.audio)
    write_label_tracks(out_dir / LABELS_FILE, [f.track for f in files if f.track is not None])


def list_audio(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() == ".wav")
    return [path]


def load_labeled_dir(data_dir, labels_path=None, feature_cfg: FeatureConfig = FeatureConfig(),
                     require_labels: bool = True) -> list[LabeledFile]:
    data_dir = Path(data_dir)
    labels_path = Path(labels_path) if labels_path else data_dir / LABELS_FILE
    tracks = {}
    if labels_path.exists():
        tracks = {t.file_id: t for t in load_label_track(labels_path)}
    elif require_labels:
        raise FileNotFoundError(f"label file {labels_path} not found")
    files = []
    for wav in list_audio(data_dir):
        track = tracks.get(wav.stem)
        if require_labels and track is None:
            track = LabelTrack(wav.stem, ())  # unlabeled audio counts as NoSpeech
        files.append(LabeledFile(wav.stem, load_audio(wav), track, feature_cfg))
    if not files:
        raise FileNotFoundError(f"no .wav files in {data_dir}")
    return files


DECISIONS_HEADER = "file_id,decisions"


def format_decisions(rows: Sequence[tuple[str, np.ndarray]]) -> str:
    """One line per file: its id and the frame decisions as a string of 0/1."""
    lines = [DECISIONS_HEADER]
    lines += [f"{fid}," + "".join("1" if b else "0" for b in np.asarray(d).tolist()) for fid, d in rows]
    return "".join(line + "\n" for line in lines)


def read_decisions(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != DECISIONS_HEADER:
            raise ValueError(f"{path}: not a decisions file")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            fid, _, bits = line.partition(",")
            if bits.strip("01"):
                raise ValueError(f"{path}:{lineno}: decisions must be 0/1 characters")
            out[fid] = (np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")).astype(np.int8)
    return out


def is_decisions_file(path) -> bool:
    with open(path) as fh:
        return fh.readline().strip() == DECISIONS_HEADER


# -- training data -------------------------------------------------------------


def training_arrays(files: Sequence[LabeledFile], frame_stride: int = 1):
    """Stacked windows and (speech, nonspeech) targets, every ``frame_stride``-th frame."""
    xs, ys = [], []
    for f in files:
        idx = np.arange(0, f.num_frames, frame_stride)
        if len(idx) == 0:
            continue
        xs.append(f.windows()[idx].astype(np.float32))
        ys.append(cnn_mod.window_targets(f.conditions)[idx])
    if not xs:
        return np.zeros((0, 32, 32), np.float32), np.zeros((0, 2), np.int8)
    return np.concatenate(xs), np.concatenate(ys)


def smoother_training_data(files: Sequence[LabeledFile], model: cnn_mod.CnnModel):
    probs = np.concatenate([f.probabilities(model)[:, 0] for f in files])
    states = np.concatenate([speech_bits(f.conditions) for f in files])
    return probs, states


# -- decision producers --------------------------------------------------------


def decisions_for(method: str, f: LabeledFile, control: float,
                  model: Optional[cnn_mod.CnnModel] = None,
                  smoother: Optional[SmootherParams] = None) -> np.ndarray:
    if method == "energy":
        return decide(f.log_energy, control)
    if model is None:
        raise ValueError(f"method {method} needs a CNN model")
    if f.num_frames == 0:
        return np.zeros(0, dtype=np.int8)
    if method == "cnn":
        return (f.logits(model)[:, 0] > control).astype(np.int8)
    p = f.probabilities(model)
    if smoother is None:
        raise ValueError(f"method {method} needs smoother parameters")
    expected = "hard" if method == "cnn-hmm" else "soft"
    return smooth_decisions(p, smoother.with_bias(control), expected)


def default_control(method: str, smoother: Optional[SmootherParams] = None) -> float:
    if method in ("cnn-hmm", "cnn-gmm-hmm") and smoother is not None:
        return smoother.speech_bias
    return 0.0


def tune_method(method: str, files: Sequence[LabeledFile], target_fpr: float = 0.315,
                tol: float = 0.005, max_iter: int = 40,
                model: Optional[cnn_mod.CnnModel] = None,
                smoother: Optional[SmootherParams] = None) -> TuneResult:
    labels = [f.conditions for f in files]

    def system(control):
        return [(decisions_for(method, f, control, model, smoother), lab) for f, lab in zip(files, labels)]

    return tune_operating_point(system, CONTROL_RANGES[method], target_fpr, tol, max_iter)


def default_jobs() -> int:
    return os.cpu_count() or 1


# -- benchmark -----------------------------------------------------------------

TRAIN_STREAM, TEST_STREAM, CALIB_STREAM = 0, 1, 2


@dataclass
class Benchmark:
    model: cnn_mod.CnnModel
    hmm: SmootherParams
    gmm: SmootherParams
    tuned: dict[str, TuneResult]

    @property
    def reports(self) -> dict[str, EvalReport]:
        return {m: r.report for m, r in self.tuned.items()}


def fit_systems(train: Sequence[LabeledFile], cnn_share: float = 0.7, epochs: int = 4,
                frame_stride: int = 4, seed: int = 0, num_mixtures: int = 3):
    """Train the CNN on the first ``cnn_share`` of ``train``, smoothers on the rest.

    Keeping the smoother data out of the CNN's training set matters: on its own
    training audio the CNN is overconfident and the fitted emissions inherit that.
    """
    n_cnn = min(max(1, int(round(cnn_share * len(train)))), len(train))
    cnn_files, hmm_files = train[:n_cnn], train[n_cnn:] or train
    x, y = training_arrays(cnn_files, frame_stride)
    model = cnn_mod.cnn_train(x, y, cnn_mod.TrainConfig(max_epochs=epochs, seed=seed))
    probs, states = smoother_training_data(hmm_files, model)
    hmm = fit_hmm_supervised(hard_bits(probs), states)
    gmm = fit_gmm_hmm_supervised(probs, states, num_mixtures)
    return model, hmm, gmm


def run_benchmark(seed: int = 0, train_sec: float = 600.0, test_sec: float = 300.0,
                  cnn_share: float = 0.7, epochs: int = 4, frame_stride: int = 4,
                  target_fpr: float = 0.315, tol: float = 0.005, max_iter: int = 40,
                  tune_files: Optional[Sequence[LabeledFile]] = None) -> Benchmark:
    """Train all systems on a synthetic corpus and tune each to ``target_fpr``.

    Systems are tuned on ``tune_files`` (default: the test set itself) and the
    reports are scored on the test set.
    """
    train = synth_files(train_sec, seed, "train", stream=TRAIN_STREAM)
    test = synth_files(test_sec, seed, "test", stream=TEST_STREAM)
    model, hmm, gmm = fit_systems(train, cnn_share, epochs, frame_stride, seed)
    smoothers = {"cnn-hmm": hmm, "cnn-gmm-hmm": gmm}
    tuned = {}
    for method in METHODS:
        sm = smoothers.get(method)
        res = tune_method(method, tune_files or test, target_fpr, tol, max_iter, model, sm)
        if tune_files is not None:
            report = score_many([(decisions_for(method, f, res.control_value, model, sm), f.conditions)
                                 for f in test])
            res = TuneResult(res.control_value, res.achieved_fpr, res.iterations, res.converged, report)
        tuned[method] = res
    return Benchmark(model, hmm, gmm, tuned)
