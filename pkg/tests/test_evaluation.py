from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segwright.evaluation import (
    EvaluationError,
    UnreachableTarget,
    compare_systems,
    score_frames,
    score_many,
    tune_operating_point,
)

C, N, M, S = "CleanSpeech", "SpeechNoise", "SpeechMusic", "NoSpeech"


def hand_fixture():
    labels = [C] * 4 + [N] * 2 + [S] * 4
    decisions = [1, 1, 1, 0] + [1, 0] + [1, 0, 0, 0]
    return decisions, labels


def test_hand_built_ten_frames():
    rep = score_frames(*hand_fixture())
    assert rep.tpr_clean == 0.75
    assert rep.tpr_noise == 0.5
    assert Fraction(rep.tpr_all).limit_denominator(100) == Fraction(2, 3)
    assert rep.tpr_all == 4 / 6
    assert rep.fpr == 0.25
    assert rep.tpr_music is None


def test_perfect_decisions():
    labels = [C, N, M, S, S]
    rep = score_frames([1, 1, 1, 0, 0], labels)
    assert (rep.tpr_clean, rep.tpr_noise, rep.tpr_music, rep.tpr_all, rep.fpr) == (1.0, 1.0, 1.0, 1.0, 0.0)


def test_length_mismatch():
    with pytest.raises(EvaluationError):
        score_frames([1, 0], [C])


labels_st = st.lists(st.sampled_from([C, N, M, S]), min_size=1, max_size=80)


@settings(max_examples=100, deadline=None)
@given(labels_st, st.integers(0, 2**32 - 1))
def test_rates_bounded_and_micro_average(labels, seed):
    d = np.random.default_rng(seed).integers(0, 2, len(labels))
    rep = score_frames(d, labels)
    per = [v for v in (rep.tpr_clean, rep.tpr_noise, rep.tpr_music) if v is not None]
    for v in per + [rep.tpr_all, rep.fpr]:
        assert v is None or 0.0 <= v <= 1.0
    if per:
        assert min(per) - 1e-12 <= rep.tpr_all <= max(per) + 1e-12


@settings(max_examples=100, deadline=None)
@given(labels_st, st.integers(0, 2**32 - 1))
def test_collapse_to_clean(labels, seed):
    d = np.random.default_rng(seed).integers(0, 2, len(labels))
    a = score_frames(d, labels)
    b = score_frames(d, [C if x != S else S for x in labels])
    assert a.tpr_all == b.tpr_all and a.fpr == b.fpr


def test_score_many_pools_counts():
    d, lab = hand_fixture()
    rep = score_many([(d[:5], lab[:5]), (d[5:], lab[5:])])
    assert rep == score_frames(d, lab)


def _threshold_system(scores, labels):
    return lambda c: [((scores > c).astype(int), labels)]


def test_tuner_hits_target():
    rng = np.random.default_rng(0)
    labels = [S] * 2000 + [C] * 1000
    scores = np.concatenate([rng.normal(0, 1, 2000), rng.normal(2, 1, 1000)])
    res = tune_operating_point(_threshold_system(scores, labels), (-10, 10))
    assert res.converged and abs(res.achieved_fpr - 0.315) <= 0.005
    assert res.iterations <= 40
    again = tune_operating_point(_threshold_system(scores, labels), (-10, 10))
    assert again == res


def test_tuner_unreachable():
    labels = [S, S, C]
    with pytest.raises(UnreachableTarget):
        tune_operating_point(lambda c: [([1, 1, 1], labels)], (-1, 1), target_fpr=0.0)


def test_tuner_flags_miss():
    # FPR jumps from 0 to 1 in one step, so 0.315 can never be hit
    labels = [S] * 10
    res = tune_operating_point(lambda c: [([int(c > 0)] * 10, labels)], (-1, 1), max_iter=12)
    assert not res.converged
    assert res.iterations == 12


def test_tuner_needs_nospeech():
    with pytest.raises(EvaluationError):
        tune_operating_point(lambda c: [([1], [C])], (-1, 1))


def _rep(tpr, fpr=0.315):
    labels = [C] * 1000 + [S] * 1000
    d = [1] * int(round(tpr * 1000)) + [0] * (1000 - int(round(tpr * 1000)))
    d += [1] * int(round(fpr * 1000)) + [0] * (1000 - int(round(fpr * 1000)))
    return score_frames(d, labels)


def test_ranking_order():
    r = compare_systems({"VAD1": _rep(0.646), "VAD2": _rep(0.886), "VAD3": _rep(0.907)})
    assert r.order == ("VAD3", "VAD2", "VAD1")
    assert r.to_csv().splitlines()[0] == "system,clean,noise,music,all,fpr"


def test_single_report():
    assert compare_systems({"only": _rep(0.5)}).order == ("only",)


def test_ties_reported():
    r = compare_systems({"b": _rep(0.5), "a": _rep(0.5), "c": _rep(0.7)})
    assert r.order == ("c", "b", "a")
    assert r.ties == (("b", "a"),)
    assert "tie: b = a" in r.to_text()


def test_mismatched_fpr():
    with pytest.raises(EvaluationError):
        compare_systems({"a": _rep(0.5, 0.30), "b": _rep(0.6, 0.33)})
