import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facediff.data import LIP_CHANNELS, SyntheticSpec, generate_dataset
from facediff.evaluation import (ClassifierConfig, accuracy, classify, control_rate, control_report, diversity,
                                 evaluate, lve, mean_motion_baseline, train_classifier)
from facediff.reference import control_rate_ref, diversity_ref, lve_ref
from facediff.types import AUVocabulary, FineCondition

VOCAB = AUVocabulary(("AU12", "AU01"), channel_map={"AU12": (0, 1), "AU01": (2,)})


def test_control_rate_examples():
    m = np.zeros((20, 3))
    m[8, 1] = 0.8
    assert control_rate(m, (["AU12"], 5, 12), VOCAB)[0].cr == pytest.approx(0.8)
    assert control_rate(np.full((20, 3), 0.5), (["AU12"], 5, 12), VOCAB)[0].cr == 0.0


def test_control_rate_window_clipping_and_flag():
    m = np.zeros((10, 3))
    m[:, 2] = np.arange(10) / 10
    res = control_rate(m, (["AU01"], 2, 8), VOCAB)[0]
    # neighbors are frames 0, 1, 8, 9
    assert res.cr == pytest.approx(0.7 - (0 + 0.1 + 0.8 + 0.9) / 4)
    full = control_rate(m, (["AU01"], 0, 10), VOCAB)[0]
    assert full.flagged and full.cr == pytest.approx(0.9)
    with pytest.raises(ValueError):
        control_rate(m, (["AU01"], 3, 11), VOCAB)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_control_rate_matches_reference(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 30))
    m = rng.random((T, 3))
    s = int(rng.integers(0, T))
    trip = (["AU12", "AU01"][:int(rng.integers(1, 3))], s, int(rng.integers(s + 1, T + 1)))
    fast = [(r.au, r.cr) for r in control_rate(m, trip, VOCAB)]
    assert fast == control_rate_ref(m.tolist(), trip, VOCAB.channel_map)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2, 2))
def test_control_rate_shift_invariant(seed, c):
    m = np.random.default_rng(seed).random((20, 3))
    a = control_rate(m, (["AU12"], 4, 9), VOCAB)[0].cr
    b = control_rate(m + c, (["AU12"], 4, 9), VOCAB)[0].cr
    assert a == pytest.approx(b, abs=1e-9)


def test_lve_examples():
    gt = np.random.default_rng(0).random((10, 51))
    assert lve(gt, gt, LIP_CHANNELS) == 0.0
    pred = gt.copy()
    pred[3, LIP_CHANNELS[2]] += 0.1
    assert lve(pred, gt, LIP_CHANNELS) == pytest.approx(0.001)
    other = gt.copy()
    other[:, 0] += 5.0  # non-lip channels do not count
    assert lve(other, gt, LIP_CHANNELS) == 0.0


def test_lve_and_diversity_match_references():
    rng = np.random.default_rng(1)
    a, b = rng.random((12, 51)), rng.random((12, 51))
    assert lve(a, b, LIP_CHANNELS) == pytest.approx(lve_ref(a.tolist(), b.tolist(), LIP_CHANNELS), rel=1e-12)
    f = rng.normal(size=(9, 6))
    assert diversity(f) == pytest.approx(diversity_ref(f.tolist()), rel=1e-12)


def test_diversity_examples():
    assert diversity(np.ones((3, 4))) == 0.0
    assert diversity(np.array([np.zeros(5), np.ones(5)])) == 0.5
    with pytest.raises(ValueError):
        diversity(np.ones((1, 3)))


def test_mean_motion_baseline():
    m = np.arange(12.0).reshape(2, 3, 2)
    np.testing.assert_array_equal(mean_motion_baseline(m), [5.0, 6.0])


def test_control_report_aggregates():
    rng = np.random.default_rng(2)
    motions = [rng.random((20, 3)) for _ in range(3)]
    fines = [FineCondition(((["AU12", "AU01"], 2, 6),)), FineCondition(), FineCondition(((["AU01"], 10, 20),))]
    rep = control_report(motions, fines, VOCAB)
    assert rep.count == 2 and len(rep.rows) == 3 and rep.flagged == 0
    by_triplet = {}
    for clip, i, _, v in rep.rows:
        by_triplet.setdefault((clip, i), []).append(v)
    assert rep.mean == pytest.approx(np.mean([np.mean(v) for v in by_triplet.values()]))


@pytest.fixture(scope="module")
def emotion_data():
    ds = generate_dataset(SyntheticSpec(n_clips=150, seed=11))
    motions = np.stack([c.motion.frames for c in ds.clips])
    labels = np.array([c.coarse.emotion_id for c in ds.clips])
    return motions, labels


def test_classifier_learns_and_is_deterministic(emotion_data):
    motions, labels = emotion_data
    clf = train_classifier(motions[:120], labels[:120], 5, ClassifierConfig(epochs=8))
    assert accuracy(clf, motions[120:], labels[120:]) >= 0.95
    p1, f1 = classify(clf, motions[0])
    p2, f2 = classify(clf, motions[0])
    assert p1 == p2 and np.array_equal(f1, f2)


def test_classifier_with_shuffled_labels_is_at_chance(emotion_data):
    motions, labels = emotion_data
    ds = generate_dataset(SyntheticSpec(n_clips=500, seed=12))
    test_m = np.stack([c.motion.frames for c in ds.clips])
    test_l = np.array([c.coarse.emotion_id for c in ds.clips])
    shuffled = np.random.default_rng(0).permutation(labels)
    clf = train_classifier(motions, shuffled, 5, ClassifierConfig(epochs=8))
    assert abs(accuracy(clf, test_m, test_l) - 0.2) <= 0.05


def test_evaluate_report(tmp_path):
    rng = np.random.default_rng(3)
    gt = [rng.random((20, 51)) for _ in range(3)]
    gen = [g + 0.01 for g in gt]
    fines = [FineCondition(((["AU12"], 2, 6),)), FineCondition(), FineCondition()]
    vocab = AUVocabulary.default()
    rep = evaluate(["a", "b", "c"], gt, gt, [0, 1, 2], LIP_CHANNELS, vocab)
    assert rep.aggregates["lve"] == 0.0 and "cr" not in rep.aggregates and rep.control is None
    rep = evaluate(["a", "b", "c"], gen, gt, [0, 1, 2], LIP_CHANNELS, vocab, fines=fines)
    assert rep.aggregates["lve"] == pytest.approx(np.mean([r["lve"] for r in rep.rows]))
    assert rep.aggregates["cr"] == pytest.approx(rep.rows[0]["cr"])
    rep.save(tmp_path)
    doc = json.load(open(tmp_path / "report.json"))
    assert doc["aggregates"]["n_clips"] == 3
    assert (tmp_path / "report.csv").read_text().splitlines()[0].startswith("clip,lve")
    with pytest.raises(ValueError):
        evaluate(["a"], gen, gt, [0, 1, 2], LIP_CHANNELS, vocab)
