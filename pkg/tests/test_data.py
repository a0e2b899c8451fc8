import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facediff.data import (AUEvent, BinarizeConfig, MotionFormatError, SyntheticSpec, binarize, clean_motion,
                           dataset_hash, event_signal, events_to_fine, generate_dataset, max_pool, merge_runs,
                           read_dataset, read_motion, runs, write_dataset, write_motion)
from facediff.reference import binarize_ref
from facediff.types import AUVocabulary, MotionSequence

VOCAB = AUVocabulary.default()
SMALL = SyntheticSpec(n_clips=12, seed=5)


def test_generation_is_deterministic():
    assert dataset_hash(generate_dataset(SMALL)) == dataset_hash(generate_dataset(SMALL))
    assert dataset_hash(generate_dataset(SMALL)) != dataset_hash(generate_dataset(SyntheticSpec(n_clips=12, seed=6)))


def test_zero_intensity_leaves_only_noise_on_expression_channels():
    ds = generate_dataset(SyntheticSpec(n_clips=10, intensity_levels=(0,), event_rate=0.0, seed=1))
    chans = list(ds.spec.expression_channels(VOCAB))
    for c in ds.clips:
        assert c.coarse.intensity == 0.0
        assert abs(c.motion.frames[:, chans].mean()) < ds.spec.noise_sigma


def test_manifest_recomputes_fine_and_motion():
    ds = generate_dataset(SMALL)
    man = ds.manifest()
    for entry, clip in zip(man["clips"], ds.clips):
        events = tuple(AUEvent.from_json(e) for e in entry["events"])
        assert events_to_fine(events) == clip.fine
        clean = clean_motion(clip.tokens, entry["style_id"], entry["emotion_id"], entry["intensity"], events,
                             ds.spec, VOCAB, np.array(man["phoneme_table"]))
        err = np.abs(np.clip(clean, 0, 1) - clip.motion.frames)
        assert err.max() < 6 * ds.spec.noise_sigma


def test_events_stay_on_their_emotion_aus():
    ds = generate_dataset(SyntheticSpec(n_clips=40, seed=2))
    for c in ds.clips:
        own = set(ds.spec.emotion_aus[c.coarse.emotion_id])
        for ev in c.events:
            assert set(ev.aus) <= own
            assert ds.spec.event_margin <= ev.start and ev.end <= ds.spec.T - ds.spec.event_margin


def test_split_holds_out_tail():
    ds = generate_dataset(SyntheticSpec(n_clips=20, seed=0))
    tr, va = ds.split()
    assert tr == list(range(18)) and va == [18, 19]


def test_spec_validation_and_json():
    assert SyntheticSpec.from_json(json.loads(json.dumps(SMALL.to_json()))) == SMALL
    with pytest.raises(ValueError):
        SyntheticSpec(style_gains=(1.0,))
    with pytest.raises(ValueError):
        generate_dataset(SyntheticSpec(T=10))


def test_event_signal_peaks():
    ev = AUEvent(("AU12",), 3, 10, 0.8)
    sig = event_signal([ev], VOCAB, 20, 51)
    ch = VOCAB.channels("AU12")[0]
    assert sig[:3].sum() == 0 and sig[13:].sum() == 0
    assert sig[3:13, ch].max() == pytest.approx(0.8, abs=0.03)


# -------------------------------------------------------------- motion files
def _text_dump_reader(path):
    """Independent reader: unpack every field with struct, render to text, parse back."""
    raw = open(path, "rb").read()
    magic, version, _, T, D, fps = struct.unpack("<4sHHIIf", raw[:20])
    values = struct.unpack(f"<{T * D}f", raw[20:])
    text = "\n".join(" ".join(repr(v) for v in values[r * D:(r + 1) * D]) for r in range(T))
    return magic, version, fps, np.array([[float(x) for x in line.split()] for line in text.splitlines()])


def test_motion_round_trip_and_dual_reader(tmp_path):
    frames = np.random.default_rng(0).random((7, 5)).astype(np.float32).astype(np.float64)
    write_motion(tmp_path / "a.motion", MotionSequence(frames, 30.0))
    back = read_motion(tmp_path / "a.motion")
    np.testing.assert_array_equal(back.frames, frames)
    assert back.fps == 30.0
    magic, version, fps, dumped = _text_dump_reader(tmp_path / "a.motion")
    assert (magic, version, fps) == (b"FMOT", 1, 30.0)
    np.testing.assert_array_equal(dumped, frames)


@pytest.mark.parametrize("damage", ["truncate", "short", "magic", "version", "nan"])
def test_motion_corruption(tmp_path, damage):
    p = tmp_path / "a.motion"
    write_motion(p, np.zeros((4, 3)))
    raw = bytearray(p.read_bytes())
    if damage == "truncate":
        raw = raw[:-4]
    elif damage == "short":
        raw = raw[:10]
    elif damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 7
    else:
        raw[20:24] = struct.pack("<f", float("nan"))
    p.write_bytes(bytes(raw))
    with pytest.raises(MotionFormatError):
        read_motion(p)


def test_dataset_directory_round_trip(tmp_path):
    ds = generate_dataset(SMALL)
    write_dataset(ds, tmp_path / "ds")
    man = json.load(open(tmp_path / "ds" / "manifest.json"))
    on_disk = sorted(p.name for p in (tmp_path / "ds" / "clips").glob("*.motion"))
    assert len(man["clips"]) == len(ds) == len(on_disk)
    back = read_dataset(tmp_path / "ds")
    assert dataset_hash(back) == dataset_hash(ds) == man["hash"]


def test_empty_dataset(tmp_path):
    ds = generate_dataset(SyntheticSpec(n_clips=0))
    write_dataset(ds, tmp_path / "e")
    assert json.load(open(tmp_path / "e" / "manifest.json"))["clips"] == []


# ------------------------------------------------------------- binarization
def test_binarize_examples():
    assert binarize(np.zeros((30, 51)), VOCAB).empty
    frames = np.zeros((30, 51))
    frames[:, list(VOCAB.channels("AU12"))] = 0.9
    fc = binarize(frames, VOCAB)
    assert [(sorted(t.aus), t.start, t.end) for t in fc.triplets] == [(["AU12"], 0, 30)]


def test_binarize_helpers():
    assert runs(np.array([0, 1, 1, 0, 1], bool)) == [(1, 3), (4, 5)]
    np.testing.assert_array_equal(max_pool(np.array([0, 0, 1, 0, 0, 0], bool), 3), [0, 1, 1, 1, 0, 0])
    rng = np.random.default_rng(0)
    assert merge_runs([(0, 2), (4, 6)], 5, 1.0, rng) == [(0, 6)]
    assert merge_runs([(0, 2), (4, 6)], 5, 0.0, rng) == [(0, 2), (4, 6)]
    assert merge_runs([(0, 2), (9, 12)], 5, 1.0, rng) == [(0, 2), (9, 12)]
    with pytest.raises(ValueError):
        BinarizeConfig(kernels=(4,))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 0.9))
def test_binarize_matches_reference(seed, threshold):
    rng = np.random.default_rng(seed)
    frames = rng.random((int(rng.integers(1, 40)), 51)) ** 3
    cfg = BinarizeConfig(threshold=threshold)
    fast = binarize(frames, VOCAB, cfg, np.random.default_rng(seed))
    ref = binarize_ref(frames.tolist(), list(VOCAB.entries), VOCAB.channel_map, cfg.threshold, cfg.kernels,
                       cfg.spacing, cfg.p_merge, cfg.min_length, np.random.default_rng(seed))
    assert fast == ref
    for t in fast.triplets:
        assert 0 <= t.start and t.end <= len(frames) and t.end - t.start >= cfg.min_length


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_binarize_without_merging_covers_every_active_frame(seed):
    rng = np.random.default_rng(seed)
    frames = rng.random((40, 51)) ** 4
    cfg = BinarizeConfig(p_merge=0.0, min_length=1, kernels=(1,))
    fc = binarize(frames, VOCAB, cfg, rng)
    for au in VOCAB.entries:
        active = frames[:, list(VOCAB.channels(au))].max(axis=1) > cfg.threshold
        covered = np.zeros(40, bool)
        for t in fc.triplets:
            if au in t.aus:
                covered[t.start:t.end] = True
        np.testing.assert_array_equal(covered, active)
