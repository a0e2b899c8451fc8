"""Synthetic talking-face dataset, rule-based AU binarization and motion files.

Each synthetic clip is a sum of separable parts::

    motion = lip(tokens, style)              # lip channels L only
           + intensity * offset(emotion)     # the emotion's AU channels
           + sum of AU bumps                 # raised-cosine events on AU channels
           + noise, clipped to [0, 1]

so lip sync, emotion and fine control can be measured independently.

Dataset directory::

    manifest.json          spec, phoneme table, per-clip labels and events
    clips/NNNN.motion      binary motion file (see write_motion)
    clips/NNNN.cond.json   tokens, coarse condition, fine condition
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .conditioning import CoarseBatch, normalize_intensity
from .training import TrainingData
from .types import (DEFAULT_FPS, AudioFeatures, AUVocabulary, CoarseCondition, FineCondition,
                    MotionSequence, Triplet)

LIP_CHANNELS = (17, 18, 19, 20, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40)

EMOTION_AUS = {
    0: ("AU04", "AU07"),  # angry
    1: ("AU06", "AU12"),  # happy
    2: ("AU01", "AU15"),  # sad
    3: ("AU02", "AU05"),  # surprised
    4: ("AU09", "AU14"),  # disgusted
}


# ------------------------------------------------------------ synthetic spec
@dataclass
class SyntheticSpec:
    n_clips: int = 500
    T: int = 50
    D: int = 51
    n_phonemes: int = 12
    lip_channels: tuple = LIP_CHANNELS
    emotion_aus: dict = field(default_factory=lambda: dict(EMOTION_AUS))
    n_styles: int = 4
    style_gains: tuple = (0.7, 0.9, 1.1, 1.3)
    intensity_levels: tuple = (1, 2, 3)
    offset_scale: float = 0.6
    run_length: tuple = (2, 6)
    event_rate: float = 1.0
    event_width: tuple = (8, 14)
    event_peak: tuple = (0.7, 0.9)
    event_margin: int = 5
    noise_sigma: float = 0.01
    fps: float = DEFAULT_FPS
    seed: int = 0

    def __post_init__(self):
        self.lip_channels = tuple(int(c) for c in self.lip_channels)
        self.emotion_aus = {int(k): tuple(v) for k, v in self.emotion_aus.items()}
        self.style_gains = tuple(self.style_gains)
        if len(self.style_gains) != self.n_styles:
            raise ValueError("one gain per style required")
        if not 0 < self.event_peak[0] <= self.event_peak[1] <= 1:
            raise ValueError("event peak range must lie in (0, 1]")
        if self.event_width[0] < 2 or self.event_width[0] > self.event_width[1]:
            raise ValueError("bad event width range")

    @property
    def n_emotions(self) -> int:
        return len(self.emotion_aus)

    def expression_channels(self, vocab: AUVocabulary) -> tuple:
        chans = {c for aus in self.emotion_aus.values() for au in aus for c in vocab.channels(au)}
        return tuple(sorted(chans))

    def validate(self, vocab: AUVocabulary):
        vocab.check(self.D)
        lips = set(self.lip_channels)
        if any(not 0 <= c < self.D for c in lips):
            raise ValueError("lip channel outside [0, D)")
        overlap = lips & set(self.expression_channels(vocab))
        if overlap:
            raise ValueError(f"lip channels overlap expression channels: {sorted(overlap)}")
        min_span = self.event_width[1] + 2 * self.event_margin
        if self.event_rate > 0 and self.T < min_span:
            raise ValueError(f"T={self.T} too short for events (need >= {min_span})")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["emotion_aus"] = {str(k): list(v) for k, v in self.emotion_aus.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        doc = dict(doc)
        for key in ("lip_channels", "style_gains", "intensity_levels", "run_length",
                    "event_width", "event_peak"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


@dataclass(frozen=True)
class AUEvent:
    aus: tuple
    start: int
    width: int
    peak: float

    @property
    def end(self) -> int:
        return self.start + self.width

    def to_json(self) -> dict:
        return {"aus": list(self.aus), "start": self.start, "width": self.width, "peak": self.peak}

    @classmethod
    def from_json(cls, doc) -> "AUEvent":
        return cls(tuple(doc["aus"]), int(doc["start"]), int(doc["width"]), float(doc["peak"]))


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    tokens: np.ndarray
    audio: AudioFeatures
    coarse: CoarseCondition
    motion: MotionSequence
    fine: FineCondition
    events: tuple = ()
    intensity_level: int = 0


@dataclass
class Dataset:
    spec: SyntheticSpec
    phoneme_table: np.ndarray
    clips: list

    def __len__(self):
        return len(self.clips)

    def manifest(self) -> dict:
        return {
            "version": 1,
            "spec": self.spec.to_json(),
            "phoneme_table": self.phoneme_table.tolist(),
            "clips": [{
                "id": c.clip_id,
                "style_id": c.coarse.style_id,
                "emotion_id": c.coarse.emotion_id,
                "intensity_level": c.intensity_level,
                "intensity": c.coarse.intensity,
                "events": [e.to_json() for e in c.events],
            } for c in self.clips],
        }

    def split(self, holdout: float = 0.1) -> tuple[list, list]:
        """Index lists ``(train, held_out)``; the last ``holdout`` fraction is held out."""
        n_hold = int(round(len(self) * holdout))
        idx = list(range(len(self)))
        return idx[:len(self) - n_hold], idx[len(self) - n_hold:]

    def training_data(self, indices: Sequence[int] | None = None) -> TrainingData:
        clips = self.clips if indices is None else [self.clips[i] for i in indices]
        return TrainingData(
            motion=np.stack([c.motion.frames for c in clips]),
            audio=np.stack([c.audio.features for c in clips]),
            coarse=CoarseBatch.from_conditions([c.coarse for c in clips]),
            fine=[c.fine for c in clips],
        )


def phoneme_table(spec: SyntheticSpec) -> np.ndarray:
    """Per-phoneme lip shapes, ``P x |L|`` in ``[0.1, 0.7]``."""
    rng = np.random.default_rng([spec.seed, 0])
    return rng.uniform(0.1, 0.7, (spec.n_phonemes, len(spec.lip_channels)))


def audio_features(tokens: np.ndarray, n_phonemes: int) -> np.ndarray:
    """One-hot phoneme features, ``T x P``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    return np.eye(n_phonemes)[tokens]


def lip_component(tokens: np.ndarray, table: np.ndarray, gain: float) -> np.ndarray:
    """Phoneme shapes smoothed with a ``[1/4, 1/2, 1/4]`` kernel (edge-padded), scaled by ``gain``."""
    raw = table[np.asarray(tokens)]
    padded = np.concatenate([raw[:1], raw, raw[-1:]])
    return gain * (0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:])


def bump(width: int, peak: float) -> np.ndarray:
    """Raised-cosine profile over ``width`` frames, maximum ``peak`` at the center."""
    k = np.arange(width)
    return peak * 0.5 * (1 - np.cos(2 * np.pi * (k + 0.5) / width))


def event_signal(events: Sequence[AUEvent], vocab: AUVocabulary, T: int, D: int) -> np.ndarray:
    out = np.zeros((T, D))
    for ev in events:
        prof = bump(ev.width, ev.peak)
        for au in ev.aus:
            for c in vocab.channels(au):
                out[ev.start:ev.end, c] += prof
    return out


def emotion_offset(emotion_id: int, spec: SyntheticSpec, vocab: AUVocabulary) -> np.ndarray:
    off = np.zeros(spec.D)
    for au in spec.emotion_aus[emotion_id]:
        off[list(vocab.channels(au))] = spec.offset_scale
    return off


def events_to_fine(events: Sequence[AUEvent]) -> FineCondition:
    return FineCondition(tuple((frozenset(e.aus), e.start, e.end) for e in events))


def _tokens(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    lo, hi = spec.run_length
    out = []
    while len(out) < spec.T:
        out.extend([int(rng.integers(spec.n_phonemes))] * int(rng.integers(lo, hi + 1)))
    return np.array(out[:spec.T], dtype=np.int64)


def _events(rng: np.random.Generator, spec: SyntheticSpec, emotion_id: int) -> tuple:
    aus = spec.emotion_aus[emotion_id]
    events = []
    for _ in range(int(rng.poisson(spec.event_rate))):
        width = int(rng.integers(spec.event_width[0], spec.event_width[1] + 1))
        start = int(rng.integers(spec.event_margin, spec.T - width - spec.event_margin + 1))
        mask = rng.random(len(aus)) < 0.5
        if not mask.any():
            mask[rng.integers(len(aus))] = True
        chosen = tuple(a for a, m in zip(aus, mask) if m)
        peak = float(rng.uniform(*spec.event_peak))
        events.append(AUEvent(chosen, start, width, peak))
    return tuple(sorted(events, key=lambda e: (e.start, e.aus)))


def clean_motion(tokens, style_id, emotion_id, intensity, events, spec, vocab, table) -> np.ndarray:
    """Noise-free, unclipped motion implied by the manifest entries."""
    motion = np.zeros((spec.T, spec.D))
    motion[:, list(spec.lip_channels)] = lip_component(tokens, table, spec.style_gains[style_id])
    motion += intensity * emotion_offset(emotion_id, spec, vocab)
    motion += event_signal(events, vocab, spec.T, spec.D)
    return motion


def generate_clip(i: int, spec: SyntheticSpec, vocab: AUVocabulary, table: np.ndarray) -> ClipRecord:
    rng = np.random.default_rng([spec.seed, 1, i])
    emotion_id = i % spec.n_emotions
    style_id = int(rng.integers(spec.n_styles))
    level = int(rng.choice(spec.intensity_levels))
    intensity = normalize_intensity(level)
    tokens = _tokens(rng, spec)
    events = _events(rng, spec, emotion_id)
    motion = clean_motion(tokens, style_id, emotion_id, intensity, events, spec, vocab, table)
    motion = motion + spec.noise_sigma * rng.standard_normal(motion.shape)
    # stored at fp32 precision so the motion file round-trips exactly
    motion = np.clip(motion, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return ClipRecord(
        clip_id=f"{i:04d}",
        tokens=tokens,
        audio=AudioFeatures(audio_features(tokens, spec.n_phonemes)),
        coarse=CoarseCondition(style_id, emotion_id, intensity),
        motion=MotionSequence(motion, spec.fps),
        fine=events_to_fine(events),
        events=events,
        intensity_level=level,
    )


def generate_dataset(spec: SyntheticSpec, vocab: AUVocabulary | None = None) -> Dataset:
    """Deterministic in ``spec`` (including its seed); clip ``i`` uses its own sub-seed."""
    vocab = vocab or AUVocabulary.default()
    spec.validate(vocab)
    table = phoneme_table(spec)
    return Dataset(spec, table, [generate_clip(i, spec, vocab, table) for i in range(spec.n_clips)])


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256(json.dumps(ds.manifest(), sort_keys=True).encode())
    for c in ds.clips:
        h.update(c.tokens.astype("<i8").tobytes())
        h.update(c.motion.frames.astype("<f4").tobytes())
    return h.hexdigest()


# ------------------------------------------------------------- motion files
MOTION_MAGIC = b"FMOT"
MOTION_VERSION = 1
_HEADER = struct.Struct("<4sHHIIf")


class MotionFormatError(ValueError):
    pass


def write_motion(path: str | os.PathLike, motion: MotionSequence | np.ndarray, fps: float | None = None):
    """Header ``<4sHHIIf`` (magic, version, reserved, T, D, fps) then fp32 row-major payload."""
    if isinstance(motion, MotionSequence):
        frames, fps = motion.frames, motion.fps if fps is None else fps
    else:
        frames = np.asarray(motion, dtype=np.float64)
    fps = DEFAULT_FPS if fps is None else fps
    if frames.ndim != 2:
        raise ValueError("motion must be T x D")
    if not np.all(np.isfinite(frames)):
        raise MotionFormatError("refusing to write non-finite motion")
    T, D = frames.shape
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MOTION_MAGIC, MOTION_VERSION, 0, T, D, fps) + payload)


def read_motion(path: str | os.PathLike) -> MotionSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MotionFormatError(f"{path}: file shorter than header")
    magic, version, _, T, D, fps = _HEADER.unpack_from(raw)
    if magic != MOTION_MAGIC:
        raise MotionFormatError(f"{path}: bad magic {magic!r}")
    if version != MOTION_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * T * D
    if len(raw) != expected:
        raise MotionFormatError(f"{path}: header says {T}x{D} ({expected} bytes), file has {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float64)
    if not np.all(np.isfinite(frames)):
        raise MotionFormatError(f"{path}: non-finite payload")
    return MotionSequence(frames, float(fps))


# ---------------------------------------------------------- dataset on disk
def write_dataset(ds: Dataset, out_dir: str | os.PathLike):
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    for c in ds.clips:
        write_motion(out / "clips" / f"{c.clip_id}.motion", c.motion)
        cond = {
            "tokens": c.tokens.tolist(),
            "coarse": {"style_id": c.coarse.style_id, "emotion_id": c.coarse.emotion_id,
                       "intensity": c.coarse.intensity},
            "fine": c.fine.to_json(),
        }
        with open(out / "clips" / f"{c.clip_id}.cond.json", "w") as fh:
            json.dump(cond, fh)
    manifest = ds.manifest()
    manifest["hash"] = dataset_hash(ds)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def read_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    with open(root / "manifest.json") as fh:
        man = json.load(fh)
    spec = SyntheticSpec.from_json(man["spec"])
    clips = []
    for entry in man["clips"]:
        cid = entry["id"]
        with open(root / "clips" / f"{cid}.cond.json") as fh:
            cond = json.load(fh)
        tokens = np.array(cond["tokens"], dtype=np.int64)
        co = cond["coarse"]
        clips.append(ClipRecord(
            clip_id=cid,
            tokens=tokens,
            audio=AudioFeatures(audio_features(tokens, spec.n_phonemes)),
            coarse=CoarseCondition(co["style_id"], co["emotion_id"], co["intensity"]),
            motion=read_motion(root / "clips" / f"{cid}.motion"),
            fine=FineCondition.from_json(cond["fine"]),
            events=tuple(AUEvent.from_json(e) for e in entry["events"]),
            intensity_level=entry["intensity_level"],
        ))
    return Dataset(spec, np.array(man["phoneme_table"]), clips)


# ------------------------------------------------------------- binarization
@dataclass(frozen=True)
class BinarizeConfig:
    threshold: float = 0.25
    kernels: tuple = (3, 5, 7)
    spacing: int = 5
    p_merge: float = 0.5
    min_length: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError("kernel sizes must be odd and >= 1")
        if not 0 <= self.p_merge <= 1:
            raise ValueError("p_merge must lie in [0, 1]")


def runs(active: np.ndarray) -> list[tuple[int, int]]:
    """Maximal half-open ``[start, end)`` runs of True."""
    padded = np.concatenate([[False], np.asarray(active, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def max_pool(active: np.ndarray, kernel: int) -> np.ndarray:
    """Centered binary max pooling with stride 1; windows are clipped at the ends."""
    r = kernel // 2
    out = np.asarray(active, dtype=bool).copy()
    for shift in range(1, r + 1):
        out[shift:] |= active[:-shift]
        out[:-shift] |= active[shift:]
    return out


def merge_runs(spans: list, spacing: int, p_merge: float, rng: np.random.Generator) -> list:
    """Join consecutive runs whose gap is below ``spacing`` with probability ``p_merge``."""
    if not spans:
        return []
    merged = [spans[0]]
    for s, e in spans[1:]:
        ps, pe = merged[-1]
        if s - pe < spacing and rng.random() < p_merge:
            merged[-1] = (ps, e)
        else:
            merged.append((s, e))
    return merged


def binarize(motion: MotionSequence | np.ndarray, vocab: AUVocabulary, cfg: BinarizeConfig | None = None,
             rng: np.random.Generator | None = None) -> FineCondition:
    """Motion to AU triplets: threshold, random max-pool, random run merging.

    AUs are processed in vocabulary order; each draws its kernel, then one
    merge decision per gap shorter than ``spacing``. Runs shorter than
    ``min_length`` are dropped.
    """
    cfg = cfg or BinarizeConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    frames = motion.frames if isinstance(motion, MotionSequence) else np.asarray(motion)
    out = []
    for au in vocab.entries:
        chans = [c for c in vocab.channel_map.get(au, ()) if c < frames.shape[1]]
        if not chans:
            continue
        active = frames[:, chans].max(axis=1) > cfg.threshold
        kernel = int(rng.choice(cfg.kernels))
        pooled = max_pool(active, kernel)
        for s, e in merge_runs(runs(pooled), cfg.spacing, cfg.p_merge, rng):
            if e - s >= cfg.min_length:
                out.append(Triplet(frozenset([au]), s, e))
    out.sort(key=lambda t: (t.start, vocab.index(next(iter(t.aus)))))
    return FineCondition(tuple(out))
