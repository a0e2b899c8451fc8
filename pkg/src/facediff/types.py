"""Motion, condition and vocabulary types plus the mask builders.

Triplet intervals are half-open: a triplet ``(aus, start, end)`` covers
frames ``start <= t < end``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .nn import MASK_NEG

DEFAULT_FPS = 25.0
DEFAULT_DIM = 51


class FineConditionRangeError(ValueError):
    """A triplet lies outside ``[0, T]`` or is malformed."""


class VocabularyError(KeyError):
    """An AU id is unknown or has no channel mapping."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MotionSequence:
    """``T x D`` blendshape coefficients at ``fps`` frames per second."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        frames = _frozen(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"motion must be T x D with T >= 1, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("motion contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class AudioFeatures:
    features: np.ndarray

    def __post_init__(self):
        feats = _frozen(self.features)
        if feats.ndim != 2:
            raise ValueError(f"audio features must be T x d_a, got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("audio features contain non-finite values")
        object.__setattr__(self, "features", feats)

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class CoarseCondition:
    style_id: int
    emotion_id: int
    intensity: float = 1.0

    def __post_init__(self):
        if self.intensity < 0 or not np.isfinite(self.intensity):
            raise ValueError(f"intensity must be finite and >= 0, got {self.intensity}")


class Triplet(NamedTuple):
    aus: frozenset
    start: int
    end: int


@dataclass(frozen=True)
class FineCondition:
    """Fine-grained control: a list of ``(AU set, start, end)`` triplets."""

    triplets: tuple = ()

    def __post_init__(self):
        out = []
        for trip in self.triplets:
            aus, start, end = trip
            aus = frozenset(aus)
            if not aus:
                raise FineConditionRangeError("triplet with empty AU set")
            start, end = int(start), int(end)
            if not 0 <= start < end:
                raise FineConditionRangeError(f"bad interval [{start}, {end})")
            out.append(Triplet(aus, start, end))
        object.__setattr__(self, "triplets", tuple(out))

    @property
    def empty(self) -> bool:
        return not self.triplets

    def __len__(self):
        return len(self.triplets)

    def check_range(self, T: int):
        for trip in self.triplets:
            if trip.end > T:
                raise FineConditionRangeError(f"triplet [{trip.start}, {trip.end}) exceeds T={T}")

    def aus(self) -> set:
        return set().union(*(t.aus for t in self.triplets)) if self.triplets else set()

    def to_json(self) -> list:
        return [{"aus": sorted(t.aus), "start": t.start, "end": t.end} for t in self.triplets]

    @classmethod
    def from_json(cls, items: Iterable[Mapping]) -> "FineCondition":
        return cls(tuple((frozenset(it["aus"]), it["start"], it["end"]) for it in items))


@dataclass(frozen=True)
class AUVocabulary:
    """Ordered AU ids with face-region tags and AU -> channel index sets."""

    entries: tuple
    face_region: Mapping[str, str] = field(default_factory=dict)
    channel_map: Mapping[str, tuple] = field(default_factory=dict)
    channel_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "channel_map",
                           {k: tuple(int(c) for c in v) for k, v in self.channel_map.items()})
        if len(set(self.entries)) != len(self.entries):
            raise VocabularyError("duplicate AU ids in vocabulary")

    def __len__(self):
        return len(self.entries)

    def index(self, au: str) -> int:
        try:
            return self.entries.index(au)
        except ValueError:
            raise VocabularyError(f"unknown AU {au!r}") from None

    def channels(self, au: str) -> tuple:
        if au not in self.channel_map or not self.channel_map[au]:
            raise VocabularyError(f"AU {au!r} has no channel mapping")
        return self.channel_map[au]

    def region(self, au: str) -> str:
        return self.face_region.get(au, "")

    def check(self, D: int):
        for au, chans in self.channel_map.items():
            if any(not 0 <= c < D for c in chans):
                raise VocabularyError(f"AU {au!r} maps outside [0, {D})")

    @classmethod
    def from_json(cls, doc: Mapping) -> "AUVocabulary":
        aus = doc["aus"]
        return cls(
            entries=tuple(a["id"] for a in aus),
            face_region={a["id"]: a.get("region", "") for a in aus},
            channel_map={a["id"]: tuple(a["channels"]) for a in aus},
            channel_names=tuple(doc.get("channels", ())),
        )

    @classmethod
    def load(cls, path) -> "AUVocabulary":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def default(cls) -> "AUVocabulary":
        text = resources.files("facediff.resources").joinpath("au_map.json").read_text()
        return cls.from_json(json.loads(text))


def load_labels(path=None) -> dict:
    """Style and emotion name -> id tables."""
    if path is None:
        text = resources.files("facediff.resources").joinpath("labels.json").read_text()
        return json.loads(text)
    with open(path) as fh:
        return json.load(fh)


# ------------------------------------------------------------------- masks
def build_fine_grid(fc: FineCondition, vocab: AUVocabulary, T: int) -> np.ndarray:
    """``T x |vocab|`` multi-hot grid; union over overlapping triplets."""
    fc.check_range(T)
    grid = np.zeros((T, len(vocab)))
    for trip in fc.triplets:
        for au in trip.aus:
            grid[trip.start:trip.end, vocab.index(au)] = 1.0
    return grid


def build_ctrl_mask(fc: FineCondition, vocab: AUVocabulary, T: int, D: int) -> np.ndarray:
    """Spatiotemporal ``T x D`` mask of channels driven by an active AU."""
    fc.check_range(T)
    mask = np.zeros((T, D))
    for trip in fc.triplets:
        for au in trip.aus:
            chans = vocab.channels(au)
            if any(not 0 <= c < D for c in chans):
                raise VocabularyError(f"AU {au!r} maps outside [0, {D})")
            mask[trip.start:trip.end, list(chans)] = 1.0
    return mask


def build_cfg_mask(fc: FineCondition, T: int) -> np.ndarray:
    """Temporal ``T x 1`` mask marking frames covered by any triplet."""
    fc.check_range(T)
    mask = np.zeros((T, 1))
    for trip in fc.triplets:
        mask[trip.start:trip.end] = 1.0
    return mask


def build_align_mask(T: int, half_width: int = 1) -> np.ndarray:
    """Banded additive mask: 0 where ``|i - j| <= half_width``, else :data:`MASK_NEG`."""
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    idx = np.arange(T)
    band = np.abs(idx[:, None] - idx[None, :]) <= half_width
    return np.where(band, 0.0, MASK_NEG)


def fine_grids(fcs: Sequence[FineCondition], vocab: AUVocabulary, T: int) -> np.ndarray:
    return np.stack([build_fine_grid(fc, vocab, T) for fc in fcs])
