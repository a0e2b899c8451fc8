"""Coarse-condition encoder and the stochastic condition transforms used in training."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .nn import Linear, Module, Parameter
from .types import CoarseCondition, FineCondition, Triplet

INTENSITY_LEVELS = 3


def normalize_intensity(level: float, max_level: int = INTENSITY_LEVELS) -> float:
    """Raw intensity level ``0..max_level`` mapped to ``[0, 1]``."""
    return float(level) / max_level


@dataclass(frozen=True)
class CoarseBatch:
    """Batched coarse conditions: ``(B,)`` arrays of ids and intensities."""

    style_ids: np.ndarray
    emotion_ids: np.ndarray
    intensity: np.ndarray

    @classmethod
    def from_conditions(cls, conds: Sequence[CoarseCondition]) -> "CoarseBatch":
        return cls(np.array([c.style_id for c in conds], dtype=np.int64),
                   np.array([c.emotion_id for c in conds], dtype=np.int64),
                   np.array([c.intensity for c in conds], dtype=np.float64))

    def __len__(self):
        return len(self.style_ids)

    def take(self, idx) -> "CoarseBatch":
        return CoarseBatch(self.style_ids[idx], self.emotion_ids[idx], self.intensity[idx])

    def tile(self, reps: int) -> "CoarseBatch":
        return CoarseBatch(np.tile(self.style_ids, reps), np.tile(self.emotion_ids, reps),
                           np.tile(self.intensity, reps))


class CoarseEncoder(Module):
    """Style / emotion lookup tables plus a learned intensity vector, fused linearly.

    Stands in for frozen text/image encoders: anything producing a ``d_s`` or
    ``d_e`` vector per id can replace the tables.
    """

    def __init__(self, n_styles: int, n_emotions: int, d_cond: int, rng: np.random.Generator,
                 d_style: int = 16, d_emotion: int = 16, d_intensity: int = 16):
        self.n_styles, self.n_emotions = n_styles, n_emotions
        self.style_table = Parameter(rng.normal(0, 1.0, (n_styles, d_style)))
        self.emotion_table = Parameter(rng.normal(0, 1.0, (n_emotions, d_emotion)))
        self.intensity_vector = Parameter(rng.normal(0, 1.0, (1, d_intensity)))
        self.fuse = Linear(d_style + d_emotion + d_intensity, d_cond, rng)

    def _check(self, style_ids, emotion_ids):
        style_ids, emotion_ids = np.asarray(style_ids), np.asarray(emotion_ids)
        if np.any((style_ids < 0) | (style_ids >= self.n_styles)):
            raise IndexError(f"style id out of range [0, {self.n_styles})")
        if np.any((emotion_ids < 0) | (emotion_ids >= self.n_emotions)):
            raise IndexError(f"emotion id out of range [0, {self.n_emotions})")

    def features(self, coarse: CoarseBatch) -> ag.Tensor:
        """Concatenated ``[style, emotion, intensity * v]`` before fusion."""
        self._check(coarse.style_ids, coarse.emotion_ids)
        style = ag.take_rows(self.style_table, coarse.style_ids)
        emo = ag.take_rows(self.emotion_table, coarse.emotion_ids)
        inten = ag.mul(self.intensity_vector, np.asarray(coarse.intensity, dtype=np.float64)[:, None])
        return ag.concat([style, emo, inten], axis=-1)

    def forward(self, coarse: CoarseBatch) -> ag.Tensor:
        return self.fuse(self.features(coarse))


def encode_coarse(enc: CoarseEncoder, c: CoarseCondition) -> np.ndarray:
    """Fused ``1 x d_cond`` coarse feature for a single condition."""
    with ag.no_grad():
        return enc(CoarseBatch.from_conditions([c])).data.copy()


@dataclass(frozen=True)
class DropoutPolicy:
    """Independent null-replacement probabilities for classifier-free guidance."""

    p_audio: float = 0.2
    p_coarse: float = 0.2

    def __post_init__(self):
        for p in (self.p_audio, self.p_coarse):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")


def apply_dropout(cond, policy: DropoutPolicy, rng: np.random.Generator):
    """Replace audio and coarse by their null embeddings, independently per element."""
    B = cond.batch_size
    drop_audio = rng.random(B) < policy.p_audio
    drop_coarse = rng.random(B) < policy.p_coarse
    return replace(cond,
                   audio_keep=cond.keep("audio") & ~drop_audio,
                   coarse_keep=cond.keep("coarse") & ~drop_coarse)


def swap_emotion(c: CoarseCondition, n_emotions: int, rng: np.random.Generator) -> CoarseCondition:
    """Resample the emotion uniformly from the other labels."""
    if n_emotions < 2:
        raise ValueError("swapping needs at least two emotion labels")
    others = [e for e in range(n_emotions) if e != c.emotion_id]
    return CoarseCondition(c.style_id, others[int(rng.integers(len(others)))], c.intensity)


def swap_emotion_ids(emotion_ids: np.ndarray, n_emotions: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`swap_emotion`: shift each id by a uniform nonzero offset."""
    if n_emotions < 2:
        raise ValueError("swapping needs at least two emotion labels")
    offset = rng.integers(1, n_emotions, size=len(emotion_ids))
    return (np.asarray(emotion_ids) + offset) % n_emotions


def sparsify_fine(fc: FineCondition, rng: np.random.Generator, p_triplet: float = 0.8,
                  p_au: float = 0.3) -> FineCondition:
    """Drop whole triplets with ``p_triplet``, then single AUs with ``p_au``.

    Triplets left without AUs are removed. Intervals are never changed.
    """
    if not (0.0 <= p_triplet <= 1.0 and 0.0 <= p_au <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    kept = []
    for trip in fc.triplets:
        if rng.random() < p_triplet:
            continue
        aus = frozenset(au for au in sorted(trip.aus) if not rng.random() < p_au)
        if aus:
            kept.append(Triplet(aus, trip.start, trip.end))
    return FineCondition(tuple(kept))
