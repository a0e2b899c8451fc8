"""End-to-end helpers shared by the command line, demos and acceptance tests."""
from __future__ import annotations

import zlib
from dataclasses import replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .conditioning import CoarseBatch, swap_emotion_ids
from .data import BinarizeConfig, Dataset, binarize
from .denoiser import ConditionBundle, Generator, ModelConfig, insert_adapter
from .diffusion import GuidanceConfig, NoiseSchedule, sample
from .training import TrainConfig, TrainingData, train
from .types import AUVocabulary, FineCondition, build_cfg_mask, fine_grids

DTYPES = {"fp64": np.float64, "float64": np.float64, "fp32": np.float32, "float32": np.float32}


def substream(seed: int, name: str) -> int:
    """Independent named seed derived from a master seed (e.g. "data", "train", "sample")."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def model_config_for(ds: Dataset, vocab: AUVocabulary, **overrides) -> ModelConfig:
    spec = ds.spec
    base = dict(d_motion=spec.D, d_audio=spec.n_phonemes, n_vocab=len(vocab), n_styles=spec.n_styles,
                n_emotions=spec.n_emotions)
    base.update(overrides)
    return ModelConfig(**base)


def check_compatible(cfg: ModelConfig, ds: Dataset, vocab: AUVocabulary):
    spec = ds.spec
    want = {"d_motion": spec.D, "d_audio": spec.n_phonemes, "n_vocab": len(vocab),
            "n_styles": spec.n_styles, "n_emotions": spec.n_emotions}
    bad = {k: (getattr(cfg, k), v) for k, v in want.items() if getattr(cfg, k) != v}
    if bad:
        raise ValueError(f"checkpoint does not match dataset (model, data): {bad}")


def train_config(profile: dict, stage: int, **overrides) -> TrainConfig:
    """TrainConfig from a profile's ``stage1`` / ``stage2`` section plus overrides."""
    fields = dict(profile[f"stage{stage}"])
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(stage=stage, **fields)


def stage2_data(data: TrainingData, vocab: AUVocabulary, source: str = "events",
                cfg: BinarizeConfig | None = None) -> TrainingData:
    """Attach the fine conditions stage 2 trains on: ground-truth events or binarized motion."""
    if source == "events":
        return data
    if source != "binarized":
        raise ValueError("fine source must be 'events' or 'binarized'")
    cfg = cfg or BinarizeConfig()
    fines = [binarize(m, vocab, cfg, np.random.default_rng([cfg.seed, i])) for i, m in enumerate(data.motion)]
    return replace(data, fine=fines)


def train_stage1(ds: Dataset, vocab: AUVocabulary, cfg: TrainConfig, model_overrides: dict | None = None,
                 indices: Sequence[int] | None = None, **kw) -> tuple[Generator, list]:
    gen = Generator(model_config_for(ds, vocab, **(model_overrides or {})))
    data = ds.training_data(indices if indices is not None else ds.split()[0])
    sched = NoiseSchedule.cosine(gen.cfg.steps)
    return gen, train(gen, data, cfg, sched, **kw)


def clone(gen: Generator) -> Generator:
    out = Generator(gen.cfg)
    if gen.adapter is not None:
        insert_adapter(out)
    out.load_state_dict(gen.state_dict())
    for p, q in zip(out.parameters(), gen.parameters()):
        p.trainable = q.trainable
    return out


def train_stage2(base: Generator, ds: Dataset, vocab: AUVocabulary, cfg: TrainConfig,
                 indices: Sequence[int] | None = None, fine_source: str = "events",
                 **kw) -> tuple[Generator, list]:
    """Copy the base model, attach a fresh adapter and train only the adapter."""
    gen = clone(base)
    if gen.adapter is None:
        insert_adapter(gen)
    data = stage2_data(ds.training_data(indices if indices is not None else ds.split()[0]), vocab, fine_source)
    sched = NoiseSchedule.cosine(gen.cfg.steps)
    return gen, train(gen, data, cfg, sched, vocab=vocab, **kw)


def bundle_for(data: TrainingData, coarse: CoarseBatch | None = None, fines: Sequence[FineCondition] | None = None,
               vocab: AUVocabulary | None = None) -> ConditionBundle:
    B, T = data.motion.shape[:2]
    fine = fine_grids(fines, vocab, T) if fines is not None else None
    keep = np.array([not fc.empty for fc in fines]) if fines is not None else None
    return ConditionBundle(B, audio=data.audio, coarse=coarse or data.coarse, fine=fine, fine_keep=keep)


def cfg_masks(fines: Sequence[FineCondition], T: int) -> np.ndarray:
    return np.stack([build_cfg_mask(fc, T) for fc in fines])


def conflict_conditions(data: TrainingData, n_emotions: int, seed: int) -> CoarseBatch:
    """The clips' coarse conditions with every emotion label swapped to a different one."""
    rng = np.random.default_rng(seed)
    return CoarseBatch(data.coarse.style_ids, swap_emotion_ids(data.coarse.emotion_ids, n_emotions, rng),
                       data.coarse.intensity)


def generate(gen: Generator, cond: ConditionBundle, guidance: GuidanceConfig, seed: int,
             n_steps: int | None = None, batch_size: int = 64) -> np.ndarray:
    """Guided samples; element ``i`` of chunk ``c`` draws from ``(seed, c)`` so results do not depend on threads."""
    sched = NoiseSchedule.cosine(gen.cfg.steps)
    outs = []
    for c, lo in enumerate(range(0, cond.size, batch_size)):
        idx = np.arange(lo, min(lo + batch_size, cond.size))
        part = _take_bundle(cond, idx)
        g = guidance
        if g.cfg_mask is not None and np.ndim(g.cfg_mask) == 3:
            g = replace(g, cfg_mask=np.asarray(g.cfg_mask)[idx])
        outs.append(sample(gen, sched, part, g, np.random.default_rng([seed, c]), n_steps=n_steps))
    return np.concatenate(outs) if outs else np.zeros((0,))


def _take_bundle(cond: ConditionBundle, idx: np.ndarray) -> ConditionBundle:
    def pick(a):
        return None if a is None else np.asarray(a)[idx]
    return ConditionBundle(len(idx), audio=pick(cond.audio),
                           coarse=None if cond.coarse is None else cond.coarse.take(idx),
                           fine=pick(cond.fine), audio_keep=pick(cond.audio_keep),
                           coarse_keep=pick(cond.coarse_keep), fine_keep=pick(cond.fine_keep))


def set_dtype(name: str):
    if name not in DTYPES:
        raise ValueError(f"unknown dtype {name!r}; choose from {sorted(DTYPES)}")
    ag.set_dtype(DTYPES[name])
