"""Diffusion-transformer generator that predicts clean motion from noisy motion.

Block layout (``n_blocks`` times)::

    h <- adaLN-Zero(self-attention; coarse + timestep)
    h <- h + FiLM(cross-attention(h -> audio, banded mask); audio)
    h <- h + FiLM(self-attention(h); audio)
    h <- h + adapter(h, fine)               # stage 2 only, tap "after_film_sa"
    h <- adaLN-Zero(feed-forward; coarse + timestep)

Null conditions use learned embeddings. A condition is null when its field
is ``None`` or its per-element ``*_keep`` flag is False.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .conditioning import CoarseBatch, CoarseEncoder
from .nn import (AdaLN, FeedForward, FiLM, Linear, Module, MultiHeadAttention, Parameter,
                 ZeroProj, sinusoidal_embedding)
from .types import build_align_mask

ADAPTER_TAPS = ("after_film_sa", "block_output")


@dataclass
class ModelConfig:
    d_motion: int = 51
    d_audio: int = 12
    n_vocab: int = 16
    n_styles: int = 4
    n_emotions: int = 5
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_cond: int = 64
    ff_mult: int = 4
    align_half_width: int = 1
    steps: int = 100
    adapter_tap: str = "after_film_sa"
    profile: str = "desk"
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.adapter_tap not in ADAPTER_TAPS:
            raise ValueError(f"adapter_tap must be one of {ADAPTER_TAPS}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class ConditionBundle:
    """Batched conditions for one generator call.

    ``audio`` is ``(B, T, d_audio)``, ``fine`` is the ``(B, T, |vocab|)`` multi-hot
    grid, ``coarse`` holds ids and intensities.
    """

    size: int
    audio: np.ndarray | None = None
    coarse: CoarseBatch | None = None
    fine: np.ndarray | None = None
    audio_keep: np.ndarray | None = None
    coarse_keep: np.ndarray | None = None
    fine_keep: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        return self.size

    def keep(self, name: str) -> np.ndarray:
        if getattr(self, name) is None:
            return np.zeros(self.size, dtype=bool)
        flags = getattr(self, f"{name}_keep")
        return np.ones(self.size, dtype=bool) if flags is None else np.asarray(flags, dtype=bool)

    def without(self, *names: str) -> "ConditionBundle":
        """Same bundle with the named modalities nulled for every element."""
        return replace(self, **{f"{n}_keep": np.zeros(self.size, dtype=bool) for n in names})


def concat_bundles(bundles: Sequence[ConditionBundle]) -> ConditionBundle:
    """Stack bundles along the batch axis, filling absent fields with nulls."""
    size = sum(b.size for b in bundles)
    out = {"size": size}
    for name in ("audio", "fine"):
        present = [getattr(b, name) for b in bundles if getattr(b, name) is not None]
        if not present:
            continue
        tmpl = present[0]
        arrs = [getattr(b, name) if getattr(b, name) is not None
                else np.zeros((b.size,) + tmpl.shape[1:]) for b in bundles]
        out[name] = np.concatenate(arrs)
        out[f"{name}_keep"] = np.concatenate([b.keep(name) for b in bundles])
    if any(b.coarse is not None for b in bundles):
        parts = [b.coarse if b.coarse is not None else
                 CoarseBatch(np.zeros(b.size, np.int64), np.zeros(b.size, np.int64), np.zeros(b.size))
                 for b in bundles]
        out["coarse"] = CoarseBatch(np.concatenate([p.style_ids for p in parts]),
                                    np.concatenate([p.emotion_ids for p in parts]),
                                    np.concatenate([p.intensity for p in parts]))
        out["coarse_keep"] = np.concatenate([b.keep("coarse") for b in bundles])
    return ConditionBundle(**out)


def _select(value: ag.Tensor, null: ag.Tensor, keep: np.ndarray) -> ag.Tensor:
    k = keep.astype(np.float64).reshape((-1,) + (1,) * (value.ndim - 1))
    if k.all():
        return value
    return value * k + null * (1.0 - k)


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, h = cfg.d_model, cfg.n_heads
        self.coarse_attn = MultiHeadAttention(d, h, rng)
        self.coarse_mod = AdaLN(d, d)
        self.audio_attn = MultiHeadAttention(d, h, rng)
        self.audio_film = FiLM(d, d)
        self.self_attn = MultiHeadAttention(d, h, rng)
        self.self_film = FiLM(d, d)
        self.ff = FeedForward(d, rng, cfg.ff_mult)
        self.ff_mod = AdaLN(d, d)

    def forward(self, h, c, a, align, adapter=None, f=None, tap="after_film_sa"):
        h = self.coarse_mod(h, c, self.coarse_attn)
        h = h + self.audio_film(self.audio_attn(ag.layer_norm(h), a, align), a)
        h = h + self.self_film(self.self_attn(ag.layer_norm(h)), a)
        if adapter is not None and tap == "after_film_sa":
            h = h + adapter(h, f)
        h = self.ff_mod(h, c, self.ff)
        if adapter is not None and tap == "block_output":
            h = h + adapter(h, f)
        return h


class AdapterBlock(Module):
    """FiLM self-attention over the fine embedding followed by a zero projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.attn = MultiHeadAttention(d, cfg.n_heads, rng)
        self.film = FiLM(d, d)
        self.zero_proj = ZeroProj(d)

    def forward(self, h, f):
        z = ag.layer_norm(h) + f
        return self.zero_proj(self.film(self.attn(z), f))


class Adapter(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.fine_proj = Linear(cfg.n_vocab, d, rng)
        self.null_fine = Parameter(rng.normal(0, 0.02, (1, 1, d)))
        self.blocks = [AdapterBlock(cfg, rng) for _ in range(cfg.n_blocks)]

    def embed(self, cond: ConditionBundle, B: int, T: int, pos: np.ndarray) -> ag.Tensor:
        null = ag.broadcast_to(self.null_fine, (B, T, self.null_fine.shape[-1]))
        if cond.fine is None:
            return null
        return _select(self.fine_proj(cond.fine) + pos, null, cond.keep("fine"))


class Generator(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.in_proj = Linear(cfg.d_motion, d, rng)
        self.time_fc1 = Linear(d, d, rng)
        self.time_fc2 = Linear(d, d, rng)
        self.coarse_encoder = CoarseEncoder(cfg.n_styles, cfg.n_emotions, cfg.d_cond, rng)
        self.null_coarse = Parameter(rng.normal(0, 0.02, (1, cfg.d_cond)))
        self.coarse_proj = Linear(cfg.d_cond, d, rng)
        self.audio_proj = Linear(cfg.d_audio, d, rng)
        self.null_audio = Parameter(rng.normal(0, 0.02, (1, 1, d)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_blocks)]
        self.out_proj = Linear(d, cfg.d_motion, rng)
        self.adapter: Adapter | None = None
        self._align_cache: dict = {}

    # ------------------------------------------------------------ helpers
    def _align(self, T: int) -> np.ndarray:
        if T not in self._align_cache:
            self._align_cache[T] = build_align_mask(T, self.cfg.align_half_width)
        return self._align_cache[T]

    def base_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("adapter.")]

    def adapter_parameters(self):
        return [] if self.adapter is None else self.adapter.parameters()

    def encode_timestep(self, tau) -> ag.Tensor:
        """Sinusoidal embedding of ``tau`` through a two-layer SiLU MLP, ``(B, d_model)``."""
        tau = np.atleast_1d(np.asarray(tau))
        if np.any(tau < 1) or np.any(tau > self.cfg.steps):
            raise ValueError(f"diffusion step outside [1, {self.cfg.steps}]")
        emb = sinusoidal_embedding(tau, self.cfg.d_model)
        return self.time_fc2(ag.silu(self.time_fc1(emb)))

    # ------------------------------------------------------------ forward
    def forward(self, noisy, tau, cond: ConditionBundle) -> ag.Tensor:
        noisy = ag.as_tensor(noisy)
        if noisy.ndim != 3 or noisy.shape[-1] != self.cfg.d_motion:
            raise ValueError(f"expected (B, T, {self.cfg.d_motion}) motion, got {noisy.shape}")
        B, T, _ = noisy.shape
        if cond.size != B:
            raise ValueError(f"condition batch {cond.size} != motion batch {B}")
        for name in ("audio", "fine"):
            arr = getattr(cond, name)
            if arr is not None and arr.shape[:2] != (B, T):
                raise ValueError(f"{name} shape {arr.shape} does not match motion (B={B}, T={T})")
        tau = np.broadcast_to(np.asarray(tau), (B,))
        d = self.cfg.d_model
        pos = sinusoidal_embedding(np.arange(T), d)

        h = self.in_proj(noisy) + pos
        c_null = ag.broadcast_to(self.null_coarse, (B, self.cfg.d_cond))
        if cond.coarse is None:
            cf = c_null
        else:
            cf = _select(self.coarse_encoder(cond.coarse), c_null, cond.keep("coarse"))
        c = self.encode_timestep(tau) + self.coarse_proj(cf)

        a_null = ag.broadcast_to(self.null_audio, (B, T, d))
        if cond.audio is None:
            a = a_null
        else:
            a = _select(self.audio_proj(cond.audio) + pos, a_null, cond.keep("audio"))

        f = self.adapter.embed(cond, B, T, pos) if self.adapter is not None else None
        align = self._align(T)
        for i, block in enumerate(self.blocks):
            ad = self.adapter.blocks[i] if self.adapter is not None else None
            h = block(h, c, a, align, ad, f, self.cfg.adapter_tap)
        return self.out_proj(ag.layer_norm(h))


def insert_adapter(gen: Generator, seed: int | None = None) -> Generator:
    """Attach a zero-initialized adapter and freeze every base parameter."""
    if gen.adapter is not None:
        raise ValueError("adapter already present")
    rng = np.random.default_rng(gen.cfg.seed + 1 if seed is None else seed)
    for p in gen.base_parameters():
        p.trainable = False
    gen.adapter = Adapter(gen.cfg, rng)
    return gen


def predict_x0(gen: Generator, noisy: np.ndarray, tau, cond: ConditionBundle) -> np.ndarray:
    """Inference-mode clean-motion estimate; accepts ``(T, D)`` or ``(B, T, D)``."""
    noisy = np.asarray(noisy, dtype=np.float64)
    single = noisy.ndim == 2
    if single:
        noisy = noisy[None]
    with ag.no_grad():
        out = gen(noisy, tau, cond).data
    return out[0] if single else out
