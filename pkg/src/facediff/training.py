"""Two-stage training: base model (stage 1) and fine-grained adapter (stage 2).

Every iteration draws from its own generator seeded with
``(seed, stage, iteration)``. A run resumed from a checkpoint therefore
replays exactly the same batches, timesteps and noise as an unbroken one.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import (CoarseBatch, DropoutPolicy, apply_dropout, sparsify_fine,
                           swap_emotion_ids)
from .denoiser import ConditionBundle, Generator, ModelConfig, insert_adapter
from .diffusion import NoiseSchedule, forward_noise, simple_loss, swap_loss
from .nn import Parameter
from .types import AUVocabulary, FineCondition, build_ctrl_mask, fine_grids

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer
def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                 lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One AdamW step (decoupled decay, bias-corrected moments). Returns new ``(param, m, v)``."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    param = param * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            new, m, v = adamw_update(p.data, g, self.m[id(p)], self.v[id(p)], self.step_count,
                                     self.lr, self.betas, self.eps, self.weight_decay)
            p.data = new.astype(p.data.dtype, copy=False)
            self.m[id(p)], self.v[id(p)] = m, v

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], dtype=np.float64)}
        for p in self.params:
            state[f"m/{p.name}"] = self.m[id(p)]
            state[f"v/{p.name}"] = self.v[id(p)]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.step_count = int(state["step"][0])
        for p in self.params:
            self.m[id(p)] = state[f"m/{p.name}"].astype(p.data.dtype)
            self.v[id(p)] = state[f"v/{p.name}"].astype(p.data.dtype)


# -------------------------------------------------------------------- data
@dataclass
class Batch:
    motion: np.ndarray
    audio: np.ndarray
    coarse: CoarseBatch
    fine: list | None = None

    def __len__(self):
        return len(self.motion)


@dataclass
class TrainingData:
    """Stacked clip arrays; ``fine`` holds one FineCondition per clip (stage 2)."""

    motion: np.ndarray
    audio: np.ndarray
    coarse: CoarseBatch
    fine: list | None = None

    def __len__(self):
        return len(self.motion)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        fine = None if self.fine is None else [self.fine[i] for i in idx]
        return Batch(self.motion[idx], self.audio[idx], self.coarse.take(idx), fine)

    def subset(self, idx) -> "TrainingData":
        b = self.batch(idx)
        return TrainingData(b.motion, b.audio, b.coarse, b.fine)


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-4
    batch_size: int = 16
    iterations: int = 1000
    p_swap: float = 0.5
    seed: int = 0
    weight_decay: float = 0.01
    p_audio: float = 0.2
    p_coarse: float = 0.2
    p_triplet: float = 0.8
    p_au: float = 0.3
    lr_schedule: str = "constant"
    warmup: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not 0.0 <= self.p_swap <= 1.0:
            raise ValueError("p_swap must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    def lr_at(self, it: int) -> float:
        """Learning rate of iteration ``it``: linear warmup, then constant or cosine decay to 0."""
        if it < self.warmup:
            return self.lr * (it + 1) / self.warmup
        if self.lr_schedule == "constant":
            return self.lr
        span = max(1, self.iterations - self.warmup)
        return 0.5 * self.lr * (1 + np.cos(np.pi * (it - self.warmup) / span))

    @property
    def policy(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_audio, self.p_coarse)


@dataclass
class TrainStepRecord:
    iteration: int
    loss: float
    branch: str
    wall_time: float
    support: float = 0.0  # supervised entries per clip; loss / support is the per-entry error

    def to_json(self) -> dict:
        return asdict(self)


def _finite(loss: ag.Tensor, it: int, branch: str):
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite {branch} loss at iteration {it}")


def stage1_step(batch: Batch, gen: Generator, schedule: NoiseSchedule, policy: DropoutPolicy,
                optimizer: AdamW, rng: np.random.Generator, iteration: int = 0) -> TrainStepRecord:
    """Denoise a random step of every clip with audio/coarse dropout; simple loss."""
    if gen.adapter is not None:
        raise TrainingError("stage 1 expects a generator without adapter")
    t0 = time.perf_counter()
    B = len(batch)
    tau = rng.integers(1, schedule.steps + 1, size=B)
    noisy = forward_noise(batch.motion, tau, schedule, rng)
    cond = apply_dropout(ConditionBundle(B, audio=batch.audio, coarse=batch.coarse), policy, rng)
    optimizer.zero_grad()
    loss = simple_loss(gen(noisy, tau, cond), batch.motion)
    _finite(loss, iteration, "simple")
    loss.backward()
    optimizer.step()
    return TrainStepRecord(iteration, float(loss.data), "simple", time.perf_counter() - t0,
                           float(np.prod(batch.motion.shape[1:])))


def stage2_step(batch: Batch, gen: Generator, schedule: NoiseSchedule, optimizer: AdamW,
                rng: np.random.Generator, p_swap: float, vocab: AUVocabulary,
                policy: DropoutPolicy | None = None, p_triplet: float = 0.8, p_au: float = 0.3,
                iteration: int = 0) -> TrainStepRecord:
    """Adapter update on sparsified fine conditions.

    With probability ``p_swap`` the emotion labels are swapped and the loss is
    restricted to the channels driven by the surviving AUs; otherwise the
    original labels are kept and the simple loss is used.
    """
    if gen.adapter is None:
        raise TrainingError("stage 2 needs an adapter (insert_adapter)")
    if batch.fine is None:
        raise TrainingError("stage 2 batches need fine conditions")
    t0 = time.perf_counter()
    B, T, D = batch.motion.shape
    fine = [sparsify_fine(fc, rng, p_triplet, p_au) for fc in batch.fine]
    grid = fine_grids(fine, vocab, T)
    keep = np.array([not fc.empty for fc in fine])
    swap = rng.random() < p_swap
    tau = rng.integers(1, schedule.steps + 1, size=B)
    noisy = forward_noise(batch.motion, tau, schedule, rng)
    optimizer.zero_grad()
    if swap:
        n_emo = gen.cfg.n_emotions
        coarse = CoarseBatch(batch.coarse.style_ids,
                             swap_emotion_ids(batch.coarse.emotion_ids, n_emo, rng),
                             batch.coarse.intensity)
        cond = ConditionBundle(B, audio=batch.audio, coarse=coarse, fine=grid, fine_keep=keep)
        ctrl = np.stack([build_ctrl_mask(fc, vocab, T, D) for fc in fine])
        loss = swap_loss(gen(noisy, tau, cond), batch.motion, ctrl)
        support = float(ctrl.sum()) / B
    else:
        cond = ConditionBundle(B, audio=batch.audio, coarse=batch.coarse, fine=grid, fine_keep=keep)
        if policy is not None:
            cond = apply_dropout(cond, policy, rng)
        loss = simple_loss(gen(noisy, tau, cond), batch.motion)
        support = float(T * D)
    branch = "swap" if swap else "simple"
    _finite(loss, iteration, branch)
    if loss.requires_grad:
        loss.backward()
    optimizer.step()
    return TrainStepRecord(iteration, float(loss.data), branch, time.perf_counter() - t0, support)


def iteration_rng(seed: int, stage: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, iteration])


def make_optimizer(gen: Generator, cfg: TrainConfig) -> AdamW:
    params = gen.base_parameters() if cfg.stage == 1 else gen.adapter_parameters()
    return AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(gen: Generator, data: TrainingData, cfg: TrainConfig, schedule: NoiseSchedule,
          vocab: AUVocabulary | None = None, optimizer: AdamW | None = None, start: int = 0,
          log_path: str | os.PathLike | None = None, ckpt_dir: str | os.PathLike | None = None,
          callback: Callable[[TrainStepRecord], None] | None = None) -> list[TrainStepRecord]:
    """Run iterations ``start .. cfg.iterations - 1``; returns their records."""
    if cfg.stage == 2 and gen.adapter is None:
        raise TrainingError("stage 2 needs an adapter (insert_adapter)")
    if cfg.stage == 2 and vocab is None:
        raise TrainingError("stage 2 needs the AU vocabulary")
    optimizer = optimizer or make_optimizer(gen, cfg)
    records = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for it in range(start, cfg.iterations):
            rng = iteration_rng(cfg.seed, cfg.stage, it)
            optimizer.lr = cfg.lr_at(it)
            batch = data.batch(rng.integers(0, len(data), size=cfg.batch_size))
            if cfg.stage == 1:
                rec = stage1_step(batch, gen, schedule, cfg.policy, optimizer, rng, it)
            else:
                rec = stage2_step(batch, gen, schedule, optimizer, rng, cfg.p_swap, vocab,
                                  cfg.policy, cfg.p_triplet, cfg.p_au, it)
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec.to_json()) + "\n")
            if cfg.log_every and (it + 1) % cfg.log_every == 0:
                recent = [r.loss for r in records[-cfg.log_every:]]
                log.info("stage %d it %d loss %.4f", cfg.stage, it + 1, float(np.mean(recent)))
            if callback:
                callback(rec)
            if ckpt_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_training_state(ckpt_dir, gen, optimizer, it + 1, tag=f"it{it + 1:07d}")
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_dir:
        save_training_state(ckpt_dir, gen, optimizer, cfg.iterations)
    return records


# ------------------------------------------------------------ checkpoints
def save_training_state(ckpt_dir, gen: Generator, optimizer: AdamW | None, iteration: int,
                        tag: str | None = None):
    """Write ``model.json``, ``weights.ckpt``, ``optimizer.ckpt`` and ``state.json``."""
    d = Path(ckpt_dir)
    if tag:
        d = d / tag
    d.mkdir(parents=True, exist_ok=True)
    gen.cfg.save(d / "model.json")
    save_checkpoint(d / "weights.ckpt", gen.state_dict())
    if optimizer is not None:
        save_checkpoint(d / "optimizer.ckpt", optimizer.state_dict())
    with open(d / "state.json", "w") as fh:
        json.dump({"iteration": iteration, "has_adapter": gen.adapter is not None}, fh)


def load_generator(ckpt_dir) -> Generator:
    d = Path(ckpt_dir)
    gen = Generator(ModelConfig.load(d / "model.json"))
    state = load_checkpoint(d / "weights.ckpt")
    if any(k.startswith("adapter.") for k in state):
        insert_adapter(gen)
        gen.set_trainable(False)
        for p in gen.adapter_parameters():
            p.trainable = True
    gen.load_state_dict(state)
    return gen


def load_training_state(ckpt_dir, cfg: TrainConfig):
    """Generator, optimizer and the next iteration index of a saved run."""
    d = Path(ckpt_dir)
    gen = load_generator(d)
    opt = make_optimizer(gen, cfg)
    if (d / "optimizer.ckpt").exists():
        opt.load_state_dict(load_checkpoint(d / "optimizer.ckpt"))
    with open(d / "state.json") as fh:
        start = json.load(fh)["iteration"]
    return gen, opt, start


def validation_loss(gen: Generator, data: TrainingData, schedule: NoiseSchedule, seed: int = 1234,
                    repeats: int = 4, batch_size: int = 64) -> float:
    """Mean simple loss over fixed (step, noise) draws on every clip, full conditions."""
    rng = np.random.default_rng(seed)
    losses = []
    with ag.no_grad():
        for _ in range(repeats):
            for lo in range(0, len(data), batch_size):
                b = data.batch(np.arange(lo, min(lo + batch_size, len(data))))
                tau = rng.integers(1, schedule.steps + 1, size=len(b))
                noisy = forward_noise(b.motion, tau, schedule, rng)
                cond = ConditionBundle(len(b), audio=b.audio, coarse=b.coarse)
                pred = gen(noisy, tau, cond).data
                losses.append(((pred - b.motion) ** 2).sum(axis=(1, 2)))
    return float(np.mean(np.concatenate(losses)))
