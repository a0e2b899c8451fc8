"""Noise schedule, forward process, losses and the guided reverse sampler.

Losses sum squared error over the ``T x D`` entries of each clip and average
over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .denoiser import ConditionBundle, Generator, predict_x0


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.alpha)

    @classmethod
    def from_alphas(cls, alpha) -> "NoiseSchedule":
        alpha = np.asarray(alpha, dtype=np.float64)
        return cls(alpha, np.cumprod(alpha))

    @classmethod
    def cosine(cls, steps: int = 100, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        """Cosine cumulative schedule; per-step betas are capped at ``max_beta``."""
        t = np.arange(steps + 1) / steps
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, max_beta)
        return cls.from_alphas(1.0 - beta)

    def bar(self, tau) -> np.ndarray:
        """``alpha_bar`` at 1-based steps ``tau``; ``bar(0) == 1``."""
        tau = np.asarray(tau)
        full = np.concatenate([[1.0], self.alpha_bar])
        return full[tau]

    def validate(self):
        if not np.all((self.alpha > 0) & (self.alpha < 1)):
            raise ValueError("alpha must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def _check_tau(tau, schedule: NoiseSchedule):
    if np.any(np.asarray(tau) < 1) or np.any(np.asarray(tau) > schedule.steps):
        raise ValueError(f"diffusion step outside [1, {schedule.steps}]")


def _normal(rng, shape) -> np.ndarray:
    """Standard normal draws; a sequence of generators gives one per batch element."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"{len(rngs)} generators for batch of {shape[0]}")
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


def forward_noise(clean: np.ndarray, tau, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Closed-form ``q(M_tau | M_0)``; ``tau`` may be a scalar or per batch element."""
    _check_tau(tau, schedule)
    clean = np.asarray(clean, dtype=np.float64)
    ab = schedule.bar(tau)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (clean.ndim - 1))
    eps = _normal(rng, clean.shape)
    return np.sqrt(ab) * clean + np.sqrt(1.0 - ab) * eps


def forward_step(prev: np.ndarray, tau: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """One transition ``q(M_tau | M_{tau-1})``."""
    a = schedule.alpha[tau - 1]
    return np.sqrt(a) * prev + np.sqrt(1.0 - a) * _normal(rng, np.shape(prev))


def _reduce(sq: ag.Tensor):
    if sq.ndim <= 2:
        return sq.sum()
    return sq.sum(axis=tuple(range(1, sq.ndim))).mean()


def simple_loss(pred, target):
    """Squared L2 error, summed per clip and averaged over the batch."""
    pred_t = ag.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred_t.shape != target.shape:
        raise ValueError(f"shape mismatch {pred_t.shape} vs {target.shape}")
    loss = _reduce(ag.square(pred_t - target))
    return loss if isinstance(pred, ag.Tensor) else float(loss.data)


def swap_loss(pred, target, ctrl):
    """Squared L2 error restricted to the control mask."""
    pred_t = ag.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    ctrl = np.asarray(ctrl, dtype=np.float64)
    if pred_t.shape != target.shape or np.broadcast_shapes(ctrl.shape, target.shape) != target.shape:
        raise ValueError(f"shape mismatch pred{pred_t.shape} target{target.shape} mask{ctrl.shape}")
    loss = _reduce(ag.square((target - pred_t) * ctrl))
    return loss if isinstance(pred, ag.Tensor) else float(loss.data)


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales and the temporal mask gating the fine-condition term.

    ``cfg_mask`` is ``(T, 1)`` or ``(B, T, 1)``; ``None`` disables the term.
    """

    alpha_scale: float = 2.0
    beta_scale: float = 0.0
    cfg_mask: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.alpha_scale) and np.isfinite(self.beta_scale)):
            raise ValueError("guidance scales must be finite")

    @property
    def fine_active(self) -> bool:
        return self.beta_scale != 0 and self.cfg_mask is not None and bool(np.any(self.cfg_mask))


def masked_cfg(gen: Generator, noisy: np.ndarray, tau, cond: ConditionBundle,
               guidance: GuidanceConfig) -> np.ndarray:
    """``G0 + a (G_ac - G0) + b Z * (G_acf - G0)`` with ``G0`` fully unconditioned."""
    a = guidance.alpha_scale
    need_null = a != 1 or guidance.fine_active
    g_null = predict_x0(gen, noisy, tau, cond.without("audio", "coarse", "fine")) if need_null else None
    if a == 0:
        out = g_null
    else:
        g_ac = predict_x0(gen, noisy, tau, cond.without("fine"))
        # a = 1 returns G_ac itself; g0 + (g_ac - g0) is not bit-exact in floating point
        out = g_ac if a == 1 else g_null + a * (g_ac - g_null)
    if guidance.fine_active:
        g_acf = predict_x0(gen, noisy, tau, cond)
        out = out + guidance.beta_scale * np.asarray(guidance.cfg_mask) * (g_acf - g_null)
    return out


def respaced_steps(total: int, n: int | None = None) -> np.ndarray:
    """Descending diffusion steps used by the sampler; ``n`` evenly spaced values ending at 1."""
    if n is None or n >= total:
        return np.arange(total, 0, -1)
    if n < 1:
        raise ValueError("need at least one sampling step")
    return np.unique(np.round(np.linspace(1, total, n)).astype(int))[::-1]


def sample(gen: Generator, schedule: NoiseSchedule, cond: ConditionBundle, guidance: GuidanceConfig,
           rng, T: int | None = None, n_steps: int | None = None, return_trajectory: bool = False):
    """Reverse process: predict ``M_0`` at each step, re-noise it to the next step.

    ``n_steps`` visits a subset of the trained steps; the re-noising uses the
    cumulative ``alpha_bar`` of the next visited step. Returns the final clean
    estimate, ``(B, T, D)``.
    """
    if T is None:
        src = cond.audio if cond.audio is not None else cond.fine
        if src is None:
            raise ValueError("pass T when the bundle carries no sequence condition")
        T = src.shape[1]
    if gen.cfg.steps != schedule.steps:
        raise ValueError(f"generator trained for {gen.cfg.steps} steps, schedule has {schedule.steps}")
    taus = respaced_steps(schedule.steps, n_steps)
    shape = (cond.size, T, gen.cfg.d_motion)
    x = _normal(rng, shape)
    traj = []
    for i, tau in enumerate(taus):
        x0 = masked_cfg(gen, x, int(tau), cond, guidance)
        if not np.all(np.isfinite(x0)):
            raise SamplingError(f"non-finite prediction at diffusion step {tau}")
        if return_trajectory:
            traj.append(x0)
        if i + 1 < len(taus):
            ab = schedule.bar(taus[i + 1])
            x = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * _normal(rng, shape)
    return (x0, traj) if return_trajectory else x0


def per_element_rngs(seeds: Sequence[int]) -> list:
    return [np.random.default_rng(s) for s in seeds]
