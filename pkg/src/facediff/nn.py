"""Parameters, modules and the conditioning layers used by the denoiser.

Layers operate on ``(..., T, d)`` tensors. The three conditioning layers are

* :class:`MultiHeadAttention` (cross attention with an additive mask),
* :class:`FiLM`: ``(1 + gamma(c)) * x + delta(c)``, identity at init,
* :class:`AdaLN`: adaLN-Zero gated residual, identity at init.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MASK_NEG = -1e9
"""Finite stand-in for -inf in additive attention masks."""


class Parameter(Tensor):
    """A named leaf tensor. ``trainable=False`` freezes it."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=ag.get_dtype()), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    """Minimal container that discovers parameters from attributes."""

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._children():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                val.name = path
                yield path, val
            else:
                yield from val.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.trainable = flag

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self.parameters() if p.trainable or not trainable_only)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            value = np.asarray(value, dtype=ag.get_dtype())
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``(d_in, d_out)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True, zero: bool = False):
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = _normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class ZeroProj(Linear):
    """Zero-initialized projection; outputs exactly 0 until trained."""

    def __init__(self, d_in: int, d_out: int | None = None):
        super().__init__(d_in, d_out or d_in, zero=True)


class FeedForward(Module):
    def __init__(self, d: int, rng: np.random.Generator, mult: int = 4):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def forward(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    nd = x.ndim
    return x.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, hd = x.shape
    nd = x.ndim
    x = x.transpose(*range(nd - 3), nd - 2, nd - 3, nd - 1)
    return x.reshape(*lead, t, h * hd)


def attention(q, k, v, mask=None, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q`` is ``(..., T, d)``, ``k``/``v`` are ``(..., S, d)``; ``mask`` is an
    additive ``(T, S)`` array of 0 / :data:`MASK_NEG` entries.
    """
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[-1]
    if d % n_heads:
        raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = ag.matmul(qh, kh.transpose(*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2))
    scores = scores * float(1.0 / np.sqrt(d // n_heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (q.shape[-2], k.shape[-2]):
            raise ValueError(f"mask shape {mask.shape} != {(q.shape[-2], k.shape[-2])}")
        scores = scores + mask
    weights = ag.softmax(scores, axis=-1)
    return _merge_heads(ag.matmul(weights, vh))


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, d_kv: int | None = None):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        d_kv = d_kv or d_model
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        # a key bias only shifts every score of a row equally; softmax ignores it
        self.k = Linear(d_kv, d_model, rng, bias=False)
        self.v = Linear(d_kv, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def forward(self, x, context=None, mask=None) -> Tensor:
        context = x if context is None else context
        out = attention(self.q(x), self.k(context), self.v(context), mask, self.n_heads)
        return self.o(out)


def _match_rank(cond: Tensor, x: Tensor) -> Tensor:
    # a pooled (B, d_c) condition broadcasts over the time axis
    if cond.ndim == x.ndim - 1 and cond.ndim >= 2:
        cond = cond.reshape(cond.shape[0], 1, cond.shape[-1])
    return cond


class FiLM(Module):
    """Feature-wise modulation ``(1 + gamma(c)) * x + delta(c)``.

    Both maps start at zero so the layer is an exact identity at init.
    """

    def __init__(self, d: int, d_cond: int):
        self.gamma = Linear(d_cond, d, zero=True)
        self.delta = Linear(d_cond, d, zero=True)

    def forward(self, x, cond) -> Tensor:
        x, cond = ag.as_tensor(x), _match_rank(ag.as_tensor(cond), ag.as_tensor(x))
        return x * (self.gamma(cond) + 1.0) + self.delta(cond)


def modulate(x, shift, scale) -> Tensor:
    return x * (scale + 1.0) + shift


class AdaLN(Module):
    """adaLN-Zero wrapper ``x + g(c) * sub(modulate(LN(x); s(c), b(c)))``.

    The modulation map (SiLU then linear) is zero-initialized, so the gate is
    zero and the block returns ``x`` unchanged at init.
    """

    def __init__(self, d: int, d_cond: int):
        self.d = d
        self.modulation = Linear(d_cond, 3 * d, zero=True)

    def params(self, cond):
        mod = self.modulation(ag.silu(cond))
        d = self.d
        return mod[..., :d], mod[..., d:2 * d], mod[..., 2 * d:]

    def forward(self, x, cond, sublayer: Callable[[Tensor], Tensor]) -> Tensor:
        x = ag.as_tensor(x)
        cond = _match_rank(ag.as_tensor(cond), x)
        shift, scale, gate = self.params(cond)
        h = modulate(ag.layer_norm(x), shift, scale)
        return x + gate * sublayer(h)


def sinusoidal_embedding(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Closed-form sin/cos table, ``(len(positions), dim)``: first half sin, second cos."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
