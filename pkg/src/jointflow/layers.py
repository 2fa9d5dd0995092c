"""Transformer building blocks shared by the towers and the text encoder."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .errors import DomainError
from .numerics import layer_norm, matmul, softmax

MASK_VALUE = -1e9


def sinusoidal(positions: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sin/cos features at geometrically spaced frequencies, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = nn.functional.pad(emb, (0, 1))
    return emb.to(torch.float32)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, affine: bool = True):
        super().__init__()
        self.dim = dim
        if affine:
            self.weight = nn.Parameter(torch.ones(dim))
            self.bias = nn.Parameter(torch.zeros(dim))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, axis=-1)


class Attention(nn.Module):
    """Multi-head (self or cross) attention.

    ``head_dim`` defaults to ``dim // heads``; set it explicitly when ``dim`` is
    not divisible by ``heads`` (inner width is then ``heads * head_dim``).
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, head_dim: int | None = None):
        super().__init__()
        if head_dim is None:
            if dim % heads:
                raise ValueError(f"dim {dim} not divisible by heads {heads}")
            head_dim = dim // heads
        kv_dim = kv_dim or dim
        inner = heads * head_dim
        self.heads, self.head_dim = heads, head_dim
        self.q = nn.Linear(dim, inner)
        # no key bias: it shifts every logit of a query equally, so softmax ignores it
        self.k = nn.Linear(kv_dim, inner, bias=False)
        self.v = nn.Linear(kv_dim, inner)
        self.o = nn.Linear(inner, dim)

    def forward(
        self, x: Tensor, context: Tensor | None = None, key_mask: Tensor | None = None, repeat: int = 1
    ) -> Tensor:
        """``repeat`` > 1 shares each context row across that many consecutive
        query groups; keys/values are projected before the repeat."""
        ctx = x if context is None else context
        b, n, _ = x.shape
        m = ctx.shape[1]
        bk = ctx.shape[0]
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(ctx).view(bk, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(ctx).view(bk, m, self.heads, self.head_dim).transpose(1, 2)
        if repeat > 1:
            k = k.repeat_interleave(repeat, dim=0)
            v = v.repeat_interleave(repeat, dim=0)
            if key_mask is not None:
                key_mask = key_mask.repeat_interleave(repeat, dim=0)
        scores = matmul(q * (1.0 / math.sqrt(self.head_dim)), k.transpose(-1, -2))
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], MASK_VALUE)
        out = matmul(softmax(scores, axis=-1), v)
        return self.o(out.transpose(1, 2).reshape(b, n, self.heads * self.head_dim))


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t in [0, 1] followed by a 2-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64, time_scale: float = 1000.0):
        super().__init__()
        self.freq_dim = freq_dim
        self.time_scale = time_scale
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        t = torch.as_tensor(t, dtype=torch.float32)
        if torch.any((t < 0) | (t > 1)):
            raise DomainError(f"timestep must lie in [0, 1], got {t.min().item()}..{t.max().item()}")
        feats = sinusoidal(t * self.time_scale, self.freq_dim)
        return self.mlp(feats.to(self.mlp[0].weight.dtype))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)
