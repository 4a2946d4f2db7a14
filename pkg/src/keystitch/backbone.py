"""Transformer velocity backbone.

A small pre-LN transformer over latent tokens: input projection, fixed
sinusoidal positions, a sinusoidal timestep embedding added to every token,
``depth`` self-attention blocks, and a linear velocity head. Hidden width and
token count are constant across layers. Per-layer additive injections (from
the attribute encoder) enter *before* each block.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(pos: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """(...,) positions -> (..., dim) sin/cos features."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=pos.dtype, device=pos.device) / half)
    args = pos[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.ln2 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, -1).transpose(1, 2)
        k = k.view(b, n, self.heads, -1).transpose(1, 2)
        v = v.view(b, n, self.heads, -1).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(b, n, w)
        x = x + self.proj(att)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class VelocityBackbone(nn.Module):
    """Predicts the flow velocity for a token sequence at time t."""

    def __init__(self, token_dim: int = 16, width: int = 64, depth: int = 4, heads: int = 4):
        super().__init__()
        self.token_dim = token_dim
        self.width = width
        self.depth = depth
        self.in_proj = nn.Linear(token_dim, width)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.out_norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, token_dim)

    def embed_inputs(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = tokens.shape
        x = self.in_proj(tokens)
        pos = torch.arange(n, dtype=x.dtype, device=x.device)
        x = x + sinusoidal_embedding(pos, self.width)[None]
        temb = sinusoidal_embedding(t.to(x.dtype) * 1000.0, self.width)
        return x + temb[:, None, :]

    def forward(self, tokens: torch.Tensor, t: torch.Tensor, injections=None) -> torch.Tensor:
        """tokens (B, N, d); t (B,); injections: per-layer additive terms or None."""
        x = self.embed_inputs(tokens, t)
        for layer, block in enumerate(self.blocks):
            if injections is not None and injections[layer] is not None:
                x = x + injections[layer]
            x = block(x)
        return self.out_proj(self.out_norm(x))
