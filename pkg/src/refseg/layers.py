"""Small trainable building blocks shared by the prompter and the mask decoder."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class MultiHeadAttention(nn.Module):
    """Attention with separate query/key/value inputs and an optional key mask.

    ``key_mask`` is ``B x Nk`` with True on valid keys.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
        B, Nq, C = q.shape
        Nk = k.shape[1]
        h = self.heads
        q = self.q_proj(q).view(B, Nq, h, C // h).transpose(1, 2)
        k = self.k_proj(k).view(B, Nk, h, C // h).transpose(1, 2)
        v = self.v_proj(v).view(B, Nk, h, C // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(C // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = scores.softmax(-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(B, Nq, C))


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, layers: int = 2):
        super().__init__()
        dims = [d_in] + [d_hidden] * (layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class AttnUpdate(nn.Module):
    """``x <- LN(x + attn(x + x_pos, kv + kv_pos, kv))``."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor, kv: Tensor, x_pos: Tensor | None = None,
                kv_pos: Tensor | None = None, key_mask: Tensor | None = None) -> Tensor:
        q = x if x_pos is None else x + x_pos
        k = kv if kv_pos is None else kv + kv_pos
        return self.norm(x + self.attn(q, k, kv, key_mask))


class FFNUpdate(nn.Module):
    """``x <- LN(x + MLP(x))``."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.mlp = MLP(dim, hidden, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x + self.mlp(x))


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]
