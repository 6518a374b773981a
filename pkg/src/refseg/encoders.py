"""Toy dual-modality encoders and the mask-branch image encoder.

All backbone weights are frozen; trainable capacity enters only through
low-rank adapters on the query and value projections of every attention
block, so an adapter with ``lora_B == 0`` leaves the backbone untouched.
"""

from __future__ import annotations

import math
import re
import zlib
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ModelConfig
from .errors import EmptyTextError, ShapeError

PAD_ID = 0
EOS_ID = 1
_FIRST_WORD_ID = 2
_WORD_RE = re.compile(r"[a-z0-9]+")


class LoraLinear(nn.Module):
    """Frozen linear map ``W`` plus a trainable low-rank term ``A @ B.T``.

    ``weight`` is ``d_out x d_in``, ``lora_A`` is ``d_out x r`` and ``lora_B``
    is ``d_in x r``.  ``A`` starts at N(0, 1/r) and ``B`` at zero; no alpha/r
    rescaling is applied.
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 0, bias: bool = True):
        super().__init__()
        base = nn.Linear(d_in, d_out, bias=bias)
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        self.bias = (nn.Parameter(base.bias.detach().clone(), requires_grad=False)
                     if bias else None)
        self.rank = rank
        if rank > 0:
            self.lora_A = nn.Parameter(torch.randn(d_out, rank) / math.sqrt(rank))
            self.lora_B = nn.Parameter(torch.zeros(d_in, rank))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def base_forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected input width {self.d_in}, got {x.shape[-1]}")
        y = self.base_forward(x)
        if self.rank > 0:
            y = y + (x @ self.lora_B) @ self.lora_A.T
        return y


def lora_linear(x: Tensor, W: Tensor, A: Tensor | None = None, B: Tensor | None = None,
                bias: Tensor | None = None) -> Tensor:
    """Functional form: ``(W + A @ B.T) @ x`` for a vector or a batch of rows."""
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"expected input width {W.shape[1]}, got {x.shape[-1]}")
    y = F.linear(x, W, bias)
    if A is not None and B is not None and A.shape[1] > 0:
        if A.shape[0] != W.shape[0] or B.shape[0] != W.shape[1] or A.shape[1] != B.shape[1]:
            raise ShapeError(f"adapter shapes A{tuple(A.shape)} B{tuple(B.shape)} "
                             f"do not fit W{tuple(W.shape)}")
        y = y + (x @ B) @ A.T
    return y


def freeze_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class TextTokenizer:
    """Lowercase, split on non-alphanumerics, hash each word into a bucket.

    Hashing uses CRC32, so ids are stable across processes; no word is ever
    out of vocabulary.
    """

    def __init__(self, vocab_size: int = 4096, max_len: int = 24):
        if vocab_size <= _FIRST_WORD_ID:
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size
        self.max_len = max_len

    def words(self, text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    def word_id(self, word: str) -> int:
        span = self.vocab_size - _FIRST_WORD_ID
        return _FIRST_WORD_ID + zlib.crc32(word.encode("utf-8")) % span

    def __call__(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise EmptyTextError("referring text is empty")
        ids = [self.word_id(w) for w in self.words(text)][: self.max_len]
        if not ids:
            raise EmptyTextError(f"no tokens in referring text {text!r}")
        return ids

    def batch(self, texts: Sequence[str]) -> tuple[Tensor, Tensor]:
        """Return ``(ids, lengths)``; ids is ``B x (max_len+1)`` with EOS at ``lengths``."""
        ids = torch.full((len(texts), self.max_len + 1), PAD_ID, dtype=torch.long)
        lengths = torch.empty(len(texts), dtype=torch.long)
        for i, text in enumerate(texts):
            toks = self(text)
            ids[i, : len(toks)] = torch.tensor(toks)
            ids[i, len(toks)] = EOS_ID
            lengths[i] = len(toks)
        return ids, lengths


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, rank: int = 0):
        super().__init__()
        self.heads = heads
        self.q = LoraLinear(dim, dim, rank)
        self.k = LoraLinear(dim, dim, 0)
        self.v = LoraLinear(dim, dim, rank)
        self.o = LoraLinear(dim, dim, 0)

    def forward(self, x: Tensor, attn_mask: Tensor | None = None) -> Tensor:
        B, N, C = x.shape
        h = self.heads

        def split(t):
            return t.view(B, N, h, C // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(C // h)
        if attn_mask is not None:
            scores = scores.masked_fill(~attn_mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    """Pre-norm transformer layer; attention q/v carry the adapters."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rank: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, rank)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = LoraLinear(dim, dim * mlp_ratio, 0)
        self.fc2 = LoraLinear(dim * mlp_ratio, dim, 0)

    def forward(self, x: Tensor, attn_mask: Tensor | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), attn_mask)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TextEncoder(nn.Module):
    """Causal transformer over hashed word ids with an appended EOS token."""

    def __init__(self, vocab_size: int, max_len: int, width: int, out_dim: int, depth: int,
                 heads: int, mlp_ratio: int, rank: int):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, width)
        self.pos = nn.Parameter(torch.randn(max_len + 1, width) * 0.02)
        self.blocks = nn.ModuleList(Block(width, heads, mlp_ratio, rank) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.proj = LoraLinear(width, out_dim, 0, bias=False)
        _freeze_backbone(self)

    def forward(self, ids: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(t_word, word_mask, t_sent)``.

        ``t_word`` is ``B x max_len x d`` with ``word_mask`` marking real tokens;
        ``t_sent`` is ``B x 1 x d``, the hidden state at each EOS position.
        """
        T = ids.shape[1]
        if T != self.max_len + 1:
            raise ShapeError(f"expected {self.max_len + 1} token slots, got {T}")
        x = self.embed(ids) + self.pos
        causal = torch.ones(T, T, dtype=torch.bool, device=ids.device).tril()
        for blk in self.blocks:
            x = blk(x, causal)
        x = self.proj(self.norm(x))
        idx = torch.arange(T - 1, device=ids.device)
        word_mask = idx[None, :] < lengths[:, None]
        t_word = x[:, :-1] * word_mask[..., None]
        t_sent = x[torch.arange(x.shape[0], device=ids.device), lengths][:, None]
        return t_word, word_mask, t_sent


class VisionEncoder(nn.Module):
    """Non-overlapping patch embedding, learned position table, transformer
    blocks and a linear projection to the joint width.

    Global pooling is deliberately absent: the output keeps the patch grid.
    """

    def __init__(self, image_hw: tuple[int, int], patch: int, width: int, out_dim: int,
                 depth: int, heads: int, mlp_ratio: int, rank: int):
        super().__init__()
        self.image_hw = image_hw
        self.grid = (image_hw[0] // patch, image_hw[1] // patch)
        self.patch_embed = nn.Conv2d(3, width, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(self.grid[0] * self.grid[1], width) * 0.02)
        self.blocks = nn.ModuleList(Block(width, heads, mlp_ratio, rank) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.proj = LoraLinear(width, out_dim, 0, bias=False)
        _freeze_backbone(self)

    def forward(self, image: Tensor) -> Tensor:
        """``B x 3 x H x W`` in [0, 1] -> ``B x h x w x d``."""
        if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != self.image_hw:
            raise ShapeError(f"expected B x 3 x {self.image_hw[0]} x {self.image_hw[1]} image, "
                             f"got {tuple(image.shape)}")
        x = self.patch_embed(image * 2.0 - 1.0).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.proj(self.norm(x))
        return x.view(x.shape[0], *self.grid, -1)


def _freeze_backbone(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        p.requires_grad_(name.rsplit(".", 1)[-1] in ("lora_A", "lora_B"))


def build_text_encoder(cfg: ModelConfig) -> TextEncoder:
    return TextEncoder(cfg.vocab_size, cfg.max_len, cfg.width_text, cfg.d1, cfg.depth_text,
                       _backbone_heads(cfg.width_text), cfg.mlp_ratio, cfg.r_clip_t)


def build_lowres_encoder(cfg: ModelConfig) -> VisionEncoder:
    return VisionEncoder((cfg.H1, cfg.W1), cfg.patch1, cfg.width_vis, cfg.d1, cfg.depth_vis,
                         _backbone_heads(cfg.width_vis), cfg.mlp_ratio, cfg.r_clip_v)


def build_highres_encoder(cfg: ModelConfig) -> VisionEncoder:
    return VisionEncoder((cfg.H2, cfg.W2), cfg.stride2, cfg.width_sam, cfg.d2, cfg.depth_sam,
                         _backbone_heads(cfg.width_sam), cfg.mlp_ratio, cfg.r_sam_v)


def _backbone_heads(width: int) -> int:
    return max(1, width // 64)


def encode_text(text: str | Sequence[str], stack: TextEncoder,
                tok: TextTokenizer) -> tuple[Tensor, Tensor]:
    """Encode one string (or a batch) into ``(t_word, t_sent)``.

    For a single string the padding is stripped: ``t_word`` is ``L x d1`` and
    ``t_sent`` is ``1 x d1``.
    """
    single = isinstance(text, str)
    texts = [text] if single else list(text)
    ids, lengths = tok.batch(texts)
    ids = ids.to(stack.pos.device)
    lengths = lengths.to(stack.pos.device)
    t_word, word_mask, t_sent = stack(ids, lengths)
    if single:
        return t_word[0, : int(lengths[0])], t_sent[0]
    return t_word, t_sent


def encode_image_lowres(image_lowres: Tensor, stack: VisionEncoder) -> Tensor:
    """``H1 x W1 x 3`` (or batched) -> ``h1 x w1 x d1`` dense feature map."""
    return _encode_image(image_lowres, stack)


def encode_image_highres(image: Tensor, stack: VisionEncoder) -> Tensor:
    """``H2 x W2 x 3`` (or batched) -> ``h2 x w2 x d2`` mask-branch feature map."""
    return _encode_image(image, stack)


def _encode_image(image: Tensor, stack: VisionEncoder) -> Tensor:
    # accepts channels-last arrays as the public shape contract states
    single = image.ndim == 3
    x = image[None] if single else image
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    out = stack(x.contiguous())
    return out[0] if single else out


def iter_lora_layers(model: nn.Module) -> Iterable[tuple[str, LoraLinear]]:
    for name, mod in model.named_modules():
        if isinstance(mod, LoraLinear) and mod.rank > 0:
            yield name, mod
