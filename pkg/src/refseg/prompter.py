"""Cascaded second-order referring prompter.

Word-level text features are split into two subspace token sets, each set
activates the visual map in turn (the second stage reads the first stage's
visual output), and the result is turned into sparse query prompts plus a
dense text-filtered activation map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ModelConfig
from .errors import ShapeError
from .layers import AttnUpdate, FFNUpdate


@dataclass
class PromptBundle:
    p_sparse: Tensor  # B x n_p x d2
    p_dense: Tensor  # B x H2/4 x W2/4, cosine map in [-1, 1]


@dataclass
class PrompterOutput:
    prompts: PromptBundle
    t1: Tensor | None
    t2: Tensor | None
    t1_act: Tensor | None
    t2_act: Tensor | None
    v1_act: Tensor | None  # B x h1 x w1 x d1
    v2_act: Tensor  # B x h1 x w1 x d1


class _SubspaceBranch(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.self_attn = AttnUpdate(dim, heads)
        self.word_attn = AttnUpdate(dim, heads)
        self.word_ffn = FFNUpdate(dim, hidden)
        self.other_attn = AttnUpdate(dim, heads)
        self.other_ffn = FFNUpdate(dim, hidden)

    def read_text(self, t: Tensor, pos: Tensor, t_word: Tensor, word_mask: Tensor) -> Tensor:
        t = self.self_attn(t, t, pos, pos)
        return self.word_ffn(self.word_attn(t, t_word, pos, None, word_mask))

    def read_other(self, t: Tensor, pos: Tensor, other: Tensor, other_pos: Tensor) -> Tensor:
        return self.other_ffn(self.other_attn(t, other, pos, other_pos))


class DecompBlock(nn.Module):
    """One decomposition block: each subspace self-attends, reads the words,
    then reads the other subspace (both directions use the pre-exchange states)."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.branch1 = _SubspaceBranch(dim, heads, hidden)
        self.branch2 = _SubspaceBranch(dim, heads, hidden)

    def forward(self, t1, t2, pos1, pos2, t_word, word_mask):
        a1 = self.branch1.read_text(t1, pos1, t_word, word_mask)
        a2 = self.branch2.read_text(t2, pos2, t_word, word_mask)
        return (self.branch1.read_other(a1, pos1, a2, pos2),
                self.branch2.read_other(a2, pos2, a1, pos1))


class InteractBlock(nn.Module):
    """Text tokens self-attend; visual tokens query the text tokens."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.text_self = AttnUpdate(dim, heads)
        self.vis_cross = AttnUpdate(dim, heads)
        self.vis_ffn = FFNUpdate(dim, hidden)

    def forward(self, t: Tensor, v: Tensor, v_pos: Tensor) -> tuple[Tensor, Tensor]:
        t = self.text_self(t, t)
        v = self.vis_ffn(self.vis_cross(v, t, v_pos, None))
        return t, v


class PromptGenBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.self_attn = AttnUpdate(dim, heads)
        self.text_attn = AttnUpdate(dim, heads)
        self.text_ffn = FFNUpdate(dim, hidden)
        self.vis_attn = AttnUpdate(dim, heads)
        self.vis_ffn = FFNUpdate(dim, hidden)

    def forward(self, p, p_pos, t, t_mask, v, v_pos):
        p = self.self_attn(p, p, p_pos, p_pos)
        p = self.text_ffn(self.text_attn(p, t, p_pos, None, t_mask))
        return self.vis_ffn(self.vis_attn(p, v, p_pos, v_pos))


class DensePromptHead(nn.Module):
    """3x3 conv + BN + ReLU smoothing, bilinear upsampling, then a per-pixel
    cosine against the sentence embedding.

    Upsampling happens before the text filtering.  Set ``trace`` to a list to
    record the order of operations.
    """

    def __init__(self, dim: int, out_hw: tuple[int, int], init_scale: float = 10.0):
        super().__init__()
        self.out_hw = out_hw
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.bn = nn.BatchNorm2d(dim)
        # learnable temperature turning the cosine map into logits
        self.log_scale = nn.Parameter(torch.tensor(math.log(init_scale)))
        self.trace: list[str] | None = None

    @property
    def scale(self) -> Tensor:
        return self.log_scale.exp()

    def _mark(self, op: str) -> None:
        if self.trace is not None:
            self.trace.append(op)

    def forward(self, v: Tensor, t_sent: Tensor) -> Tensor:
        x = v.permute(0, 3, 1, 2)
        x = F.relu(self.bn(self.conv(x)))
        self._mark("conv")
        x = F.interpolate(x, size=self.out_hw, mode="bilinear", align_corners=False)
        self._mark("upsample")
        x = F.normalize(x, dim=1, eps=1e-12)
        t = F.normalize(t_sent.reshape(t_sent.shape[0], -1), dim=-1, eps=1e-12)
        self._mark("normalize")
        out = torch.einsum("bchw,bc->bhw", x, t)
        self._mark("filter")
        return out


def textpool(t_word: Tensor, word_mask: Tensor, n: int) -> Tensor:
    """Mean of the valid word tokens, repeated ``n`` times."""
    m = word_mask.to(t_word.dtype)[..., None]
    pooled = (t_word * m).sum(1) / m.sum(1).clamp_min(1.0)
    return pooled[:, None, :].expand(-1, n, -1).contiguous()


class CascadedPrompter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, heads, hidden = cfg.d1, cfg.heads1, cfg.d1 * cfg.mlp_ratio
        self.decomp_pos1 = nn.Parameter(torch.randn(cfg.n_t, d) * 0.1)
        self.decomp_pos2 = nn.Parameter(torch.randn(cfg.n_t, d) * 0.1)
        self.decomp = nn.ModuleList(DecompBlock(d, heads, hidden) for _ in range(cfg.N_decomp))
        self.interact1 = nn.ModuleList(InteractBlock(d, heads, hidden)
                                       for _ in range(cfg.N_interact))
        self.interact2 = nn.ModuleList(InteractBlock(d, heads, hidden)
                                       for _ in range(cfg.N_interact))
        self.vis_pos = nn.Parameter(torch.randn(cfg.h1 * cfg.w1, d) * 0.1)
        self.sparse_query = nn.Parameter(torch.randn(cfg.n_p, d))
        self.sparse_pos = nn.Parameter(torch.randn(cfg.n_p, d) * 0.1)
        self.pgen = nn.ModuleList(PromptGenBlock(d, heads, hidden) for _ in range(cfg.N_pgen))
        self.sparse_out = nn.Linear(d, cfg.d2)
        self.dense_head = DensePromptHead(d, cfg.dense_hw)

    # -- stages ---------------------------------------------------------

    def decompose(self, t_word: Tensor, word_mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        t_word, word_mask, squeeze = _batchify_words(t_word, word_mask, self.cfg.d1)
        t1 = t2 = textpool(t_word, word_mask, self.cfg.n_t)
        for blk in self.decomp:
            t1, t2 = blk(t1, t2, self.decomp_pos1, self.decomp_pos2, t_word, word_mask)
        return (t1[0], t2[0]) if squeeze else (t1, t2)

    def interact(self, t_sub: Tensor, v_in: Tensor, stage: int) -> tuple[Tensor, Tensor]:
        """Run one cascade stage (1 or 2); ``v_in`` is ``B x h1 x w1 x d1``."""
        squeeze = t_sub.ndim == 2
        if squeeze:
            t_sub, v_in = t_sub[None], v_in[None]
        self._check_visual(v_in)
        _check_last(t_sub, self.cfg.d1, "t_sub")
        B, h, w, d = v_in.shape
        blocks = self.interact1 if stage == 1 else self.interact2
        t, v = t_sub, v_in.reshape(B, h * w, d)
        for blk in blocks:
            t, v = blk(t, v, self.vis_pos)
        v = v.reshape(B, h, w, d)
        return (t[0], v[0]) if squeeze else (t, v)

    def gen_sparse(self, t_act: Tensor, v_act: Tensor, t_mask: Tensor | None = None) -> Tensor:
        squeeze = t_act.ndim == 2
        if squeeze:
            t_act, v_act = t_act[None], v_act[None]
        self._check_visual(v_act)
        _check_last(t_act, self.cfg.d1, "text tokens")
        B, h, w, d = v_act.shape
        v = v_act.reshape(B, h * w, d)
        p = self.sparse_query[None].expand(B, -1, -1)
        for blk in self.pgen:
            p = blk(p, self.sparse_pos, t_act, t_mask, v, self.vis_pos)
        p = self.sparse_out(p)
        return p[0] if squeeze else p

    def gen_dense(self, v_act: Tensor, t_sent: Tensor) -> Tensor:
        squeeze = v_act.ndim == 3
        if squeeze:
            v_act, t_sent = v_act[None], t_sent[None]
        self._check_visual(v_act)
        _check_last(t_sent, self.cfg.d1, "t_sent")
        out = self.dense_head(v_act, t_sent)
        return out[0] if squeeze else out

    # -- composition ----------------------------------------------------

    def forward(self, t_word: Tensor, word_mask: Tensor, t_sent: Tensor, v: Tensor, *,
                swap_subspaces: bool = False, zero_v1: bool = False) -> PrompterOutput:
        self._check_visual(v)
        B = v.shape[0]
        if not self.cfg.cascade:
            p_sparse = self.gen_sparse(t_word, v, word_mask)
            p_dense = (self.gen_dense(v, t_sent) if self.cfg.dense_prompt
                       else v.new_zeros(B, *self.cfg.dense_hw))
            return PrompterOutput(PromptBundle(p_sparse, p_dense), None, None, None, None,
                                  None, v)
        t1, t2 = self.decompose(t_word, word_mask)
        first, second = (t2, t1) if swap_subspaces else (t1, t2)
        t1_act, v1_act = self.interact(first, v, stage=1)
        v_stage2 = torch.zeros_like(v1_act) if zero_v1 else v1_act
        t2_act, v2_act = self.interact(second, v_stage2, stage=2)
        p_sparse = self.gen_sparse(t2_act, v2_act)
        p_dense = (self.gen_dense(v2_act, t_sent) if self.cfg.dense_prompt
                   else v.new_zeros(B, *self.cfg.dense_hw))
        return PrompterOutput(PromptBundle(p_sparse, p_dense), t1, t2, t1_act, t2_act,
                              v1_act, v2_act)

    def _check_visual(self, v: Tensor) -> None:
        want = (self.cfg.h1, self.cfg.w1, self.cfg.d1)
        if v.ndim != 4 or tuple(v.shape[1:]) != want:
            raise ShapeError(f"visual map must be B x {want[0]} x {want[1]} x {want[2]}, "
                             f"got {tuple(v.shape)}")


def _check_last(t: Tensor, d: int, name: str) -> None:
    if t.shape[-1] != d:
        raise ShapeError(f"{name} width must be {d}, got {t.shape[-1]}")


def _batchify_words(t_word: Tensor, word_mask: Tensor | None, d: int):
    squeeze = t_word.ndim == 2
    if squeeze:
        t_word = t_word[None]
    if t_word.ndim != 3 or t_word.shape[1] < 1:
        raise ShapeError(f"t_word must be (B x) L x {d} with L >= 1, got {tuple(t_word.shape)}")
    _check_last(t_word, d, "t_word")
    if word_mask is None:
        word_mask = torch.ones(t_word.shape[:2], dtype=torch.bool, device=t_word.device)
    elif word_mask.ndim == 1:
        word_mask = word_mask[None]
    return t_word, word_mask, squeeze
