"""Prompt-guided mask generator: dense prompt encoder, two-way decoder,
four candidate masks plus predicted IoUs."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ModelConfig
from .errors import ShapeError
from .layers import MLP, AttnUpdate, FFNUpdate, LayerNorm2d

NUM_MASKS = 4


class OutputTokens(nn.Module):
    def __init__(self, d2: int):
        super().__init__()
        self.filter = nn.Parameter(torch.randn(NUM_MASKS, d2) * 0.1)
        self.iou = nn.Parameter(torch.randn(1, d2) * 0.1)

    def concat(self, p_sparse: Tensor) -> Tensor:
        """``[T_filter; T_IoU; p_sparse]`` -> ``B x (5 + n_p) x d2``."""
        B = p_sparse.shape[0]
        fixed = torch.cat([self.filter, self.iou], 0)[None].expand(B, -1, -1)
        return torch.cat([fixed, p_sparse], 1)


class DensePromptEncoder(nn.Module):
    """Stride-2 convs from ``H2/4`` down to ``h2``, then lift to ``d2`` channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n_down = int(math.log2(cfg.stride2 // 4))
        mid = max(4, cfg.d2 // 4)
        layers: list[nn.Module] = []
        c_in = 1
        for _ in range(n_down):
            layers += [nn.Conv2d(c_in, mid, 2, stride=2), LayerNorm2d(mid), nn.GELU()]
            c_in = mid
        layers.append(nn.Conv2d(c_in, cfg.d2, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, dense_logits: Tensor) -> Tensor:
        """``B x H2/4 x W2/4`` -> ``B x h2 x w2 x d2``."""
        squeeze = dense_logits.ndim == 2
        x = dense_logits[None] if squeeze else dense_logits
        if tuple(x.shape[1:]) != self.cfg.dense_hw:
            raise ShapeError(f"dense prompt must be {self.cfg.dense_hw}, got {tuple(x.shape[1:])}")
        out = self.net(x[:, None]).permute(0, 2, 3, 1)
        return out[0] if squeeze else out


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.token_self = AttnUpdate(dim, heads)
        self.token_to_image = AttnUpdate(dim, heads)
        self.token_ffn = FFNUpdate(dim, hidden)
        self.image_to_token = AttnUpdate(dim, heads)

    def forward(self, tokens, token_pe, image, image_pe):
        tokens = self.token_self(tokens, tokens, token_pe, token_pe)
        tokens = self.token_ffn(self.token_to_image(tokens, image, token_pe, image_pe))
        image = self.image_to_token(image, tokens, image_pe, token_pe)
        return tokens, image


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, heads = cfg.d2, cfg.heads2
        self.prompt_encoder = DensePromptEncoder(cfg)
        self.image_pe = nn.Parameter(torch.randn(cfg.h2 * cfg.w2, d) * 0.1)
        self.blocks = nn.ModuleList(TwoWayBlock(d, heads, d * cfg.mlp_ratio)
                                    for _ in range(cfg.decoder_depth))
        self.final_attn = AttnUpdate(d, heads)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 4, 2, stride=2), LayerNorm2d(d // 4), nn.GELU(),
            nn.ConvTranspose2d(d // 4, d // 8, 2, stride=2), nn.GELU(),
        )
        self.hyper = nn.ModuleList(MLP(d, d, d // 8, 3) for _ in range(NUM_MASKS))
        self.iou_head = MLP(d, d, NUM_MASKS, 3)

    def forward(self, f_img: Tensor, f_dense: Tensor, p_sparse: Tensor,
                tokens: OutputTokens) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        squeeze = f_img.ndim == 3
        if squeeze:
            f_img, f_dense, p_sparse = f_img[None], f_dense[None], p_sparse[None]
        want = (cfg.h2, cfg.w2, cfg.d2)
        for name, t in (("F_img", f_img), ("F_dense", f_dense)):
            if t.ndim != 4 or tuple(t.shape[1:]) != want:
                raise ShapeError(f"{name} must be B x {want}, got {tuple(t.shape)}")
        if p_sparse.ndim != 3 or p_sparse.shape[-1] != cfg.d2:
            raise ShapeError(f"p_sparse must be B x n x {cfg.d2}, got {tuple(p_sparse.shape)}")

        B = f_img.shape[0]
        src = (f_img + f_dense).reshape(B, cfg.h2 * cfg.w2, cfg.d2)
        out_tokens = tokens.concat(p_sparse)
        token_pe = out_tokens
        t = out_tokens
        for blk in self.blocks:
            t, src = blk(t, token_pe, src, self.image_pe)
        t = self.final_attn(t, src, token_pe, self.image_pe)

        feat = self.upscale(src.transpose(1, 2).reshape(B, cfg.d2, cfg.h2, cfg.w2))
        hyper = torch.stack([mlp(t[:, i]) for i, mlp in enumerate(self.hyper)], 1)
        masks = torch.einsum("bkc,bchw->bkhw", hyper, feat)
        if masks.shape[-2:] != (cfg.H2, cfg.W2):
            masks = F.interpolate(masks, size=(cfg.H2, cfg.W2), mode="bilinear",
                                  align_corners=False)
        iou_pred = self.iou_head(t[:, NUM_MASKS])
        return (masks[0], iou_pred[0]) if squeeze else (masks, iou_pred)


def encode_dense_prompt(p_dense_logits: Tensor, decoder: MaskDecoder) -> Tensor:
    return decoder.prompt_encoder(p_dense_logits)


def decode_masks(f_img: Tensor, f_dense: Tensor, p_sparse: Tensor, tokens: OutputTokens,
                 decoder: MaskDecoder) -> tuple[Tensor, Tensor]:
    return decoder(f_img, f_dense, p_sparse, tokens)


def select_mask(masks: Tensor) -> Tensor:
    """First of the candidate masks (``4 x H x W`` or ``B x 4 x H x W``)."""
    if masks.shape[-3] < 1:
        raise ShapeError("no candidate masks")
    return masks[..., 0, :, :]


def binarize(logits, threshold: float = 0.0):
    """1 where ``logit > threshold`` else 0; works on tensors and numpy arrays."""
    if isinstance(logits, Tensor):
        return (logits > threshold).to(torch.uint8)
    return (np.asarray(logits) > threshold).astype(np.uint8)
