"""Full two-stage model: encode, prompt, decode."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import ModelConfig, validate_config
from .encoders import (TextTokenizer, build_highres_encoder, build_lowres_encoder,
                       build_text_encoder)
from .errors import ShapeError
from .maskgen import MaskDecoder, OutputTokens, select_mask
from .prompter import CascadedPrompter, PrompterOutput

TRAINABLE_PREFIXES = ("lora.", "prompter.", "mask_decoder.", "tokens.")


@dataclass
class FeatureBundle:
    v: Tensor  # B x h1 x w1 x d1
    t_word: Tensor  # B x max_len x d1, padded
    word_mask: Tensor  # B x max_len
    t_sent: Tensor  # B x 1 x d1

    @property
    def t(self) -> Tensor:
        """Word tokens followed by the sentence token (padded rows included)."""
        return torch.cat([self.t_word, self.t_sent], 1)


@dataclass
class ModelOutput:
    features: FeatureBundle
    prompter: PrompterOutput
    f_img: Tensor  # B x h2 x w2 x d2
    f_dense: Tensor  # B x h2 x w2 x d2
    masks: Tensor  # B x 4 x H2 x W2 logits
    iou_pred: Tensor  # B x 4
    dense_scale: Tensor

    @property
    def logits(self) -> Tensor:
        return select_mask(self.masks)

    @property
    def p_dense(self) -> Tensor:
        return self.prompter.prompts.p_dense

    @property
    def p_sparse(self) -> Tensor:
        return self.prompter.prompts.p_sparse


class RefSegModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = validate_config(cfg)
        self.tokenizer = TextTokenizer(cfg.vocab_size, cfg.max_len)
        self.text_encoder = build_text_encoder(cfg)
        self.image_encoder = build_lowres_encoder(cfg)
        self.mask_encoder = build_highres_encoder(cfg)
        self.prompter = CascadedPrompter(cfg)
        self.mask_decoder = MaskDecoder(cfg)
        self.tokens = OutputTokens(cfg.d2)

    def lowres_view(self, images: Tensor) -> Tensor:
        return F.interpolate(images, size=(self.cfg.H1, self.cfg.W1), mode="bilinear",
                             align_corners=False)

    def encode(self, images: Tensor, ids: Tensor, lengths: Tensor) -> FeatureBundle:
        t_word, word_mask, t_sent = self.text_encoder(ids, lengths)
        v = self.image_encoder(self.lowres_view(images))
        return FeatureBundle(v, t_word, word_mask, t_sent)

    def forward(self, images: Tensor, ids: Tensor, lengths: Tensor, *,
                swap_subspaces: bool = False, zero_v1: bool = False) -> ModelOutput:
        """``images`` is ``B x 3 x H2 x W2`` in [0, 1]."""
        cfg = self.cfg
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, cfg.H2, cfg.W2):
            raise ShapeError(f"images must be B x 3 x {cfg.H2} x {cfg.W2}, "
                             f"got {tuple(images.shape)}")
        feats = self.encode(images, ids, lengths)
        pout = self.prompter(feats.t_word, feats.word_mask, feats.t_sent, feats.v,
                             swap_subspaces=swap_subspaces, zero_v1=zero_v1)
        scale = self.prompter.dense_head.scale
        f_img = self.mask_encoder(images)
        f_dense = self.mask_decoder.prompt_encoder(pout.prompts.p_dense * scale)
        masks, iou_pred = self.mask_decoder(f_img, f_dense, pout.prompts.p_sparse, self.tokens)
        return ModelOutput(feats, pout, f_img, f_dense, masks, iou_pred, scale)

    def run_texts(self, images: Tensor, texts: list[str], **kw) -> ModelOutput:
        ids, lengths = self.tokenizer.batch(texts)
        return self(images, ids.to(images.device), lengths.to(images.device), **kw)


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> RefSegModel:
    """Deterministic construction from ``cfg.seed``; the global RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = RefSegModel(cfg)
    return model.to(dtype)


def _canonical_name(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("lora_A", "lora_B"):
        return "lora." + name
    return name


def trainable_parameters(model: RefSegModel) -> list[tuple[str, nn.Parameter]]:
    """Adapters, prompter, mask decoder and output tokens; never frozen weights."""
    out = []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        cname = _canonical_name(name)
        if not cname.startswith(TRAINABLE_PREFIXES):
            raise AssertionError(f"unexpected trainable parameter {name}")
        out.append((cname, p))
    return out


def parameter_counts(model: nn.Module) -> tuple[int, int]:
    """``(trainable, total)`` element counts."""
    total = sum(p.numel() for p in model.parameters())
    train = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return train, total
