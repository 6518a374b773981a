"""Segmentation, subspace-orthogonality and alignment losses.

Every function accepts a single instance or a leading batch dimension and
returns a scalar (batch mean).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .core import ModelConfig
from .errors import DegenerateError, ShapeError

DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    alpha_dice: float = 1.0
    alpha_ortho: float = 0.5
    alpha_dense: float = 0.0
    alpha_spat: float = 0.0
    alpha_samp: float = 0.5
    spat_mode: str = "CE"
    spat_features: str = "v"
    spat_text: str = "t_sent"
    samp_features: str = "v"
    samp_text: str = "t2"
    nce_temperature: float = 0.07

    def __post_init__(self):
        for name in ("alpha_dice", "alpha_ortho", "alpha_dense", "alpha_spat", "alpha_samp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "LossWeights":
        return cls(alpha_dice=cfg.alpha_dice, alpha_ortho=cfg.alpha_ortho,
                   alpha_dense=cfg.alpha_dense, alpha_spat=cfg.alpha_spat,
                   alpha_samp=cfg.alpha_samp, spat_mode=cfg.spat_mode,
                   spat_features=cfg.spat_features, spat_text=cfg.spat_text,
                   samp_features=cfg.samp_features, samp_text=cfg.samp_text,
                   nce_temperature=cfg.nce_temperature)


def _batched(x: Tensor, ndim: int) -> Tensor:
    return x[None] if x.ndim == ndim else x


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ------------------------------------------------------------ segmentation

def bce_loss(logits: Tensor, gt: Tensor) -> Tensor:
    _same_shape(logits, gt)
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def dice_loss(logits: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`` per sample, averaged."""
    _same_shape(logits, gt)
    p = torch.sigmoid(_batched(logits, 2)).flatten(1)
    g = _batched(gt, 2).to(p.dtype).flatten(1)
    dice = (2 * (p * g).sum(1) + eps) / (p.sum(1) + g.sum(1) + eps)
    return (1 - dice).mean()


def seg_loss(pred_logits: Tensor, gt: Tensor, alpha_dice: float = 1.0) -> Tensor:
    return bce_loss(pred_logits, gt) + alpha_dice * dice_loss(pred_logits, gt)


# ------------------------------------------------------------ subspaces

def norm_pool(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean over tokens then L2 normalisation; ``(B x) n x d -> (B x) d``."""
    pooled = t.mean(-2)
    norm = pooled.norm(dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        raise DegenerateError("pooled subspace vector has (near) zero norm")
    return pooled / norm


def ortho_loss(t1: Tensor, t2: Tensor, alpha_ortho: float = 0.5) -> Tensor:
    """``alpha * cos^2`` between the norm-pooled subspace embeddings."""
    _same_shape(t1, t2)
    cos = (norm_pool(t1) * norm_pool(t2)).sum(-1).clamp(-1.0, 1.0)  # rounding can pass 1
    return alpha_ortho * (cos ** 2).mean()


# ------------------------------------------------------------ mask resampling

def downsample_majority(gt: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Area-majority downsampling (ties go to foreground); integer factors only."""
    g = _batched(gt, 2).to(torch.float64)
    H, W = g.shape[-2:]
    if H % out_hw[0] or W % out_hw[1]:
        raise ShapeError(f"cannot downsample {H}x{W} to {out_hw} by an integer factor")
    frac = F.avg_pool2d(g[:, None], (H // out_hw[0], W // out_hw[1]))[:, 0]
    out = (frac >= 0.5).to(gt.dtype if gt.is_floating_point() else torch.float32)
    return out[0] if gt.ndim == 2 else out


def downsample_any(gt: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """A low-res cell is foreground when any covered pixel is."""
    g = _batched(gt, 2).to(torch.float64)
    H, W = g.shape[-2:]
    if H % out_hw[0] or W % out_hw[1]:
        raise ShapeError(f"cannot downsample {H}x{W} to {out_hw} by an integer factor")
    out = (F.max_pool2d(g[:, None], (H // out_hw[0], W // out_hw[1]))[:, 0] > 0).float()
    return out[0] if gt.ndim == 2 else out


def downsample_fraction(gt: Tensor, out_hw: tuple[int, int]) -> Tensor:
    g = _batched(gt, 2)
    H, W = g.shape[-2:]
    if H % out_hw[0] or W % out_hw[1]:
        raise ShapeError(f"cannot downsample {H}x{W} to {out_hw} by an integer factor")
    return F.avg_pool2d(g[:, None].float(), (H // out_hw[0], W // out_hw[1]))[:, 0]


# ------------------------------------------------------------ alignment

def dense_align_loss(p_dense: Tensor, gt: Tensor, temperature: float | Tensor = 1.0) -> Tensor:
    """BCE between ``sigmoid(p_dense * temperature)`` and the area-majority
    downsampled mask."""
    target = downsample_majority(gt, tuple(p_dense.shape[-2:])).to(p_dense.dtype)
    return F.binary_cross_entropy_with_logits(p_dense * temperature, target)


def cosine_map(visual: Tensor, text: Tensor) -> Tensor:
    """``B x h x w x d`` against ``B x d`` -> ``B x h x w`` cosines."""
    v = F.normalize(visual, dim=-1, eps=1e-12)
    t = F.normalize(text, dim=-1, eps=1e-12)
    return torch.einsum("bhwd,bd->bhw", v, t)


def spatial_align_loss(visual: Tensor, text: Tensor, gt: Tensor, mode: str = "CE",
                       scale: float | Tensor = 1.0 / 0.07) -> Tensor:
    """Coarse per-pixel cosine map supervised by the mask.

    ``CE``: BCE against the area-majority mask.  ``MIL``: the highest score
    over foreground cells should read 1 and the highest over background cells
    should read 0.
    """
    visual = _batched(visual, 3)
    text = text.reshape(visual.shape[0], -1)
    gt = _batched(gt, 2)
    logits = cosine_map(visual, text) * scale
    hw = tuple(logits.shape[-2:])
    if mode == "CE":
        target = downsample_majority(gt, hw).to(logits.dtype)
        return F.binary_cross_entropy_with_logits(logits, target)
    if mode != "MIL":
        raise ValueError(f"unknown spatial alignment mode {mode!r}")
    fg = downsample_any(gt, hw).bool()
    if not bool(fg.flatten(1).any(1).all()):
        raise DegenerateError("mask has no foreground at feature resolution")
    neg_inf = torch.finfo(logits.dtype).min
    flat, fgf = logits.flatten(1), fg.flatten(1)
    pos = flat.masked_fill(~fgf, neg_inf).amax(1)
    loss = F.binary_cross_entropy_with_logits(pos, torch.ones_like(pos))
    has_bg = (~fgf).any(1)
    if bool(has_bg.any()):
        neg = flat.masked_fill(fgf, neg_inf).amax(1)[has_bg]
        loss = loss + F.binary_cross_entropy_with_logits(neg, torch.zeros_like(neg))
    return loss


def mask_pool(visual: Tensor, gt: Tensor) -> Tensor:
    """Average ``B x h x w x d`` features weighted by mask area per cell -> ``B x d``."""
    w = downsample_fraction(gt, tuple(visual.shape[1:3])).to(visual.dtype)
    mass = w.flatten(1).sum(1)
    if bool((mass <= 0).any()):
        raise DegenerateError("empty mask cannot be pooled")
    return torch.einsum("bhwd,bhw->bd", visual, w) / mass[:, None]


def info_nce(a: Tensor, b: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over a batch of paired ``B x d`` vectors."""
    if a.shape[0] < 2:
        raise DegenerateError("contrastive loss needs a batch of at least 2")
    a = F.normalize(a, dim=-1, eps=1e-12)
    b = F.normalize(b, dim=-1, eps=1e-12)
    logits = a @ b.T / temperature
    labels = torch.arange(a.shape[0], device=a.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def sample_nce_loss(visual: Tensor, text: Tensor, gt: Tensor,
                    temperature: float = 0.07) -> Tensor:
    """Mask-pooled visual vectors vs text vectors, matched pairs positive."""
    if visual.shape[0] < 2:
        raise DegenerateError("contrastive loss needs a batch of at least 2")
    return info_nce(mask_pool(visual, gt), text.reshape(text.shape[0], -1), temperature)


# ------------------------------------------------------------ total

TERMS = ("ce", "dice", "ortho", "dense", "spat", "samp")


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """``L = ce + a_dice*dice + ortho + a_dense*dense + a_spat*spat + a_samp*samp``.

    ``terms`` holds unweighted component values except ``ortho``, which is
    already scaled by ``alpha_ortho`` as ``ortho_loss`` returns it.  Missing
    terms count as zero.  The breakdown reports the weighted contributions.
    """
    coef = {"ce": 1.0, "dice": weights.alpha_dice, "ortho": 1.0,
            "dense": weights.alpha_dense, "spat": weights.alpha_spat,
            "samp": weights.alpha_samp}
    total = None
    breakdown: dict[str, float] = {}
    for name in TERMS:
        if name not in terms or coef[name] == 0:
            breakdown[name] = 0.0
            continue
        part = coef[name] * terms[name]
        breakdown[name] = float(part.detach())
        total = part if total is None else total + part
    if total is None:
        ref = next(iter(terms.values()), None)
        total = torch.zeros((), dtype=ref.dtype if ref is not None else torch.float32)
    breakdown["total"] = float(total.detach())
    return total, breakdown


# ------------------------------------------------------------ model objective

def iou_targets(mask_logits: Tensor, gt: Tensor) -> Tensor:
    """Actual IoU of every binarised candidate against the mask, ``B x K``."""
    with torch.no_grad():
        p = (mask_logits > 0).flatten(2)
        g = gt.bool().flatten(1)[:, None]
        inter = (p & g).sum(-1).to(mask_logits.dtype)
        union = (p | g).sum(-1).to(mask_logits.dtype)
        return torch.where(union > 0, inter / union.clamp_min(1), torch.ones_like(union))


def model_losses(out, gt: Tensor, weights: LossWeights,
                 iou_weight: float = 0.0) -> tuple[Tensor, Tensor, dict[str, float]]:
    """Evaluate every configured term on a model output.

    Returns ``(objective, total, breakdown)`` where ``total`` is the weighted
    sum of the segmentation, orthogonality and alignment terms and
    ``objective`` adds the auxiliary IoU-regression term.
    """
    gt = gt.to(out.masks.dtype)
    pout = out.prompter
    feats = out.features
    terms: dict[str, Tensor] = {"ce": bce_loss(out.logits, gt)}
    if weights.alpha_dice:
        terms["dice"] = dice_loss(out.logits, gt)
    if weights.alpha_ortho and pout.t1 is not None:
        terms["ortho"] = ortho_loss(pout.t1, pout.t2, weights.alpha_ortho)
    if weights.alpha_dense:
        terms["dense"] = dense_align_loss(out.p_dense, gt, out.dense_scale)

    def text_vec(kind: str) -> Tensor:
        if kind == "t2" and pout.t2 is not None:
            return pout.t2.mean(1)
        return feats.t_sent[:, 0]

    def visual_map(kind: str) -> Tensor:
        return pout.v2_act if kind == "v2" else feats.v

    if weights.alpha_spat and weights.spat_mode != "off":
        terms["spat"] = spatial_align_loss(visual_map(weights.spat_features),
                                           text_vec(weights.spat_text), gt, weights.spat_mode)
    if weights.alpha_samp and gt.shape[0] > 1:
        terms["samp"] = sample_nce_loss(visual_map(weights.samp_features),
                                        text_vec(weights.samp_text), gt,
                                        weights.nce_temperature)
    total, breakdown = total_loss(terms, weights)
    objective = total
    if iou_weight:
        aux = F.mse_loss(out.iou_pred, iou_targets(out.masks, gt))
        objective = total + iou_weight * aux
        breakdown["iou_aux"] = float(iou_weight * aux.detach())
    breakdown["objective"] = float(objective.detach())
    return objective, total, breakdown
