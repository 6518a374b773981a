"""IoU-based evaluation: per-sample IoU, gIoU, cIoU, Pr@X, per-category IoU."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import IMAGE_EXTS, read_mask
from .errors import EmptySetError, MissingPredictionError, ShapeError

PR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def _counts(pred, gt) -> tuple[int, int]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def iou(pred, gt) -> float:
    """|P and G| / |P or G|; two empty masks agree perfectly (1.0)."""
    inter, union = _counts(pred, gt)
    return 1.0 if union == 0 else inter / union


def giou_ciou(samples: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    ious, inter_sum, union_sum = [], 0, 0
    for p, g in samples:
        inter, union = _counts(p, g)
        ious.append(1.0 if union == 0 else inter / union)
        inter_sum += inter
        union_sum += union
    if not ious:
        raise EmptySetError("no samples to evaluate")
    ciou = 1.0 if union_sum == 0 else inter_sum / union_sum
    return _mean(ious), ciou


def _mean(values: Sequence[float]) -> float:
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum(values) / len(values)


def pr_at_x(ious: Sequence[float], x: float) -> float:
    """Fraction of IoUs strictly above ``x``."""
    if not 0.0 < x < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {x}")
    if len(ious) == 0:
        return 0.0
    return sum(1 for v in ious if v > x) / len(ious)


@dataclass
class EvalReport:
    per_sample_iou: list[tuple[str, float]]
    gIoU: float
    cIoU: float
    pr_at: dict[float, float]
    per_category_iou: dict[str, float] = field(default_factory=dict)
    intersection: int = 0
    union: int = 0

    def to_dict(self) -> dict:
        return {
            "gIoU": self.gIoU,
            "cIoU": self.cIoU,
            "pr": {f"{x:.1f}": v for x, v in sorted(self.pr_at.items())},
            "per_category": dict(sorted(self.per_category_iou.items())),
            "per_sample": [{"id": sid, "iou": v} for sid, v in self.per_sample_iou],
            "n": len(self.per_sample_iou),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def build_report(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]],
                 categories: Mapping[str, str] | None = None) -> EvalReport:
    """Report from ``(id, prediction, ground truth)`` triples."""
    if not pairs:
        raise EmptySetError("no samples to evaluate")
    per_sample, inter_sum, union_sum = [], 0, 0
    for sid, p, g in pairs:
        inter, union = _counts(p, g)
        per_sample.append((sid, 1.0 if union == 0 else inter / union))
        inter_sum += inter
        union_sum += union
    ious = [v for _, v in per_sample]
    per_cat: dict[str, float] = {}
    if categories:
        groups: dict[str, list[float]] = defaultdict(list)
        for sid, v in per_sample:
            if categories.get(sid):
                groups[categories[sid]].append(v)
        per_cat = {c: _mean(vs) for c, vs in groups.items()}
    return EvalReport(
        per_sample_iou=per_sample,
        gIoU=_mean(ious),
        cIoU=1.0 if union_sum == 0 else inter_sum / union_sum,
        pr_at={x: pr_at_x(ious, x) for x in PR_THRESHOLDS},
        per_category_iou=per_cat,
        intersection=inter_sum,
        union=union_sum,
    )


def _mask_files(folder: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS and not p.name.endswith(".dense.pgm"):
            out.setdefault(p.stem, p)
    return out


def evaluate(pred_dir: str | Path, gt_dir: str | Path,
             categories: Mapping[str, str] | None = None) -> EvalReport:
    """Compare ``pred_dir/<id>.png`` with every ground-truth mask in ``gt_dir``.

    ``gt_dir`` may be a masks folder or a dataset root containing ``masks/``.
    """
    gt_dir = Path(gt_dir)
    if (gt_dir / "masks").is_dir():
        gt_dir = gt_dir / "masks"
    gts = _mask_files(gt_dir)
    preds = _mask_files(Path(pred_dir))
    missing = [sid for sid in gts if sid not in preds]
    if missing:
        raise MissingPredictionError(missing)
    pairs = []
    for sid, gpath in gts.items():
        g = read_mask(gpath)
        pairs.append((sid, read_mask(preds[sid], size=g.shape), g))
    return build_report(pairs, categories)
