"""Reference computations written independently of the package code."""

from __future__ import annotations

import math
import re
from fractions import Fraction

import numpy as np

# ---------------------------------------------------------------- metrics


def brute_iou(pred, gt) -> float:
    inter = union = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        inter += int(bool(p) and bool(g))
        union += int(bool(p) or bool(g))
    return 1.0 if union == 0 else inter / union


def brute_report(pairs):
    ious, inter_sum, union_sum = [], 0, 0
    for p, g in pairs:
        i = u = 0
        for a, b in zip(np.ravel(p), np.ravel(g)):
            i += int(bool(a) and bool(b))
            u += int(bool(a) or bool(b))
        ious.append(1.0 if u == 0 else i / u)
        inter_sum += i
        union_sum += u
    # exact rational sum of the per-sample values, rounded once
    giou = float(sum(Fraction(v) for v in ious)) / len(ious)
    ciou = 1.0 if union_sum == 0 else inter_sum / union_sum
    pr = {x: sum(1 for v in ious if v > x) / len(ious) for x in (0.5, 0.6, 0.7, 0.8, 0.9)}
    return ious, giou, ciou, pr


# ---------------------------------------------------------------- losses


def seg_closed_form(n: int) -> float:
    """BCE at p=0.5 plus smoothed dice with half the pixels positive."""
    bce = math.log(2.0)
    dice = 1.0 - (2 * 0.5 * (n / 2) + 1) / (0.5 * n + n / 2 + 1)
    return bce + dice


def nce_two_by_two(temperature: float = 1.0) -> float:
    # cosine 1 on the diagonal and 0 off it, both directions identical
    e = math.exp(1.0 / temperature)
    return -math.log(e / (e + 1.0))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------- synthetic scenes

_GRID = [["top-left", "top", "top-right"],
         ["left", "center", "right"],
         ["bottom-left", "bottom", "bottom-right"]]


def cell_of(obj_cx: float, obj_cy: float, h: int, w: int) -> str:
    return _GRID[min(2, int(3 * obj_cy / h))][min(2, int(3 * obj_cx / w))]


def parse_referring_text(text: str) -> dict:
    m = re.fullmatch(r"the (\w+) (\w+) at the ([\w-]+)", text)
    if m:
        return {"color": m[1], "shape": m[2], "position": m[3]}
    m = re.fullmatch(r"the (\w+) (\w+) (left of|right of|above|below) the (\w+) (\w+)", text)
    if m:
        return {"color": m[1], "shape": m[2], "relation": m[3],
                "anchor_color": m[4], "anchor_shape": m[5]}
    raise ValueError(f"unparseable text {text!r}")


def rasterize(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    """Pixel-centre sampling of a circle, an axis-aligned square or an
    apex-up isosceles triangle."""
    out = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            px, py = x + 0.5, y + 0.5
            dx, dy = px - cx, py - cy
            if shape == "circle":
                inside = dx * dx + dy * dy <= r * r
            elif shape == "square":
                inside = abs(dx) <= 0.85 * r and abs(dy) <= 0.85 * r
            else:
                inside = _in_triangle(px, py, cx, cy, r)
            out[y, x] = inside
    return out


def _in_triangle(px, py, cx, cy, r) -> bool:
    # apex (cx, cy - r), base corners (cx -/+ r, cy + 0.8 r)
    verts = [(cx, cy - r), (cx + r, cy + 0.8 * r), (cx - r, cy + 0.8 * r)]
    signs = []
    for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
        signs.append((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1))
    return all(s >= 0 for s in signs) or all(s <= 0 for s in signs)
