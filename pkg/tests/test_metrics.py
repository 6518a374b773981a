import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refseg.data import write_mask
from refseg.errors import EmptySetError, MissingPredictionError, ShapeError
from refseg.metrics import PR_THRESHOLDS, build_report, evaluate, giou_ciou, iou, pr_at_x
from oracles import brute_iou, brute_report

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "eval_report.schema.json").read_text())


def _mask_with(count: int, shape=(10, 10), offset=0) -> np.ndarray:
    m = np.zeros(shape, np.uint8)
    m.flat[offset:offset + count] = 1
    return m


def worked_example():
    """(I=50, U=100) and (I=10, U=10)."""
    p1, g1 = _mask_with(75, (10, 10)), _mask_with(75, (10, 10), offset=25)
    p2 = g2 = _mask_with(10, (10, 10))
    return [(p1, g1), (p2, g2)]


def test_iou_examples():
    m = _mask_with(30)
    assert iou(m, m) == 1.0
    assert iou(_mask_with(10), _mask_with(10, offset=50)) == 0.0
    p, g = worked_example()[0]
    assert iou(p, g) == 0.5
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ShapeError):
        iou(np.zeros((4, 4)), np.zeros((4, 5)))


def test_worked_example_global_vs_cumulative():
    giou, ciou = giou_ciou(worked_example())
    assert giou == 0.75
    assert ciou == 60 / 110


def test_giou_ciou_trivial_cases():
    m = _mask_with(7)
    assert giou_ciou([(m, m), (m, m)]) == (1.0, 1.0)
    p, g = worked_example()[0]
    assert giou_ciou([(p, g)]) == (0.5, 0.5)
    with pytest.raises(EmptySetError):
        giou_ciou([])


def test_pr_examples():
    ious = [0.55, 0.75, 0.95]
    assert pr_at_x(ious, 0.5) == 1.0
    assert pr_at_x(ious, 0.7) == 2 / 3
    assert pr_at_x(ious, 0.9) == 1 / 3
    assert pr_at_x([0.0, 0.0], 0.5) == 0.0
    assert pr_at_x([0.5], 0.5) == 0.0
    with pytest.raises(ValueError):
        pr_at_x(ious, 1.0)


def oracle_comparison(n_pairs: int, seed: int) -> bool:
    """Report from the package equals the per-pixel counting oracle exactly."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        density = rng.uniform(0.05, 0.6)
        p = (rng.random((16, 16)) < density).astype(np.uint8)
        g = (rng.random((16, 16)) < density).astype(np.uint8)
        if i % 17 == 0:
            p[:] = 0
            g[:] = 0
        pairs.append((f"s{i}", p, g))
    rep = build_report(pairs)
    ious, giou, ciou, pr = brute_report([(p, g) for _, p, g in pairs])
    return (rep.gIoU == giou and rep.cIoU == ciou and rep.pr_at == pr
            and [v for _, v in rep.per_sample_iou] == ious)


def test_report_matches_brute_force_20():
    assert oracle_comparison(20, seed=5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_iou_symmetric_and_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((6, 6)) < 0.4, rng.random((6, 6)) < 0.4
    assert iou(p, g) == iou(g, p) == brute_iou(p, g)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_pr_nonincreasing(ious):
    values = [pr_at_x(ious, x) for x in PR_THRESHOLDS]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_equal_unions_make_metrics_agree():
    g = _mask_with(20, (8, 8))
    # each prediction shifts inside the same 40-pixel window, so every union is 40
    pairs = [(_mask_with(20, (8, 8), offset=k), _mask_with(20, (8, 8), offset=20 - k))
             for k in (0, 20)] + [(g, _mask_with(20, (8, 8), offset=20))]
    assert {int((p | q).sum()) for p, q in pairs} == {40}
    giou, ciou = giou_ciou(pairs)
    assert giou == ciou


def test_report_json_and_categories():
    pairs = [("a", *worked_example()[0]), ("b", *worked_example()[1])]
    rep = build_report(pairs, {"a": "car", "b": "ship"})
    d = rep.to_dict()
    jsonschema.validate(d, SCHEMA)
    assert set(d["pr"]) == {"0.5", "0.6", "0.7", "0.8", "0.9"}
    assert d["per_category"] == {"car": 0.5, "ship": 1.0}
    assert d["gIoU"] == pytest.approx(np.mean([v for _, v in rep.per_sample_iou]))


def _write_dir(folder: Path, masks: dict) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for sid, m in masks.items():
        write_mask(folder / f"{sid}.png", m)


def test_evaluate_directories(tmp_path):
    rng = np.random.default_rng(1)
    gts = {f"id{i}": (rng.random((16, 16)) < 0.3).astype(np.uint8) for i in range(4)}
    _write_dir(tmp_path / "gt" / "masks", gts)
    _write_dir(tmp_path / "pred", gts)
    (tmp_path / "pred" / "id0.dense.pgm").write_bytes(b"P5\n1 1\n255\n\x00")
    rep = evaluate(tmp_path / "pred", tmp_path / "gt")
    assert rep.gIoU == rep.cIoU == 1.0 and all(v == 1.0 for v in rep.pr_at.values())
    (tmp_path / "pred" / "id2.png").unlink()
    with pytest.raises(MissingPredictionError, match="id2"):
        evaluate(tmp_path / "pred", tmp_path / "gt" / "masks")
