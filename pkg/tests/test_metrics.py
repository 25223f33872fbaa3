import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowdet.metrics import (IOU_THRESHOLDS, DegenerateBoxError, ap_evaluate, giou, in_stratum, iou,
                             latency_bench, size_stratum)

FIXTURE = Path(__file__).parent / "fixtures" / "ap_fixture.json"


def load_fixture():
    return json.loads(FIXTURE.read_text())


def test_iou_hand_case():
    assert abs(iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) < 1e-9


def test_giou_hand_case():
    assert abs(giou([0, 0, 2, 2], [1, 1, 3, 3]) - (-5 / 63)) < 1e-9


def test_identical_and_disjoint():
    assert iou([1, 2, 5, 7], [1, 2, 5, 7]) == 1.0
    assert giou([1, 2, 5, 7], [1, 2, 5, 7]) == 1.0
    assert iou([0, 0, 1, 1], [5, 5, 6, 6]) == 0.0
    assert giou([0, 0, 1, 1], [1000, 1000, 1001, 1001]) < -0.999


def test_degenerate_box_rejected():
    with pytest.raises(DegenerateBoxError):
        iou([0, 0, 0, 2], [0, 0, 1, 1])
    with pytest.raises(DegenerateBoxError):
        giou([0, 0, 1, 1], [3, 3, 2, 4])


_box = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40)).map(
    lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]])


@given(_box, _box)
def test_overlap_symmetry_and_bounds(a, b):
    assert abs(iou(a, b) - iou(b, a)) < 1e-12
    assert 0.0 <= iou(a, b) <= 1.0
    assert -1.0 <= giou(a, b) <= iou(a, b) + 1e-12


def test_ap_fixture_matches_hand_derivation():
    fx = load_fixture()
    rep = ap_evaluate(fx["detections"], fx["ground_truth"], fx["categories"])
    assert abs(rep.ap50 - fx["hand_derivation"]["ap50"]) < 1e-12
    assert abs(rep.ap50 - (34 * 1.0 + 67 * 0.6) / 101) < 1e-12
    curve = rep.pr_curves[1]["precision"]
    assert curve[:34] == [1.0] * 34
    assert np.allclose(curve[34:], 0.6)


def test_perfect_detections_give_ap_one():
    fx = load_fixture()
    dets = [dict(g, score=1.0 - 0.1 * i) for i, g in enumerate(fx["ground_truth"])]
    rep = ap_evaluate(dets, fx["ground_truth"], fx["categories"])
    assert rep.ap == 1.0 and rep.ap50 == 1.0 and rep.ap_s == 1.0


def test_no_detections_give_zero():
    fx = load_fixture()
    rep = ap_evaluate([], fx["ground_truth"], fx["categories"])
    assert rep.ap == 0.0 and rep.ap50 == 0.0


def test_ap_non_increasing_over_thresholds():
    fx = load_fixture()
    rep = ap_evaluate(fx["detections"], fx["ground_truth"], fx["categories"])
    assert len(rep.ap_per_iou) == len(IOU_THRESHOLDS)
    assert all(a >= b - 1e-12 for a, b in zip(rep.ap_per_iou, rep.ap_per_iou[1:]))
    assert abs(rep.ap - np.mean(rep.ap_per_iou)) < 1e-12


def test_lowest_ranked_false_positive_does_not_change_ap50():
    fx = load_fixture()
    base = ap_evaluate(fx["detections"], fx["ground_truth"], fx["categories"]).ap50
    extra = fx["detections"] + [{"image_id": 2, "category_id": 1, "bbox": [60, 60, 5, 5], "score": 0.0}]
    assert ap_evaluate(extra, fx["ground_truth"], fx["categories"]).ap50 == base


def test_unknown_category_is_error():
    fx = load_fixture()
    bad = fx["detections"] + [{"image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1], "score": 0.1}]
    with pytest.raises(KeyError):
        ap_evaluate(bad, fx["ground_truth"], fx["categories"])


@given(st.floats(0.01, 1e6))
def test_strata_partition(area):
    hits = [in_stratum(area, s) for s in ("small", "medium", "large")]
    assert sum(bool(h) for h in hits) == 1
    assert size_stratum(area) == ("small", "medium", "large")[hits.index(True)]


def test_strata_boundaries():
    assert size_stratum(32**2 - 1) == "small"
    assert size_stratum(32**2) == "medium"
    assert size_stratum(96**2) == "medium"
    assert size_stratum(96**2 + 1) == "large"


def test_large_stratum_only_counts_large_objects():
    gts = [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]},
           {"image_id": 1, "category_id": 1, "bbox": [100, 100, 120, 120]}]
    dets = [dict(gts[1], score=0.9)]
    rep = ap_evaluate(dets, gts, [1])
    assert rep.ap_l == 1.0 and rep.ap_s == 0.0
    assert rep.gt_counts == {"all": 2, "small": 1, "medium": 0, "large": 1}


def test_latency_report():
    rep = latency_bench(lambda: sum(range(1000)), iters=20, warmup=10)
    assert abs(rep.fps - 1000.0 / rep.mean_ms) < 1e-9
    assert rep.p50_ms <= rep.p95_ms
    with pytest.raises(ValueError):
        latency_bench(lambda: None, iters=5, warmup=9)
