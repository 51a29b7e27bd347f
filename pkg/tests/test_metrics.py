import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from grapetrack.dataset import BoundingBox
from grapetrack.errors import AnnotationWarning, ValidationError
from grapetrack.masks import InstanceMask
from grapetrack.metrics import (ConfusionCounts, ap_from_ranking, average_precision,
                                confusion_semantic, evaluate_dataset, iou, iou_matrix,
                                match_instances, prf1)

from helpers import (make_mask, naive_ap, naive_mask_iou, naive_match, naive_semantic,
                     random_fixture, random_mask)


def check_against_oracle(rng, thr):
    preds, scores, gts = random_fixture(rng)
    pm = [InstanceMask.from_array(b, confidence=s) for b, s in zip(preds, scores)]
    gm = [InstanceMask.from_array(b) for b in gts]
    matches, counts = match_instances(pm, gm, thr, "mask")
    expected = naive_match(preds, scores, gts, thr)
    assert [(i, j) for i, j, _ in matches] == expected
    assert counts == ConfusionCounts(len(expected), len(preds) - len(expected),
                                     len(gts) - len(expected))
    p_sem = np.zeros((16, 16), bool)
    g_sem = np.zeros((16, 16), bool)
    for b in preds:
        p_sem |= b
    for b in gts:
        g_sem |= b
    c = confusion_semantic(p_sem, g_sem)
    assert (c.tp, c.fp, c.fn) == naive_semantic(p_sem, g_sem)


def test_matching_and_semantic_match_oracle():
    rng = np.random.default_rng(77)
    for _ in range(100):
        check_against_oracle(rng, float(rng.choice([0.3, 0.5, 0.7])))


# -- PRF ----------------------------------------------------------------------

def test_prf_conventions():
    assert prf1(ConfusionCounts(0, 0, 0)) == prf1(ConfusionCounts(0, 0, 0))
    assert prf1(ConfusionCounts(0, 0, 0)).f1 == 1.0
    p = prf1(ConfusionCounts(0, 3, 0))
    assert (p.precision, p.recall, p.f1) == (0.0, 0.0, 0.0)
    p = prf1(ConfusionCounts(0, 0, 4))
    assert (p.precision, p.recall, p.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0)


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_f1_closed_form(tp, fp, fn):
    if tp + fp + fn == 0:
        return
    f = prf1(ConfusionCounts(tp, fp, fn)).f1
    assert abs(f - 2 * tp / (2 * tp + fp + fn)) <= 1e-12


# -- IoU ----------------------------------------------------------------------

def raster_box_iou(a, b, scale=1):
    # integer boxes (x, y, w, h) painted onto a grid
    grid_a = np.zeros((64, 64), bool)
    grid_b = np.zeros((64, 64), bool)
    grid_a[a[1]:a[1] + a[3], a[0]:a[0] + a[2]] = True
    grid_b[b[1]:b[1] + b[3], b[0]:b[0] + b[2]] = True
    return naive_mask_iou(grid_a, grid_b)


def test_box_iou_against_raster(rng):
    for _ in range(200):
        a = (*rng.integers(0, 30, 2), *rng.integers(1, 30, 2))
        b = (*rng.integers(0, 30, 2), *rng.integers(1, 30, 2))
        assert iou(a, b, "box") == pytest.approx(raster_box_iou(a, b), abs=1e-12)


def test_box_iou_normalised_equals_pixels():
    dims = (640, 480)
    a = BoundingBox.from_pixels(100, 100, 50, 40, dims)
    b = BoundingBox.from_pixels(120, 110, 50, 40, dims)
    assert iou(a, b, "box") == pytest.approx(iou((100, 100, 50, 40), (120, 110, 50, 40), "box"))


def test_iou_matrix_agrees_with_pairwise(rng):
    masks = [random_mask(rng, 12, 12) for _ in range(5)]
    mat = iou_matrix(masks[:3], masks[2:], "mask")
    for i in range(3):
        for j in range(3):
            assert mat[i, j] == pytest.approx(naive_mask_iou(masks[i], masks[2 + j]))
    assert mat[2, 0] == 1.0


def test_iou_matrix_shapes():
    assert iou_matrix([], [make_mask([[1]])], "mask").shape == (0, 1)
    with pytest.raises(ValidationError):
        iou(np.ones((2, 2)), np.ones((3, 3)), "mask")


# -- matching -----------------------------------------------------------------

def test_tie_on_confidence_uses_input_order():
    gt = [make_mask([[1, 1, 0, 0]])]
    preds = [make_mask([[1, 1, 1, 0]], 0.9), make_mask([[1, 1, 0, 0]], 0.9)]
    matches, counts = match_instances(preds, gt, 0.5, "mask")
    assert matches[0][:2] == (0, 0)
    assert counts == ConfusionCounts(1, 1, 0)


def test_tie_on_iou_prefers_lower_gt_index():
    gts = [make_mask([[1, 1, 0, 0]]), make_mask([[0, 0, 1, 1]])]
    pred = [make_mask([[0, 1, 1, 0]], 0.9)]
    matches, _ = match_instances(pred, gts, 0.3, "mask")
    assert matches[0][1] == 0


def test_threshold_range():
    with pytest.raises(ValueError):
        match_instances([], [], 0.0, "mask")


def test_recall_monotone_in_threshold():
    rng = np.random.default_rng(11)
    for _ in range(30):
        preds, scores, gts = random_fixture(rng)
        pm = [InstanceMask.from_array(b, confidence=s) for b, s in zip(preds, scores)]
        gm = [InstanceMask.from_array(b) for b in gts]
        tps = [match_instances(pm, gm, t, "mask")[1].tp for t in (0.3, 0.5, 0.7, 0.9)]
        assert tps == sorted(tps, reverse=True)


# -- AP -----------------------------------------------------------------------

def test_ap_examples():
    assert ap_from_ranking([True, True, True], 3) == 1.0
    assert ap_from_ranking([False, True], 1) == pytest.approx(0.5)
    assert ap_from_ranking([], 2) == 0.0
    assert ap_from_ranking([True, False], 0) == 0.0
    with pytest.warns(AnnotationWarning):
        assert ap_from_ranking([], 0) == 1.0
    # recall reaches 0.5 only: six of eleven levels at precision 1
    assert ap_from_ranking([True], 2) == pytest.approx(6 / 11)


def test_ap_against_naive(rng):
    for _ in range(200):
        n = int(rng.integers(1, 20))
        hits = list(rng.random(n) < 0.5)
        n_gt = int(rng.integers(max(sum(hits), 1), 25))
        assert ap_from_ranking(hits, n_gt) == pytest.approx(naive_ap(hits, n_gt), abs=1e-12)


def test_ap_invariant_under_confidence_rescaling(rng):
    gts = [make_mask(np.eye(8, dtype=bool)[i:i + 1].repeat(2, 0)) for i in range(0, 8, 2)]
    for _ in range(20):
        preds = [InstanceMask.from_array(m.bits, confidence=float(c))
                 for m, c in zip(gts, rng.random(len(gts)))]
        a = average_precision(preds, gts, 0.5, "mask")
        scaled = [m.with_confidence(m.confidence * 0.5) for m in preds]
        assert average_precision(scaled, gts, 0.5, "mask") == a


# -- dataset evaluation -------------------------------------------------------

def test_counts_accumulate_before_ratios():
    gt = {"a": [make_mask([[1, 0]])], "b": [make_mask([[1, 0]]), make_mask([[0, 1]])]}
    pred = {"a": [make_mask([[1, 0]], 0.95)], "b": []}
    report = evaluate_dataset(pred, gt, "instances", thresholds=(0.5,))
    (row,) = report.rows
    assert row.counts == ConfusionCounts(1, 0, 2)
    assert row.prf.recall == pytest.approx(1 / 3)


def test_confidence_filter_and_full_ranking_for_ap():
    gt = {"a": [make_mask([[1, 0]])]}
    pred = {"a": [make_mask([[1, 0]], 0.5)]}
    (row,) = evaluate_dataset(pred, gt, "instances", confidence_threshold=0.9).rows
    assert row.counts == ConfusionCounts(0, 0, 1)
    assert row.ap == 1.0


def test_semantic_report_single_row():
    gt = {"a": [make_mask([[1, 1, 0, 0]])]}
    pred = {"a": [make_mask([[0, 1, 1, 0]], 0.95)]}
    report = evaluate_dataset(pred, gt, "semantic")
    (row,) = report.rows
    assert row.iou is None and row.ap is None
    assert row.counts == ConfusionCounts(1, 1, 1)
    doc = json.loads(report.to_json())
    assert doc["rows"][0]["iou"] is None


def test_unknown_prediction_image_rejected():
    with pytest.raises(ValidationError):
        evaluate_dataset({"x": []}, {"a": []}, "boxes")


def test_missing_prediction_warns():
    with pytest.warns(AnnotationWarning):
        evaluate_dataset({}, {"a": [BoundingBox(0, 0.5, 0.5, 0.1, 0.1)]}, "boxes")


def test_report_formats():
    gt = {"a": [BoundingBox(0, 0.5, 0.5, 0.2, 0.2)]}
    pred = {"a": [BoundingBox(0, 0.5, 0.5, 0.2, 0.2, 0.95)]}
    report = evaluate_dataset(pred, gt, "boxes", thresholds=(0.3, 0.5))
    doc = json.loads(report.to_json())
    assert doc["ap_variant"] == "voc11"
    assert [r["iou"] for r in doc["rows"]] == [0.3, 0.5]
    assert '"f1": 1.000000' in report.to_json()
    lines = report.to_csv().splitlines()
    assert lines[0] == "iou,ap,precision,recall,f1,tp,fp,fn"
    assert lines[1] == "0.300000,1.000000,1.000000,1.000000,1.000000,1,0,0"


def test_workers_do_not_change_report(rng):
    gt, pred = {}, {}
    for k in range(12):
        preds, scores, gts = random_fixture(rng)
        gt[k] = [InstanceMask.from_array(b) for b in gts]
        pred[k] = [InstanceMask.from_array(b, confidence=s) for b, s in zip(preds, scores)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        one = evaluate_dataset(pred, gt, "instances", (0.3, 0.5, 0.7), workers=1)
        many = evaluate_dataset(pred, gt, "instances", (0.3, 0.5, 0.7), workers=4)
    assert one.to_json() == many.to_json()
