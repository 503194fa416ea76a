import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdssl.domain import AnnotatedImage, BoundingBox, ValidationError
from cdssl.metrics import (
    UndefinedMetricError,
    average_precision,
    density_histogram,
    evaluate,
    iou,
    iou_matrix,
    match_detections,
    mean_ap,
    quality_report,
)

from oracles import brute_force_ap, brute_force_flags, iou_shapely, random_ap_instance

B = BoundingBox


def test_iou_identity_disjoint_and_analytic():
    a = B(1, 0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, B(1, 20, 20, 30, 30)) == 0.0
    assert iou(a, B(1, 5, 5, 15, 15)) == 1 / 7


def test_iou_touching_edges_is_zero():
    assert iou(B(1, 0, 0, 10, 10), B(1, 10, 0, 20, 10)) == 0.0


boxes = st.tuples(
    st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 40), st.floats(0.5, 40)
).map(lambda t: B(1, t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes, boxes, st.floats(0.1, 20))
def test_iou_symmetric_and_scale_invariant(a, b, k):
    assert iou(a, b) == iou(b, a)
    scale = lambda x: B(1, x.x_min * k, x.y_min * k, x.x_max * k, x.y_max * k)  # noqa: E731
    assert iou(scale(a), scale(b)) == pytest.approx(iou(a, b), abs=1e-9)
    assert 0.0 <= iou(a, b) <= 1.0


@given(boxes, boxes)
def test_iou_matches_polygon_oracle(a, b):
    assert iou(a, b) == pytest.approx(iou_shapely(a, b), abs=1e-12)
    assert iou_matrix([a.as_array()], [b.as_array()])[0, 0] == pytest.approx(iou(a, b), abs=1e-12)


def test_match_single_exact_prediction():
    gt = [B(1, 0, 0, 10, 10)]
    assert [f for _, f in match_detections([B(1, 0, 0, 10, 10, 0.9)], gt, 0.5)] == [True]


def test_duplicate_predictions_single_match():
    gt = [B(1, 0, 0, 10, 10)]
    preds = [B(1, 0, 0, 10, 10, 0.8), B(1, 0, 0, 10, 10, 0.9)]
    out = match_detections(preds, gt, 0.5)
    assert [(p.score, f) for p, f in out] == [(0.9, True), (0.8, False)]


def test_ap_simple_cases():
    gt = [B(1, 0, 0, 10, 10)]
    assert average_precision([B(1, 0, 0, 10, 10, 0.9)], gt, 1) == 1.0
    fp_then_tp = [B(1, 50, 50, 60, 60, 0.9), B(1, 0, 0, 10, 10, 0.8)]
    assert average_precision(fp_then_tp, gt, 1) == 0.5


def test_ap_no_predictions_is_zero():
    assert average_precision([], [B(1, 0, 0, 10, 10)], 1) == 0.0


def test_zero_gt_everywhere_is_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([B(1, 0, 0, 5, 5, 0.5)], [], 1)
    with pytest.raises(UndefinedMetricError):
        mean_ap([[B(1, 0, 0, 5, 5, 0.5)]], [[]], (1, 2, 3))


def test_mean_ap_skips_categories_without_gt():
    gts = [[B(1, 0, 0, 10, 10)]]
    preds = [[B(1, 0, 0, 10, 10, 0.9), B(2, 20, 20, 30, 30, 0.9)]]
    m, per = mean_ap(preds, gts, (1, 2, 3))
    assert per == {1: 1.0} and m == 1.0


def test_metrics_equal_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(1000):
        preds, gts = random_ap_instance(rng)
        for c in (1, 2):
            pc = [p for p in preds if p.category == c]
            gc = [g for g in gts if g.category == c]
            flags = [f for _, f in match_detections(pc, gc, 0.5)]
            # match_detections returns in score order; re-order oracle flags the same way
            order = sorted(range(len(pc)), key=lambda i: -pc[i].score)
            oracle = brute_force_flags(pc, gc, 0.5)
            assert flags == [oracle[i] for i in order]
        gt_cats = sorted({g.category for g in gts})
        if not gt_cats:
            with pytest.raises(UndefinedMetricError):
                mean_ap(preds, gts, (1, 2))
            continue
        exact = {}
        for c in gt_cats:
            pc = [p for p in preds if p.category == c]
            gc = [g for g in gts if g.category == c]
            oracle = brute_force_flags(pc, gc, 0.5)
            exact[c] = brute_force_ap([p.score for p in pc], oracle, len(gc)) if pc else 0
            assert average_precision(preds, gts, c) == float(exact[c])
        m, per = mean_ap(preds, gts, (1, 2))
        assert m == float(sum(exact.values()) / len(exact))
        checked += 1
    assert checked > 500


def test_precision_envelope_is_monotone():
    from cdssl.metrics import precision_recall

    rng = np.random.default_rng(3)
    scores = rng.random(40)
    tp = rng.random(40) < 0.5
    prec, rec = precision_recall(scores, tp, 30)
    env = np.maximum.accumulate(prec[::-1])[::-1]
    assert np.all(np.diff(env) <= 0)
    assert np.all(np.diff(rec) >= 0)


def _img(i, boxes):
    return AnnotatedImage(f"im{i}", np.zeros((64, 64, 3)), "target", boxes)


def test_evaluate_report_counts():
    gt = [_img(0, [B(1, 0, 0, 10, 10)]), _img(1, [B(2, 5, 5, 20, 20), B(3, 30, 30, 40, 40)])]
    preds = {"im0": [B(1, 0, 0, 10, 10, 0.9)], "im1": [B(2, 5, 5, 20, 20, 0.8)]}
    r = evaluate(preds, gt)
    assert r.per_category_ap == {1: 1.0, 2: 1.0, 3: 0.0}
    assert r.mAP == pytest.approx(2 / 3)
    assert (r.n_images, r.n_gt, r.n_predictions) == (2, 3, 2)
    with pytest.raises(ValidationError):
        evaluate({"nope": []}, gt)


def test_quality_report_identity_and_empty():
    gt = {"a": [B(1, 0, 0, 10, 10), B(2, 20, 20, 30, 30)], "b": [B(3, 5, 5, 15, 15)]}
    same = {k: [B(b.category, b.x_min, b.y_min, b.x_max, b.y_max, 1.0) for b in v] for k, v in gt.items()}
    q = quality_report(same, gt)
    assert q.coverage == 1.0
    assert q.histogram[-1, -1] == 3 and q.histogram.sum() == 3
    assert quality_report({"a": [], "b": []}, gt).coverage == 0.0


def test_quality_report_constructed_coverage():
    gt = {"a": [B(1, 0, 0, 10, 10), B(1, 20, 20, 30, 30), B(1, 40, 40, 50, 50)]}
    pseudo = {"a": [B(1, 0, 0, 10, 11, 0.9), B(1, 21, 20, 31, 30, 0.7), B(1, 45, 45, 60, 60, 0.8)]}
    assert quality_report(pseudo, gt).coverage == pytest.approx(2 / 3)


def test_quality_report_rejects_mismatched_ids():
    with pytest.raises(ValidationError):
        quality_report({"x": []}, {"y": []})


@settings(max_examples=50, deadline=None)
@given(st.lists(boxes, min_size=1, max_size=6), st.lists(boxes, max_size=6), boxes)
def test_coverage_monotone_under_added_boxes(gt, pseudo, extra):
    score = lambda b: B(b.category, b.x_min, b.y_min, b.x_max, b.y_max, 0.9)  # noqa: E731
    base = quality_report({"a": [score(p) for p in pseudo]}, {"a": gt}).coverage
    more = quality_report({"a": [score(p) for p in pseudo] + [score(extra)]}, {"a": gt}).coverage
    assert 0.0 <= base <= more <= 1.0


def test_density_histogram():
    empty = density_histogram([[], [], []])
    assert list(empty.counts) == [3] and empty.mean == 0.0
    d = density_histogram([0, 2, 2, 5])
    assert d.counts.sum() == 4 and d.mean == pytest.approx(9 / 4)
    assert d.counts[2] == 2
