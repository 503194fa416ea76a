import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdssl.benchmark import build_benchmark, default_source_spec, default_target_spec
from cdssl.detector import AnchorDetector
from cdssl.domain import AnnotatedImage, BoundingBox, ValidationError, load_annotations
from cdssl.pseudo import PseudoLabelSet, PseudoLabelStore, annotate, sharpen

B = BoundingBox


def test_sharpen_argmax_above_threshold():
    assert sharpen([0.03, 0.05, 0.92], 0.6) == 2


def test_sharpen_below_threshold_is_background():
    assert sharpen([0.25, 0.40, 0.35], 0.6) == 0


def test_sharpen_strict_inequality():
    assert sharpen([0.3, 0.7], 0.7) == 0
    assert sharpen([0.3, 0.7], 0.6999) == 1


def test_sharpen_tie_break_lowest_index():
    assert sharpen([0.0, 0.5, 0.5], 0.4) == 1
    assert all(sharpen([0.1, 0.3, 0.3, 0.3], 0.2) == 1 for _ in range(5))


def test_sharpen_validates_simplex():
    with pytest.raises(ValidationError):
        sharpen([0.5, 0.6], 0.5)
    with pytest.raises(ValidationError):
        sharpen([0.5, 0.5], 1.0)


@given(st.integers(1, 6), st.floats(0.01, 0.99))
def test_sharpen_one_hot_idempotent(k, conf):
    p = np.zeros(7)
    p[k] = 1.0
    assert sharpen(p, conf) == k


def test_set_rejects_scores_not_above_threshold():
    with pytest.raises(ValidationError):
        PseudoLabelSet(0, "a", 0.6, {"x": [B(1, 0, 0, 2, 2, 0.6)]})


@pytest.fixture(scope="module")
def tiny_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    bench = build_benchmark(default_source_spec(), default_target_spec(), (30, 12, 6), 3, root)
    model = AnchorDetector(epochs=4, seed=0).fit(load_annotations(bench.source_train))
    return bench, model


def test_annotate_threshold_nesting_and_determinism(tiny_bench):
    bench, model = tiny_bench
    target = load_annotations(bench.target_train)
    low = annotate(model, target, 0.3)
    high = annotate(model, target, 0.5)
    again = annotate(model, target, 0.3)
    assert low.boxes == again.boxes
    for k in high.boxes:
        assert set(high.boxes[k]) <= set(low.boxes[k])
    assert all(b.score > 0.5 for bs in high.boxes.values() for b in bs)
    empty = annotate(model, target, 0.999)
    assert empty.n_boxes <= low.n_boxes


def test_annotate_rejects_labelled_or_mismatched_images(tiny_bench):
    bench, model = tiny_bench
    labelled = load_annotations(bench.target_val)
    with pytest.raises(ValidationError):
        annotate(model, labelled, 0.5)
    small = [AnnotatedImage("s", np.zeros((64, 64, 3)), "target", [])]
    with pytest.raises(ValidationError):
        annotate(model, small, 0.5)


def test_store_round_trip_and_monotone_rounds(tiny_bench, tmp_path):
    bench, model = tiny_bench
    target = load_annotations(bench.target_train)
    store = PseudoLabelStore(tmp_path / "pseudo", bench.target_train)
    s0 = annotate(model, target, 0.3, round=0, annotator_id="m0")
    with pytest.raises(ValidationError):
        store.write(annotate(model, target, 0.3, round=1))
    manifest = store.write(s0)
    assert manifest.header["annotator_id"] == "m0"
    back = store.read(0)
    assert (back.round, back.annotator_id, back.confidence_threshold) == (0, "m0", 0.3)
    assert back.boxes == s0.boxes
    with pytest.raises(ValidationError):
        store.write(s0)  # same round again
    store.write(annotate(model, target, 0.4, round=1, annotator_id="m1"))
    assert store.rounds() == [0, 1] and store.latest() == 1
    imgs = load_annotations(store.path(1))
    assert all(i.label_kind.round == 1 and i.domain_tag == "target" for i in imgs)
    assert imgs[0].pixels.shape == (128, 128, 3)
