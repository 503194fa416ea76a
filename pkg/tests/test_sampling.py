import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdssl.domain import AnnotatedImage
from cdssl.sampling import BatchStream, ConfigurationError, SamplingPlan, make_batch_stream


def _pool(n, domain, prefix):
    return [AnnotatedImage(f"{prefix}{i}", np.zeros((4, 4, 3)), domain, []) for i in range(n)]


def test_plan_invariants():
    with pytest.raises(ConfigurationError):
        SamplingPlan(4, 2, 2)  # s <= t in the default regime
    with pytest.raises(ConfigurationError):
        SamplingPlan(4, 1, 3)
    with pytest.raises(ConfigurationError):
        SamplingPlan(4, 3, 2, strict=False)
    assert SamplingPlan(4, 0, 4, strict=False).ratio == "0:4"
    assert SamplingPlan.from_ratio("3:1", 8, strict=True) == SamplingPlan(8, 6, 2)


def test_exact_counts_3_to_1():
    stream = make_batch_stream(_pool(10, "source", "s"), _pool(7, "target", "t"), SamplingPlan(4, 3, 1), seed=0)
    for _ in range(100):
        batch = next(stream)
        assert [s.origin for s in batch] == ["source"] * 3 + ["target"]
    assert stream.counts == {"source": 300, "target": 100}


def test_target_only_plan():
    stream = make_batch_stream([], _pool(5, "target", "t"), SamplingPlan(4, 0, 4, strict=False), seed=0)
    assert all(s.origin == "target" for _ in range(10) for s in next(stream))


def test_empty_pseudo_pool_rejected():
    with pytest.raises(ConfigurationError):
        make_batch_stream(_pool(3, "source", "s"), [], SamplingPlan(4, 3, 1))


def test_every_image_visited_each_epoch():
    src = _pool(9, "source", "s")
    stream = make_batch_stream(src, _pool(4, "target", "t"), SamplingPlan(4, 3, 1), seed=5)
    seen = [s.image.image_id for _ in range(3) for s in next(stream)[:3]]
    assert sorted(seen) == sorted(i.image_id for i in src)


def test_stream_is_seeded():
    a = make_batch_stream(_pool(6, "source", "s"), _pool(6, "target", "t"), SamplingPlan(4, 3, 1), seed=1)
    b = make_batch_stream(_pool(6, "source", "s"), _pool(6, "target", "t"), SamplingPlan(4, 3, 1), seed=1)
    ids = lambda s: [x.image.image_id for _ in range(20) for x in next(s)]  # noqa: E731
    assert ids(a) == ids(b)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 40))
def test_ratio_exact_property(s, t, n_batches):
    plan = SamplingPlan(s + t, s, t, strict=False)
    stream = BatchStream(_pool(5, "source", "s"), _pool(3, "target", "t"), plan, seed=0)
    for _ in range(n_batches):
        next(stream)
    assert stream.counts["source"] * t == stream.counts["target"] * s
