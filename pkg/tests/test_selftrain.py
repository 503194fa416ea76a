import csv
import shutil

import numpy as np
import pytest

import cdssl.selftrain as selftrain
from cdssl.benchmark import build_benchmark, default_source_spec, default_target_spec
from cdssl.detector import AnchorDetector
from cdssl.domain import AnnotatedImage, BoundingBox, ValidationError, load_annotations
from cdssl.metrics import EvalReport, load_sealed_ground_truth
from cdssl.pseudo import PseudoLabelSet, PseudoLabelStore
from cdssl.sampling import ConfigurationError, SamplingPlan
from cdssl.selftrain import (
    ConfidenceSchedule,
    SelfTrainConfig,
    SelfTrainData,
    run,
    steps_per_epoch,
)
from cdssl.translator import StyleTranslator, translate_images

from fence import SealedFence

DET = {"epochs": 2}


def _bench(root, seed=0):
    return build_benchmark(default_source_spec(), default_target_spec(), (24, 16, 12), seed, root)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return _bench(tmp_path_factory.mktemp("st") / "bench")


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        ConfidenceSchedule(())
    with pytest.raises(ConfigurationError):
        ConfidenceSchedule((0.8, 0.6))
    with pytest.raises(ConfigurationError):
        ConfidenceSchedule((0.0, 0.5))
    s = ConfidenceSchedule((0.6, 0.8))
    assert (s.at(0), s.at(1), s.at(5)) == (0.6, 0.8, 0.8)
    with pytest.raises(ConfigurationError):
        SelfTrainConfig(rounds=3, schedule=s)
    with pytest.raises(ConfigurationError):
        SelfTrainConfig(combination="both")


def test_steps_per_epoch_covers_larger_pool():
    assert steps_per_epoch(SamplingPlan(4, 3, 1), 500, 500) == 125
    assert steps_per_epoch(SamplingPlan(4, 3, 1), 10, 3) == 3


def test_data_rejects_labelled_target():
    img = AnnotatedImage("t", np.zeros((8, 8, 3)), "target", [BoundingBox(1, 0, 0, 2, 2)])
    with pytest.raises(ValidationError):
        SelfTrainData([], [img], [])
    with pytest.raises(ConfigurationError):
        SelfTrainData([], [], []).labeled_pool("intermediate")


def test_run_writes_history_and_checkpoints(bench, tmp_path):
    cfg = SelfTrainConfig(rounds=2, detector=DET, early_stop=False)
    store = PseudoLabelStore(tmp_path / "pseudo", bench.target_train)
    res = run(cfg, SelfTrainData.from_benchmark(bench), out_dir=tmp_path / "run", sealed_dir=bench.sealed_dir,
              store=store)
    assert [h.round for h in res.history] == [0, 1, 2]
    assert [h.labels.confidence_threshold for h in res.history] == [0.6, 0.8, 0.9]
    with open(tmp_path / "run" / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["round"] for r in rows] == ["0", "1", "2"]
    assert all(r["coverage"] != "" for r in rows)
    assert sorted(p.name for p in (tmp_path / "run" / "checkpoints").iterdir()) == \
        ["round_00.npz", "round_01.npz", "round_02.npz"]
    assert store.rounds() == [0, 1, 2]


def test_partial_history_survives_failure(bench, tmp_path, monkeypatch):
    real = selftrain.run_round

    def flaky(model, labels, *a, **k):
        if labels.round == 1:
            raise RuntimeError("boom")
        return real(model, labels, *a, **k)

    monkeypatch.setattr(selftrain, "run_round", flaky)
    with pytest.raises(RuntimeError):
        run(SelfTrainConfig(rounds=3, detector=DET), SelfTrainData.from_benchmark(bench), out_dir=tmp_path)
    with open(tmp_path / "history.csv") as fh:
        assert [r["round"] for r in csv.DictReader(fh)] == ["0", "1"]


def _report(m):
    return EvalReport({1: m, 2: m, 3: m}, m, 1, 1, 1)


def test_early_stop_after_consecutive_drops(monkeypatch):
    maps = iter([0.4, 0.3, 0.2, 0.5])
    model = AnchorDetector()
    dummy = lambda r, th: PseudoLabelSet(r, f"a{r}", th, {})  # noqa: E731
    monkeypatch.setattr(selftrain, "initialize_annotator", lambda cfg, pool, tgt, m: (model, dummy(0, 0.6)))
    monkeypatch.setattr(selftrain, "_evaluate", lambda m, v: _report(0.5))
    monkeypatch.setattr(selftrain, "run_round",
                        lambda m, lab, cfg, *a, **k: (model, dummy(lab.round + 1, 0.9), _report(next(maps))))
    cfg = SelfTrainConfig(rounds=4, schedule=ConfidenceSchedule((0.6, 0.7, 0.8, 0.9)))
    res = run(cfg, SelfTrainData([], [], []))
    assert res.stopped_early and [h.round for h in res.history] == [0, 1, 2]
    maps = iter([0.4, 0.3, 0.2, 0.5])
    res = run(cfg.replace(early_stop=False), SelfTrainData([], [], []))
    assert not res.stopped_early and len(res.history) == 5


def test_history_is_deterministic(tmp_path):
    def once(d):
        b = _bench(tmp_path / d / "bench", seed=4)
        run(SelfTrainConfig(rounds=2, detector=DET, seed=4), SelfTrainData.from_benchmark(b), out_dir=tmp_path / d,
            sealed_dir=b.sealed_dir)
        return (tmp_path / d / "history.csv").read_bytes()

    assert once("a") == once("b")


def test_fence_catches_reads_outside_the_evaluator(bench, monkeypatch):
    fence = SealedFence(bench.sealed_dir)
    fence.install(monkeypatch)
    with pytest.raises(AssertionError):
        load_annotations(bench.sealed_dir)
    assert load_sealed_ground_truth(bench.sealed_dir)  # the evaluator may read it


def test_pipeline_runs_with_sealed_split_deleted(tmp_path, monkeypatch):
    b = _bench(tmp_path / "bench", seed=2)
    shutil.rmtree(b.sealed_dir.parent)
    fence = SealedFence(b.sealed_dir)
    fence.install(monkeypatch)
    data = SelfTrainData.from_benchmark(b)
    g = StyleTranslator(epochs=1, steps_per_epoch=2, seed=0).fit(data.source, data.target)
    data.intermediate = translate_images(g, data.source)
    res = run(SelfTrainConfig(rounds=2, detector=DET), data, out_dir=tmp_path / "run", sealed_dir=b.sealed_dir)
    assert len(res.history) == 3 and all(h.quality is None for h in res.history)
    assert not fence.violations
