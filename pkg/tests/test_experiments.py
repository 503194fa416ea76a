import csv

import pytest

from cdssl.experiments import ExperimentConfig, Lab, ResultTable, majority, run_mask_matrix, run_sampling_sweep
from cdssl.sampling import ConfigurationError

TINY = dict(seeds=(0,), sizes=(12, 8, 6), rounds=1, translator={"epochs": 1, "steps_per_epoch": 2, "ngf": 4, "ndf": 4},
            detector={"epochs": 1})


def test_config_round_trip(tmp_path):
    import yaml

    cfg = ExperimentConfig(seeds=(1, 2), target={"style": {"fog_alpha": 0.1}})
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    back = ExperimentConfig.from_yaml(path)
    assert back == cfg
    assert back.target_spec().style.fog_alpha == 0.1
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"sedes": [0]})
    with pytest.raises(ConfigurationError):
        ExperimentConfig(seeds=())


def test_selftrain_config_follows_experiment():
    st = ExperimentConfig(ratio="3:1", batch_size=8, schedule=(0.5, 0.7, 0.9)).selftrain_config(3)
    assert (st.plan.labeled, st.plan.pseudo, st.seed) == (6, 2, 3)
    assert st.schedule.at(1) == 0.7


def test_result_table_wide_and_incomplete(tmp_path):
    rows = [{"arm": a, "seed": s, "mAP": v} for a, s, v in
            [("A", 0, 0.1), ("A", 1, 0.3), ("B", 0, 0.5), ("B", 1, 0.7)]]
    t = ResultTable("t", rows, ["A", "B"], [0, 1])
    assert t.wide()[0] == {"arm": "A", "seed_0": 0.1, "seed_1": 0.3, "mean": pytest.approx(0.2)}
    paths = t.save(tmp_path)
    with open(paths["wide"]) as fh:
        assert [r["arm"] for r in csv.DictReader(fh)] == ["A", "B"]
    partial = ResultTable("p", rows[:3], ["A", "B"], [0, 1])
    assert partial.incomplete() == [("B", 1)] and "wide" not in partial.save(tmp_path)


def test_majority():
    assert majority([True, True, False]) and not majority([True, False, False])
    assert majority([True, False, False], k=1)


def test_lab_memoises_on_disk(tmp_path):
    cfg = ExperimentConfig(**TINY, out_dir=str(tmp_path))
    lab = Lab(cfg, 0)
    first = lab.baseline()
    assert lab.baseline() is first
    again = Lab(cfg, 0).baseline()  # reloaded from the checkpoint
    import numpy as np

    np.testing.assert_array_equal(first.predict_proba(lab.target_val[:1])[0], again.predict_proba(lab.target_val[:1])[0])


def test_sampling_and_mask_tables(tmp_path):
    cfg = ExperimentConfig(**TINY, out_dir=str(tmp_path), ratios=("0:4", "3:1"))
    labs = {0: Lab(cfg, 0)}
    s = run_sampling_sweep(cfg, labs=labs)
    assert s.arms == ["0:4", "3:1"] and not s.incomplete()
    m = run_mask_matrix(cfg, labs=labs)
    assert len(m.arms) == 9
    # both arms use the same mask and ratio, hence the same trained round
    assert m.value("target_both", 0) == m.value("source_both", 0)
    assert (tmp_path / "tables" / "mask.csv").exists()
