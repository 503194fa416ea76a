import numpy as np
import pytest

from cdssl.benchmark import default_source_spec, generate_images
from cdssl.checkpoint import CheckpointError, load_checkpoint, load_detector, save_checkpoint, save_detector
from cdssl.detector import AnchorDetector, LossMask


def test_round_trip_and_kind_check(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    p = save_checkpoint(tmp_path / "c.npz", arrays, "thing", {"a": (1, 2)}, note="x")
    header, back = load_checkpoint(p, "thing")
    assert header["params"] == {"a": [1, 2]} and header["note"] == "x"
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    with pytest.raises(CheckpointError):
        load_checkpoint(p, "detector")


def test_reserved_name_and_missing_header(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.npz", {"__header__": np.zeros(1)}, "k")
    np.savez(tmp_path / "raw.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "raw.npz")


def test_detector_round_trip(tmp_path):
    imgs = generate_images(default_source_spec(), 4, 0, 1, "s", "source")
    m = AnchorDetector(epochs=1, steps_per_epoch=2, loss_mask=LossMask(True, False, True, True), seed=0).fit(imgs)
    back = load_detector(save_detector(tmp_path / "d.npz", m))
    assert back.get_params() == m.get_params() and back.image_size_ == m.image_size_
    np.testing.assert_array_equal(m.predict_proba(imgs[:1])[0], back.predict_proba(imgs[:1])[0])
    assert back.loss_history_ == m.loss_history_
