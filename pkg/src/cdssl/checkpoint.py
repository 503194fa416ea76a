"""Checkpoints: named parameter arrays plus a small JSON header in one ``.npz``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_HEADER_KEY = "__header__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], kind: str, params: dict | None = None, **extra):
    header = {"format_version": FORMAT_VERSION, "kind": kind, "params": params or {}, **extra}
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    if _HEADER_KEY in payload:
        raise CheckpointError(f"parameter name {_HEADER_KEY!r} is reserved")
    payload[_HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True, default=_jsonable).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        if _HEADER_KEY not in data:
            raise CheckpointError(f"{path}: missing checkpoint header")
        header = json.loads(bytes(data[_HEADER_KEY]).decode())
        arrays = {k: data[k] for k in data.files if k != _HEADER_KEY}
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    return header, arrays


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        import dataclasses

        return dataclasses.asdict(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def save_detector(path, model) -> Path:
    params = model.get_params()
    params["loss_mask"] = _jsonable(params["loss_mask"])
    return save_checkpoint(path, model.state_arrays(), "detector", params, n_steps=model.n_steps_,
                           loss_history=model.loss_history_)


def load_detector(path):
    from .detector import AnchorDetector, LossMask

    header, arrays = load_checkpoint(path, "detector")
    params = dict(header["params"])
    params["loss_mask"] = LossMask(**params["loss_mask"])
    for k in ("anchor_scales", "aspect_ratios", "widths"):
        params[k] = tuple(params[k])
    model = AnchorDetector(**params).load_state_arrays(arrays)
    model.n_steps_ = header.get("n_steps", 0)
    model.loss_history_ = header.get("loss_history", [])
    return model


def save_translator(path, model) -> Path:
    return save_checkpoint(path, model.state_arrays(), "translator", model.get_params(),
                           loss_history=model.loss_history_)


def load_translator(path):
    from .translator import StyleTranslator

    header, arrays = load_checkpoint(path, "translator")
    model = StyleTranslator(**header["params"]).load_state_arrays(arrays)
    model.loss_history_ = header.get("loss_history", [])
    return model
