"""Multi-round self-training: annotator on the labelled pool, then pseudo-label/retrain rounds.

Nothing in this module reads target-train ground truth. Label-quality
numbers (coverage) are obtained through ``metrics.pseudo_label_quality``,
which returns None when the sealed directory is absent.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import save_detector
from .detector import AnchorDetector, FULL_MASK, LossMask
from .domain import AnnotatedImage, ValidationError
from .metrics import EvalReport, QualityBlock, evaluate, pseudo_label_quality
from .pseudo import PseudoLabelSet, annotate
from .sampling import ConfigurationError, SamplingPlan, make_batch_stream

logger = logging.getLogger(__name__)

COMBINATIONS = ("source", "intermediate")


@dataclass(frozen=True)
class ConfidenceSchedule:
    """Per-round confidence thresholds; entry k labels the set consumed by round k + 1."""

    thresholds: tuple[float, ...] = (0.6, 0.8, 0.9)

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if not th:
            raise ConfigurationError("confidence schedule is empty")
        for t in th:
            if not 0.0 < t < 1.0:
                raise ConfigurationError(f"threshold {t} outside (0, 1)")
        if any(b < a for a, b in zip(th, th[1:])):
            raise ConfigurationError(f"confidence schedule must be non-decreasing, got {list(th)}")

    def __len__(self):
        return len(self.thresholds)

    def at(self, round: int) -> float:
        # rounds past the end reuse the last value (only the final, unconsumed set can hit this)
        return self.thresholds[min(round, len(self.thresholds) - 1)]


@dataclass(frozen=True)
class SelfTrainConfig:
    rounds: int = 3
    schedule: ConfidenceSchedule = field(default_factory=ConfidenceSchedule)
    plan: SamplingPlan = field(default_factory=SamplingPlan)
    combination: str = "source"
    detector: dict = field(default_factory=dict)
    loss_mask: LossMask = FULL_MASK
    fine_tune: bool = False
    early_stop: bool = True
    patience: int = 2
    nms_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")
        if len(self.schedule) < self.rounds:
            raise ConfigurationError(f"schedule has {len(self.schedule)} thresholds for {self.rounds} rounds")
        if self.combination not in COMBINATIONS:
            raise ConfigurationError(f"combination must be one of {COMBINATIONS}, got {self.combination!r}")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")

    def replace(self, **changes) -> "SelfTrainConfig":
        return dataclasses.replace(self, **changes)

    def detector_params(self, **extra) -> dict:
        params = {"seed": self.seed, **self.detector, **extra}
        return params


@dataclass
class SelfTrainData:
    """In-memory pools. ``source`` and ``intermediate`` carry GT boxes; ``target`` none."""

    source: list[AnnotatedImage]
    target: list[AnnotatedImage]
    target_val: list[AnnotatedImage]
    intermediate: list[AnnotatedImage] | None = None

    def __post_init__(self):
        for img in self.target:
            if img.boxes:
                raise ValidationError(f"target-train image {img.image_id!r} carries boxes")

    def labeled_pool(self, combination: str) -> list[AnnotatedImage]:
        if combination == "intermediate":
            if self.intermediate is None:
                raise ConfigurationError("combination 'intermediate' needs an intermediate domain")
            return self.intermediate
        return self.source

    @classmethod
    def from_benchmark(cls, bench, intermediate=None) -> "SelfTrainData":
        from .domain import load_annotations

        inter = load_annotations(intermediate) if intermediate is not None and not isinstance(intermediate, list) \
            else intermediate
        return cls(load_annotations(bench.source_train), load_annotations(bench.target_train),
                   load_annotations(bench.target_val), inter)


@dataclass
class RoundRecord:
    round: int
    model: AnchorDetector
    labels: PseudoLabelSet
    report: EvalReport
    quality: QualityBlock | None = None
    checkpoint: Path | None = None

    def row(self, categories=(1, 2, 3)) -> dict:
        out = {"round": self.round, **self.report.row(categories)}
        out["coverage"] = "" if self.quality is None else self.quality.coverage
        out["pseudo_boxes"] = self.labels.n_boxes
        out["threshold"] = self.labels.confidence_threshold
        return out


@dataclass
class SelfTrainResult:
    history: list[RoundRecord]
    stopped_early: bool = False

    def best(self) -> RoundRecord:
        return max(self.history, key=lambda r: r.report.mAP)

    def table(self) -> list[dict]:
        return [r.row() for r in self.history]


def steps_per_epoch(plan: SamplingPlan, n_labeled: int, n_pseudo: int) -> int:
    """One epoch = one pass over the larger pool at the full batch size, for every split."""
    return max(1, math.ceil(max(n_labeled, n_pseudo) / plan.batch_size))


def _evaluate(model, val) -> EvalReport:
    preds = model.predict(val)
    return evaluate({img.image_id: p for img, p in zip(val, preds)}, val)


def initialize_annotator(config: SelfTrainConfig, annotator_pool: Sequence[AnnotatedImage],
                         target: Sequence[AnnotatedImage], model: AnchorDetector | None = None,
                         annotator_id: str = "round00"):
    """Train on the labelled annotator pool only and pseudo-label the target at threshold 0.

    ``annotator_pool`` is the intermediate domain for DT+ST and raw source for
    the ST-only arm. A pre-fitted ``model`` is used as is.
    """
    if model is None:
        model = AnchorDetector(**config.detector_params()).fit(list(annotator_pool))
    labels = annotate(model, target, config.schedule.at(0), config.nms_iou, round=0, annotator_id=annotator_id)
    return model, labels


def run_round(model: AnchorDetector, labels: PseudoLabelSet, config: SelfTrainConfig,
              labeled_pool: Sequence[AnnotatedImage], target: Sequence[AnnotatedImage],
              target_val: Sequence[AnnotatedImage] | None = None, plan: SamplingPlan | None = None,
              loss_mask: LossMask | None = None):
    """Train on labelled pool + pseudo(r), re-annotate at threshold r+1, evaluate on target val.

    Returns ``(model, PseudoLabelSet(r + 1), EvalReport | None)``.
    """
    r = labels.round
    if r + 1 > max(config.rounds, 1):
        raise ConfigurationError(f"round {r + 1} exceeds the configured {config.rounds} rounds")
    plan = plan or config.plan
    pseudo_pool = labels.images(target) if plan.pseudo > 0 else []
    labeled = list(labeled_pool) if plan.labeled > 0 else []
    spe = steps_per_epoch(plan, len(labeled), len(pseudo_pool))
    stream = make_batch_stream(labeled, pseudo_pool, plan, seed=config.seed + 1000 * (r + 1))
    params = config.detector_params(loss_mask=loss_mask or config.loss_mask, steps_per_epoch=spe)
    if config.fine_tune:
        new = AnchorDetector(**params)
        new.load_state_arrays(model.state_arrays())
        new.fit(stream=stream, warm_start=True)
    else:
        new = AnchorDetector(**params).fit(stream=stream)
    new_labels = annotate(new, target, config.schedule.at(r + 1), config.nms_iou, round=r + 1,
                          annotator_id=f"round{r + 1:02d}")
    report = _evaluate(new, target_val) if target_val is not None else None
    return new, new_labels, report


HISTORY_FIELDS = ("round", "mAP", "AP_1", "AP_2", "AP_3", "coverage", "pseudo_boxes", "threshold")


def write_history(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def run(config: SelfTrainConfig, data: SelfTrainData, *, annotator_pool: Sequence[AnnotatedImage] | None = None,
        annotator: AnchorDetector | None = None, out_dir=None, sealed_dir=None, store=None) -> SelfTrainResult:
    """Annotator initialisation followed by up to ``config.rounds`` rounds.

    The annotator trains on ``annotator_pool`` (default: the intermediate
    domain when present, else source). Each round's labelled pool follows
    ``config.combination``. When ``out_dir`` is given, ``history.csv`` and
    per-round checkpoints are written after every round, so a failure leaves
    the partial history on disk. ``sealed_dir`` only feeds the coverage
    column; it may be missing.
    """
    if annotator_pool is None:
        annotator_pool = data.intermediate if data.intermediate is not None else data.source
    labeled = data.labeled_pool(config.combination)
    out_dir = Path(out_dir) if out_dir is not None else None
    history: list[RoundRecord] = []

    def record(r, model, labels, report):
        quality = pseudo_label_quality(labels.boxes, sealed_dir) if sealed_dir is not None else None
        ckpt = None
        if out_dir is not None:
            ckpt = save_detector(out_dir / "checkpoints" / f"round_{r:02d}.npz", model)
        if store is not None:
            store.write(labels)
        history.append(RoundRecord(r, model, labels, report, quality, ckpt))
        if out_dir is not None:
            write_history([h.row() for h in history], out_dir / "history.csv")
        logger.info("round %d: mAP %.4f, %d pseudo boxes", r, report.mAP, labels.n_boxes)

    model, labels = initialize_annotator(config, annotator_pool, data.target, annotator)
    record(0, model, labels, _evaluate(model, data.target_val))
    drops = 0
    stopped = False
    for r in range(1, config.rounds + 1):
        model, labels, report = run_round(model, labels, config, labeled, data.target, data.target_val)
        prev = history[-1].report.mAP
        record(r, model, labels, report)
        drops = drops + 1 if report.mAP < prev else 0
        if config.early_stop and drops >= config.patience and r < config.rounds:
            logger.info("stopping after round %d: val mAP dropped %d rounds in a row", r, drops)
            stopped = True
            break
    return SelfTrainResult(history, stopped)
