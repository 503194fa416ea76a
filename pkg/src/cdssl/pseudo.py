"""Confidence-thresholded hard pseudo labels and their versioned storage."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._validation import check_probabilities
from .domain import (
    AnnotatedImage,
    BoundingBox,
    DatasetManifest,
    ManifestEntry,
    ValidationError,
    link_images,
    load_annotations,
    pseudo,
    read_manifest,
    write_manifest,
)


def sharpen(probabilities, conf: float) -> int:
    """Hard label from a (background, cat1, ..., catC) probability vector.

    Returns the most probable foreground category when its probability is
    strictly above ``conf``, otherwise 0 (background). Ties go to the lowest
    category index.
    """
    p = check_probabilities(probabilities)
    if not 0.0 < conf < 1.0:
        raise ValidationError(f"confidence threshold must lie in (0, 1), got {conf}")
    fg = p[1:]
    k = int(np.argmax(fg))  # first maximum
    return k + 1 if fg[k] > conf else 0


@dataclass
class PseudoLabelSet:
    round: int
    annotator_id: str
    confidence_threshold: float
    boxes: dict[str, list[BoundingBox]] = field(default_factory=dict)

    def __post_init__(self):
        if self.round < 0:
            raise ValidationError("pseudo-label round must be >= 0")
        for image_id, bs in self.boxes.items():
            for b in bs:
                if b.score is None or not b.score > self.confidence_threshold:
                    raise ValidationError(
                        f"pseudo box on {image_id!r} with score {b.score} not above threshold {self.confidence_threshold}"
                    )

    @property
    def n_boxes(self) -> int:
        return sum(len(v) for v in self.boxes.values())

    def images(self, target_images: Sequence[AnnotatedImage]) -> list[AnnotatedImage]:
        """Attach this set's boxes to the (unlabeled) target images."""
        kind = pseudo(self.round)
        out = []
        for img in target_images:
            if img.image_id not in self.boxes:
                raise ValidationError(f"image {img.image_id!r} has no entry in pseudo-label round {self.round}")
            out.append(AnnotatedImage(img.image_id, img.pixels, "target", list(self.boxes[img.image_id]), kind))
        return out

    def header(self) -> dict:
        return {"round": self.round, "annotator_id": self.annotator_id, "conf": repr(float(self.confidence_threshold))}

    def save(self, directory, target_manifest: DatasetManifest) -> DatasetManifest:
        """Write pseudo annotations that point at the target manifest's images (pixels are not copied)."""
        from .domain import format_annotation

        directory = Path(directory)
        (directory / "annotations").mkdir(parents=True, exist_ok=True)
        kind = pseudo(self.round)
        h, w = _manifest_image_size(target_manifest)
        frame = np.zeros((h, w, 3))
        rel = link_images(target_manifest, directory)
        entries = []
        for e in target_manifest.entries:
            img = AnnotatedImage(e.image_id, frame, "target", self.boxes.get(e.image_id, []), kind).validate()
            ann = f"annotations/{e.image_id}.txt"
            (directory / ann).write_text(format_annotation(img))
            entries.append(ManifestEntry(e.image_id, rel[e.image_id], ann))
        manifest = DatasetManifest(
            name=f"pseudo_round{self.round}", split=target_manifest.split, domain_tag="target",
            categories=target_manifest.categories, entries=entries, root=directory,
            header={k: str(v) for k, v in self.header().items()},
        ).validate()
        write_manifest(manifest)
        return manifest

    @classmethod
    def load(cls, directory) -> "PseudoLabelSet":
        manifest = read_manifest(directory)
        h = manifest.header
        try:
            round_, annotator, conf = int(h["round"]), h["annotator_id"], float(h["conf"])
        except KeyError as exc:
            raise ValidationError(f"{directory}: pseudo-label manifest lacks header field {exc}") from None
        images = load_annotations(manifest, pixels=False)
        for img in images:
            if img.label_kind.round != round_:
                raise ValidationError(f"{img.image_id}: record round {img.label_kind.round} != set round {round_}")
        return cls(round_, annotator, conf, {img.image_id: list(img.boxes) for img in images})


def _manifest_image_size(manifest: DatasetManifest) -> tuple[int, int]:
    from .domain import load_annotation_record

    if not manifest.entries:
        return (0, 0)
    rec = load_annotation_record(manifest, manifest.entries[0])
    return rec.get("size", (0, 0))


def annotate(model, target_images, conf: float, nms_iou: float = 0.5, round: int = 0,
             annotator_id: str = "annotator") -> PseudoLabelSet:
    """Run ``model`` on unlabeled target images and keep boxes scoring above ``conf``.

    ``target_images`` is a manifest or a list of AnnotatedImages carrying no
    boxes. Each kept box is a hard label: its category is the foreground
    argmax and the soft vector is discarded.
    """
    if isinstance(target_images, DatasetManifest):
        target_images = load_annotations(target_images)
    target_images = list(target_images)
    for img in target_images:
        if img.boxes:
            raise ValidationError(f"target image {img.image_id!r} carries boxes; annotate expects the unlabeled view")
    expected = getattr(model, "image_size_", None)
    if expected is not None:
        for img in target_images:
            if (img.height, img.width) != tuple(expected):
                raise ValidationError(
                    f"image {img.image_id!r} is {img.height}x{img.width}, model was trained on {expected[0]}x{expected[1]}"
                )
    preds = model.predict(target_images, score_floor=conf, nms_iou=nms_iou)
    return PseudoLabelSet(round, annotator_id, conf, {img.image_id: p for img, p in zip(target_images, preds)})


class PseudoLabelStore:
    """Directory of pseudo-label rounds with a single writer.

    Rounds must be written in order: round 0 first, then r + 1 after r.
    """

    def __init__(self, root, target_manifest: DatasetManifest):
        self.root = Path(root)
        self.target_manifest = target_manifest

    def rounds(self) -> list[int]:
        if not self.root.exists():
            return []
        out = []
        for p in self.root.glob("round_*"):
            if (p / "manifest.txt").exists():
                out.append(int(p.name.split("_")[1]))
        return sorted(out)

    def latest(self) -> int | None:
        r = self.rounds()
        return r[-1] if r else None

    def path(self, round: int) -> Path:
        return self.root / f"round_{round:02d}"

    def write(self, labels: PseudoLabelSet) -> DatasetManifest:
        latest = self.latest()
        expected = 0 if latest is None else latest + 1
        if labels.round != expected:
            raise ValidationError(f"pseudo-label round {labels.round} cannot follow round {latest}; expected {expected}")
        return labels.save(self.path(labels.round), self.target_manifest)

    def read(self, round: int | None = None) -> PseudoLabelSet:
        round = self.latest() if round is None else round
        if round is None:
            raise FileNotFoundError(f"no pseudo-label rounds under {self.root}")
        return PseudoLabelSet.load(self.path(round))


def as_box_mapping(labels: PseudoLabelSet | Mapping[str, Sequence[BoundingBox]]) -> dict[str, list[BoundingBox]]:
    return dict(labels.boxes) if isinstance(labels, PseudoLabelSet) else {k: list(v) for k, v in labels.items()}
