"""Shared annotation types and the on-disk dataset layout.

A dataset directory looks like::

    <root>/manifest.txt
    <root>/images/<image_id>.png
    <root>/annotations/<image_id>.txt

Annotation records are flat text so golden files diff cleanly::

    image_id: img_00003
    domain: target
    label_kind: pseudo
    round: 1
    size: 128 128
    box: 2 10.5 11.25 30 40 0.912345
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DOMAIN_TAGS = ("source", "intermediate", "target")
SPLITS = ("train", "val")
DEFAULT_CATEGORIES = ("circle", "square", "triangle")
MANIFEST_NAME = "manifest.txt"


class ValidationError(ValueError):
    """A value violates one of the annotation invariants."""


class AnnotationParseError(ValueError):
    """An on-disk record could not be parsed."""

    def __init__(self, path, line_no, message):
        self.path = Path(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass(frozen=True)
class BoundingBox:
    """Corner-format box. ``score`` is None for ground truth."""

    category: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float | None = None

    def __post_init__(self):
        if int(self.category) != self.category or self.category < 1:
            raise ValidationError(f"box category must be an integer >= 1, got {self.category!r}")
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(coords)):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {coords}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def without_score(self) -> "BoundingBox":
        return BoundingBox(self.category, self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class LabelKind:
    """Either ground truth (``round is None``) or pseudo labels of a given round."""

    round: int | None = None

    def __post_init__(self):
        if self.round is not None and (int(self.round) != self.round or self.round < 0):
            raise ValidationError(f"pseudo round must be an integer >= 0, got {self.round!r}")

    @property
    def is_pseudo(self) -> bool:
        return self.round is not None

    def __str__(self):
        return "ground_truth" if self.round is None else f"pseudo({self.round})"


GROUND_TRUTH = LabelKind()


def pseudo(round: int) -> LabelKind:
    return LabelKind(round)


@dataclass
class AnnotatedImage:
    image_id: str
    pixels: np.ndarray
    domain_tag: str
    boxes: list[BoundingBox] = field(default_factory=list)
    label_kind: LabelKind = GROUND_TRUTH

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def validate(self) -> "AnnotatedImage":
        """Raise ValidationError (naming the image) if any invariant fails."""
        try:
            _validate_image(self)
        except ValidationError as exc:
            raise ValidationError(f"image {self.image_id!r}: {exc}") from None
        return self

    def with_boxes(self, boxes, label_kind=None) -> "AnnotatedImage":
        return AnnotatedImage(
            self.image_id,
            self.pixels,
            self.domain_tag,
            list(boxes),
            self.label_kind if label_kind is None else label_kind,
        )


def _validate_image(img: AnnotatedImage):
    if not img.image_id or any(c.isspace() for c in img.image_id) or "/" in img.image_id:
        raise ValidationError("image_id must be a non-empty token without whitespace or '/'")
    px = img.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValidationError(f"pixels must be HxWx3, got shape {px.shape}")
    if px.size and (np.nanmin(px) < 0.0 or np.nanmax(px) > 1.0 or not np.isfinite(px).all()):
        raise ValidationError("pixel values must lie in [0, 1]")
    if img.domain_tag not in DOMAIN_TAGS:
        raise ValidationError(f"unknown domain tag {img.domain_tag!r}")
    if img.label_kind.is_pseudo and img.domain_tag != "target":
        raise ValidationError("pseudo labels are only allowed on target-domain images")
    h, w = img.height, img.width
    for b in img.boxes:
        if not isinstance(b, BoundingBox):
            raise ValidationError(f"expected BoundingBox, got {type(b).__name__}")
        if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
            raise ValidationError(f"box {b.as_array().tolist()} outside the {w}x{h} image")
        if img.label_kind.is_pseudo and b.score is None:
            raise ValidationError("pseudo boxes must carry a score")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: str
    annotation_path: str


@dataclass
class DatasetManifest:
    """Index of one dataset directory. Paths in ``entries`` are relative to ``root``."""

    name: str
    split: str
    domain_tag: str
    categories: tuple[str, ...]
    entries: list[ManifestEntry]
    root: Path
    header: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    @property
    def path(self) -> Path:
        return Path(self.root) / MANIFEST_NAME

    def validate(self) -> "DatasetManifest":
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValidationError(f"unknown domain tag {self.domain_tag!r}")
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise ValidationError(f"duplicate image id {e.image_id!r} in manifest {self.name!r}")
            seen.add(e.image_id)
        return self


# --------------------------------------------------------------------------- I/O


def _fmt(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


def format_annotation(img: AnnotatedImage) -> str:
    lines = [
        f"image_id: {img.image_id}",
        f"domain: {img.domain_tag}",
        f"label_kind: {'pseudo' if img.label_kind.is_pseudo else 'ground_truth'}",
    ]
    if img.label_kind.is_pseudo:
        lines.append(f"round: {img.label_kind.round}")
    lines.append(f"size: {img.height} {img.width}")
    for b in img.boxes:
        fields = [str(int(b.category)), _fmt(b.x_min), _fmt(b.y_min), _fmt(b.x_max), _fmt(b.y_max)]
        if b.score is not None:
            fields.append(_fmt(b.score))
        lines.append("box: " + " ".join(fields))
    return "\n".join(lines) + "\n"


def parse_annotation(text: str, path="<string>") -> dict:
    """Parse one annotation record into a plain dict (no pixels)."""
    rec = {"boxes": [], "round": None}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise AnnotationParseError(path, line_no, f"expected 'key: value', got {line!r}")
        key, value = key.strip(), value.strip()
        try:
            if key == "image_id":
                rec["image_id"] = value
            elif key == "domain":
                rec["domain"] = value
            elif key == "label_kind":
                if value not in ("ground_truth", "pseudo"):
                    raise ValueError(f"unknown label_kind {value!r}")
                rec["label_kind"] = value
            elif key == "round":
                rec["round"] = int(value)
            elif key == "size":
                h, w = value.split()
                rec["size"] = (int(h), int(w))
            elif key == "box":
                parts = value.split()
                if len(parts) not in (5, 6):
                    raise ValueError(f"box needs 5 or 6 fields, got {len(parts)}")
                cat = int(parts[0])
                coords = [float(p) for p in parts[1:5]]
                score = float(parts[5]) if len(parts) == 6 else None
                rec["boxes"].append(BoundingBox(cat, *coords, score=score))
            else:
                raise ValueError(f"unknown field {key!r}")
        except ValidationError as exc:
            raise ValidationError(f"{path}:{line_no}: {exc}") from None
        except ValueError as exc:
            raise AnnotationParseError(path, line_no, f"field {key!r}: {exc}") from None
    for required in ("image_id", "domain", "label_kind"):
        if required not in rec:
            raise AnnotationParseError(path, 0, f"missing field {required!r}")
    if rec["label_kind"] == "pseudo" and rec["round"] is None:
        raise AnnotationParseError(path, 0, "pseudo record without a round")
    return rec


def write_png(path, pixels: np.ndarray):
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap pixels onto the 8-bit grid so PNG storage is lossless."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255) / 255.0


def write_manifest(manifest: DatasetManifest):
    lines = [
        f"name: {manifest.name}",
        f"split: {manifest.split}",
        f"domain: {manifest.domain_tag}",
        "categories: " + " ".join(manifest.categories),
    ]
    for k, v in manifest.header.items():
        lines.append(f"meta.{k}: {v}")
    for e in manifest.entries:
        lines.append(f"entry: {e.image_id} {e.image_path} {e.annotation_path}")
    manifest.path.write_text("\n".join(lines) + "\n")


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() or not root.name.endswith(".txt") else root
    root = path.parent
    text = path.read_text()  # missing file -> FileNotFoundError
    fields: dict[str, str] = {}
    header: dict[str, str] = {}
    entries = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise AnnotationParseError(path, line_no, f"expected 'key: value', got {line!r}")
        key, value = key.strip(), value.strip()
        if key == "entry":
            parts = value.split()
            if len(parts) != 3:
                raise AnnotationParseError(path, line_no, "entry needs id, image path, annotation path")
            entries.append(ManifestEntry(*parts))
        elif key.startswith("meta."):
            header[key[5:]] = value
        elif key in ("name", "split", "domain", "categories"):
            fields[key] = value
        else:
            raise AnnotationParseError(path, line_no, f"unknown field {key!r}")
    for required in ("name", "split", "domain", "categories"):
        if required not in fields:
            raise AnnotationParseError(path, 0, f"missing field {required!r}")
    return DatasetManifest(
        name=fields["name"],
        split=fields["split"],
        domain_tag=fields["domain"],
        categories=tuple(fields["categories"].split()),
        entries=entries,
        root=root,
        header=header,
    ).validate()


def save_annotations(
    images: Sequence[AnnotatedImage],
    directory,
    *,
    name: str | None = None,
    split: str = "train",
    domain_tag: str | None = None,
    categories: Iterable[str] = DEFAULT_CATEGORIES,
    header: dict | None = None,
    write_images: bool = True,
) -> DatasetManifest:
    """Write images, one annotation record per image, and a manifest.

    With ``write_images=False`` only annotations are written and the manifest
    points at already existing image files of the same ids (used for pseudo
    label sets that share pixels with an unlabeled view).
    """
    directory = Path(directory)
    images = list(images)
    for img in images:
        img.validate()
    tags = {img.domain_tag for img in images}
    if domain_tag is None:
        if len(tags) > 1:
            raise ValidationError(f"mixed domain tags {sorted(tags)} in one dataset")
        domain_tag = tags.pop() if tags else "source"
    elif tags - {domain_tag}:
        raise ValidationError(f"images tagged {sorted(tags)} saved as {domain_tag!r}")

    (directory / "annotations").mkdir(parents=True, exist_ok=True)
    if write_images:
        (directory / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for img in images:
        ann_rel = f"annotations/{img.image_id}.txt"
        img_rel = f"images/{img.image_id}.png"
        if write_images:
            write_png(directory / img_rel, img.pixels)
        (directory / ann_rel).write_text(format_annotation(img))
        entries.append(ManifestEntry(img.image_id, img_rel, ann_rel))
    manifest = DatasetManifest(
        name=name or directory.name,
        split=split,
        domain_tag=domain_tag,
        categories=tuple(categories),
        entries=entries,
        root=directory,
        header={k: str(v) for k, v in (header or {}).items()},
    ).validate()
    write_manifest(manifest)
    return manifest


def link_images(manifest: DatasetManifest, directory) -> dict[str, str]:
    """Relative image paths from ``directory`` to the images of ``manifest``."""
    directory = Path(directory)
    return {
        e.image_id: os.path.relpath(Path(manifest.root) / e.image_path, directory)
        for e in manifest.entries
    }


def load_annotation_record(manifest: DatasetManifest, entry: ManifestEntry) -> dict:
    path = Path(manifest.root) / entry.annotation_path
    rec = parse_annotation(path.read_text(), path)
    if rec["image_id"] != entry.image_id:
        raise AnnotationParseError(path, 0, f"record id {rec['image_id']!r} != manifest id {entry.image_id!r}")
    return rec


def load_annotations(manifest: DatasetManifest | str | os.PathLike, *, pixels: bool = True) -> list[AnnotatedImage]:
    """Load every image of ``manifest`` in manifest order.

    ``pixels=False`` skips image decoding and leaves a 0x0x3 placeholder, which
    is enough for metric computations over annotations.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    out = []
    for entry in manifest.entries:
        rec = load_annotation_record(manifest, entry)
        if pixels:
            px = read_png(Path(manifest.root) / entry.image_path)
        else:
            h, w = rec.get("size", (0, 0))
            px = np.zeros((0, 0, 3))
        kind = pseudo(rec["round"]) if rec["label_kind"] == "pseudo" else GROUND_TRUTH
        img = AnnotatedImage(entry.image_id, px, rec["domain"], rec["boxes"], kind)
        if pixels:
            img.validate()
        else:
            _validate_boxes_only(img, rec.get("size"))
        out.append(img)
    return out


def _validate_boxes_only(img: AnnotatedImage, size):
    if size is None:
        return
    h, w = size
    probe = AnnotatedImage(img.image_id, np.zeros((h, w, 3)), img.domain_tag, img.boxes, img.label_kind)
    probe.validate()
