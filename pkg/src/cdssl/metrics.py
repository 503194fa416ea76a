"""Detection metrics: IoU, greedy matching, all-point AP, and label-quality reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .domain import AnnotatedImage, BoundingBox, DatasetManifest, ValidationError, load_annotations


class UndefinedMetricError(ValueError):
    pass


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return float(inter / (a.area + b.area - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _score_order(preds: Sequence[BoundingBox]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(preds)), key=lambda i: -(preds[i].score if preds[i].score is not None else 0.0))


def match_detections(
    predictions: Sequence[BoundingBox],
    gt_boxes: Sequence[BoundingBox],
    iou_threshold: float = 0.5,
) -> list[tuple[BoundingBox, bool]]:
    """Greedy matching for one image.

    Predictions are visited in descending score order; each takes the
    unmatched same-category GT with the highest IoU >= ``iou_threshold``.
    Returns ``(prediction, is_tp)`` pairs in that visiting order.
    """
    used = [False] * len(gt_boxes)
    out = []
    for i in _score_order(predictions):
        p = predictions[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_boxes):
            if used[j] or g.category != p.category:
                continue
            v = iou(p, g)
            if v >= iou_threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
        out.append((p, best_j >= 0))
    return out


def precision_recall(scores: np.ndarray, tp: np.ndarray, n_gt: int):
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    return precision, recall


def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated area under a PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _per_image(preds, gts):
    """Normalise inputs to parallel lists of per-image box lists."""
    if isinstance(preds, Mapping):
        keys = list(gts.keys()) if isinstance(gts, Mapping) else None
        if keys is None or set(preds) - set(keys):
            raise ValidationError("prediction image ids do not match ground-truth ids")
        return [list(preds.get(k, [])) for k in keys], [list(gts[k]) for k in keys]
    preds, gts = list(preds), list(gts)
    if preds and isinstance(preds[0], BoundingBox) or gts and isinstance(gts[0], BoundingBox):
        return [preds], [gts]
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction lists vs {len(gts)} ground-truth lists")
    return [list(p) for p in preds], [list(g) for g in gts]


def category_flags(preds, gts, category: int, iou_threshold: float = 0.5):
    """Scores, TP flags and GT count for one category over a set of images."""
    preds, gts = _per_image(preds, gts)
    scores, flags, n_gt = [], [], 0
    for p_img, g_img in zip(preds, gts):
        p_cat = [p for p in p_img if p.category == category]
        g_cat = [g for g in g_img if g.category == category]
        n_gt += len(g_cat)
        for p, is_tp in match_detections(p_cat, g_cat, iou_threshold):
            scores.append(p.score if p.score is not None else 0.0)
            flags.append(is_tp)
    return np.asarray(scores, dtype=np.float64), np.asarray(flags, dtype=bool), n_gt


def _exact_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> Fraction:
    """All-point AP in rational arithmetic.

    Recall only moves at true positives, so the area is the sum over TPs of
    the interpolated precision (the running max from the right) times 1/n_gt.
    """
    order = np.argsort(-scores, kind="stable")
    flags = [bool(v) for v in np.asarray(tp)[order]]
    prec = []
    n_tp = 0
    for k, f in enumerate(flags, start=1):
        n_tp += f
        prec.append(Fraction(n_tp, k))
    total = Fraction(0)
    best = Fraction(0)
    for k in range(len(flags) - 1, -1, -1):
        best = max(best, prec[k])
        if flags[k]:
            total += best
    return total / n_gt


def _category_ap(preds, gts, category: int, iou_threshold: float) -> Fraction:
    scores, flags, n_gt = category_flags(preds, gts, category, iou_threshold)
    if n_gt == 0:
        raise UndefinedMetricError(f"category {category} has no ground-truth boxes")
    return _exact_ap(scores, flags, n_gt)


def average_precision(preds, gts, category: int, iou_threshold: float = 0.5) -> float:
    """All-point AP for ``category``.

    ``preds``/``gts`` are either one image's box lists, parallel lists of
    per-image box lists, or dicts keyed by image id. Raises
    UndefinedMetricError when the category has no ground truth.
    """
    return float(_category_ap(preds, gts, category, iou_threshold))


def mean_ap(preds, gts, categories: Sequence[int], iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    """mAP over categories that have ground truth, plus the per-category APs."""
    preds, gts = _per_image(preds, gts)
    exact = {}
    for c in categories:
        try:
            exact[c] = _category_ap(preds, gts, c, iou_threshold)
        except UndefinedMetricError:
            continue
    if not exact:
        raise UndefinedMetricError("no category has ground-truth boxes")
    return float(sum(exact.values()) / len(exact)), {c: float(v) for c, v in exact.items()}


# --------------------------------------------------------------------------- reports


@dataclass
class QualityBlock:
    histogram: np.ndarray  # [iou_bin, confidence_bin], 10x10 on [0,1]^2
    coverage: float
    n_gt: int
    n_pseudo: int


@dataclass
class DensityBlock:
    counts: np.ndarray  # histogram: counts[k] = images with k boxes
    mean: float


@dataclass
class EvalReport:
    per_category_ap: dict[int, float]
    mAP: float
    n_images: int
    n_gt: int
    n_predictions: int
    quality: QualityBlock | None = None
    density: DensityBlock | None = None
    extra: dict = field(default_factory=dict)

    def row(self, categories: Sequence[int] = (1, 2, 3)) -> dict:
        out = {"mAP": self.mAP}
        for c in categories:
            out[f"AP_{c}"] = self.per_category_ap.get(c, float("nan"))
        return out


def evaluate(
    predictions: Mapping[str, Sequence[BoundingBox]],
    ground_truth: Sequence[AnnotatedImage],
    categories: Sequence[int] = (1, 2, 3),
    iou_threshold: float = 0.5,
) -> EvalReport:
    gts = {img.image_id: img.boxes for img in ground_truth}
    preds = {k: list(predictions.get(k, [])) for k in gts}
    if set(predictions) - set(gts):
        raise ValidationError("predictions reference images absent from the ground truth")
    m, per_cat = mean_ap(preds, gts, categories, iou_threshold)
    return EvalReport(
        per_category_ap=per_cat,
        mAP=m,
        n_images=len(gts),
        n_gt=sum(len(v) for v in gts.values()),
        n_predictions=sum(len(v) for v in preds.values()),
    )


def quality_report(
    pseudo_boxes: Mapping[str, Sequence[BoundingBox]],
    sealed_gt: Sequence[AnnotatedImage] | Mapping[str, Sequence[BoundingBox]],
    bins: int = 10,
    coverage_iou: float = 0.5,
) -> QualityBlock:
    """IoU-confidence histogram of pseudo boxes and the GT coverage ratio.

    A pseudo box's IoU is its highest IoU with any GT box of the image
    (category-agnostic); a GT box counts as covered when some pseudo box
    overlaps it with IoU strictly above ``coverage_iou``.
    """
    if not isinstance(sealed_gt, Mapping):
        sealed_gt = {img.image_id: img.boxes for img in sealed_gt}
    if set(pseudo_boxes) != set(sealed_gt):
        missing = set(sealed_gt) ^ set(pseudo_boxes)
        raise ValidationError(f"image ids differ between pseudo set and GT: {sorted(missing)[:5]}")
    hist = np.zeros((bins, bins), dtype=np.int64)
    covered = n_gt = n_pseudo = 0
    for image_id, gt in sealed_gt.items():
        ps = list(pseudo_boxes[image_id])
        n_gt += len(gt)
        n_pseudo += len(ps)
        if not ps:
            continue
        m = iou_matrix([p.as_array() for p in ps], [g.as_array() for g in gt]) if gt else np.zeros((len(ps), 0))
        best = m.max(axis=1) if gt else np.zeros(len(ps))
        conf = np.array([p.score if p.score is not None else 1.0 for p in ps])
        ib = np.minimum((best * bins).astype(int), bins - 1)
        cb = np.minimum((conf * bins).astype(int), bins - 1)
        np.add.at(hist, (ib, cb), 1)
        if gt:
            covered += int(np.sum(m.max(axis=0) > coverage_iou))
    coverage = covered / n_gt if n_gt else 0.0
    return QualityBlock(hist, coverage, n_gt, n_pseudo)


def density_histogram(images_or_counts) -> DensityBlock:
    """Per-image object-count histogram; accepts a manifest, images, box lists or counts."""
    if isinstance(images_or_counts, (DatasetManifest, str, Path)):
        images_or_counts = load_annotations(images_or_counts, pixels=False)
    counts = []
    for item in images_or_counts:
        if isinstance(item, AnnotatedImage):
            counts.append(len(item.boxes))
        elif isinstance(item, (int, np.integer)):
            counts.append(int(item))
        else:
            counts.append(len(item))
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0:
        return DensityBlock(np.zeros(1, dtype=np.int64), 0.0)
    hist = np.bincount(counts)
    return DensityBlock(hist, float(counts.mean()))


def load_sealed_ground_truth(sealed_dir) -> list[AnnotatedImage]:
    """Boxes of the sealed target-train split (analysis only, never pixels).

    This is the single reader of the sealed directory; training code never
    calls it.
    """
    sealed_dir = Path(sealed_dir)
    if not (sealed_dir / "manifest.txt").exists():
        raise FileNotFoundError(f"sealed ground truth not found under {sealed_dir}")
    return load_annotations(sealed_dir, pixels=False)


def pseudo_label_quality(pseudo_boxes, sealed_dir, bins: int = 10) -> QualityBlock | None:
    """Quality block when the sealed GT is present, else None."""
    try:
        gt = load_sealed_ground_truth(sealed_dir)
    except FileNotFoundError:
        return None
    return quality_report(pseudo_boxes, gt, bins=bins)
