"""Single-stage anchor detector with per-origin loss masking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_pixel_batch, check_images
from .domain import AnnotatedImage, BoundingBox, ValidationError
from .metrics import iou_matrix

logger = logging.getLogger(__name__)

BOX_CODER_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
MAX_DELTA_LOG = math.log(1000.0 / 16)
ORIGINS = ("source", "target")  # "source" covers every GT-labelled pool (source or intermediate)


class TrainingDivergenceError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 16
    scales: tuple[float, ...] = (16.0, 28.0)
    aspect_ratios: tuple[float, ...] = (1.0,)
    iou_positive: float = 0.5
    iou_negative: float = 0.3

    def __post_init__(self):
        if not self.iou_negative < self.iou_positive:
            raise ValidationError("iou_negative must be below iou_positive")
        if not self.scales or min(self.scales) <= 0:
            raise ValidationError("anchor scales must be positive")
        if not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise ValidationError("aspect ratios must be positive")
        if self.stride <= 0:
            raise ValidationError("stride must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass(frozen=True)
class LossMask:
    """Which loss heads are active for GT-labelled ("source") and pseudo-labelled ("target") images."""

    source_classification: bool = True
    source_regression: bool = True
    target_classification: bool = True
    target_regression: bool = True

    def __post_init__(self):
        if not any((self.source_classification, self.source_regression,
                    self.target_classification, self.target_regression)):
            raise ValidationError("a LossMask must enable at least one loss term")

    def flags(self, origin: str) -> tuple[bool, bool]:
        if origin in ("source", "intermediate", "source-like"):
            return self.source_classification, self.source_regression
        if origin == "target":
            return self.target_classification, self.target_regression
        raise ValidationError(f"unknown origin {origin!r}")

    def describe(self) -> str:
        def part(cls, reg):
            return "both" if cls and reg else "cls" if cls else "reg" if reg else "none"

        return f"source:{part(self.source_classification, self.source_regression)}," \
               f"target:{part(self.target_classification, self.target_regression)}"


FULL_MASK = LossMask()


# --------------------------------------------------------------------------- anchors & targets


def grid_size(image_size, stride) -> tuple[int, int]:
    h, w = image_size
    return h // stride, w // stride


def generate_anchors(config: AnchorConfig, image_size) -> np.ndarray:
    """(N, 4) corner anchors, cell-major (row, col) then (scale, ratio).

    Anchors may extend past the image border.
    """
    gh, gw = grid_size(image_size, config.stride)
    shapes = []
    for s in config.scales:
        for r in config.aspect_ratios:
            shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
    shapes = np.asarray(shapes, dtype=np.float64)
    cy, cx = np.meshgrid((np.arange(gh) + 0.5) * config.stride, (np.arange(gw) + 0.5) * config.stride, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    ctr = np.repeat(centers, len(shapes), axis=0)
    wh = np.tile(shapes, (len(centers), 1))
    return np.concatenate([ctr - wh / 2, ctr + wh / 2], axis=1)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray, weights=BOX_CODER_WEIGHTS) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + bw / 2
    by = boxes[:, 1] + bh / 2
    wx, wy, ww, wh = weights
    return np.stack([wx * (bx - ax) / aw, wy * (by - ay) / ah, ww * np.log(bw / aw), wh * np.log(bh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, weights=BOX_CODER_WEIGHTS) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    wx, wy, ww, wh = weights
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, MAX_DELTA_LOG)
    dh = np.minimum(deltas[:, 3] / wh, MAX_DELTA_LOG)
    cx, cy = ax + dx * aw, ay + dy * ah
    w, h = aw * np.exp(dw), ah * np.exp(dh)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


IGNORE = -1


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (A,) category per anchor, 0 background, IGNORE for ignored
    deltas: np.ndarray  # (A, 4) regression targets (zeros where not positive)

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def weights(self) -> np.ndarray:
        return (self.labels != IGNORE).astype(np.float64)


def assign_targets(anchors: np.ndarray, gt_boxes: Sequence[BoundingBox], config: AnchorConfig) -> AnchorTargets:
    """Max-IoU anchor labelling with argmax-anchor rescue for every GT."""
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float64)
    if not gt_boxes:
        labels[:] = 0
        return AnchorTargets(labels, deltas)
    gt = np.array([g.as_array() for g in gt_boxes])
    cats = np.array([g.category for g in gt_boxes], dtype=np.int64)
    m = iou_matrix(anchors, gt)
    best_gt = m.argmax(axis=1)
    best_iou = m.max(axis=1)
    labels[best_iou < config.iou_negative] = 0
    pos = best_iou >= config.iou_positive
    # every GT keeps its best anchor(s), even below the positive threshold
    for j in range(len(gt)):
        col = m[:, j]
        top = col.max()
        if top <= 0:
            continue
        pos[col == top] = True
    labels[pos] = cats[best_gt[pos]]
    deltas[pos] = encode_boxes(anchors[pos], gt[best_gt[pos]])
    return AnchorTargets(labels, deltas)


# --------------------------------------------------------------------------- loss


def detection_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    labels: torch.Tensor,
    delta_targets: torch.Tensor,
    origin: str = "source",
    mask: LossMask = FULL_MASK,
) -> torch.Tensor:
    """Masked detection loss summed over images.

    Shapes: logits (N, A, C+1), deltas (N, A, 4), labels (N, A) with IGNORE
    entries, delta_targets (N, A, 4); 2-D inputs are treated as one image.
    Each image contributes mean cross-entropy over its non-ignored anchors
    plus mean smooth-L1 over its positive anchors; a disabled term is an
    exact zero with no gradient path.
    """
    if logits.dim() == 2:
        logits, deltas, labels, delta_targets = (t.unsqueeze(0) for t in (logits, deltas, labels, delta_targets))
    use_cls, use_reg = mask.flags(origin)
    total = logits.new_zeros(())
    if use_cls:
        valid = labels != IGNORE
        ce = F.cross_entropy(logits.flatten(0, 1), labels.clamp(min=0).flatten(), reduction="none").view(labels.shape)
        n_valid = valid.sum(dim=1)
        per_image = (ce * valid).sum(dim=1) / n_valid.clamp(min=1)
        total = total + per_image.sum()
    if use_reg:
        pos = labels > 0
        sl1 = F.smooth_l1_loss(deltas, delta_targets, reduction="none", beta=1.0).sum(dim=2)
        n_pos = pos.sum(dim=1)
        per_image = (sl1 * pos).sum(dim=1) / n_pos.clamp(min=1)
        total = total + per_image.sum()
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite detection loss (origin={origin}, images={labels.shape[0]}, "
            f"positives={int((labels > 0).sum())}, max|logit|={float(logits.detach().abs().max()):.3g})"
        )
    return total


def loss_and_gradients(logits, deltas, labels, delta_targets, origin="source", mask=FULL_MASK):
    """Loss value plus its gradients w.r.t. logits and deltas, as float64 numpy arrays."""
    lg = torch.as_tensor(np.asarray(logits, dtype=np.float64)).requires_grad_(True)
    dl = torch.as_tensor(np.asarray(deltas, dtype=np.float64)).requires_grad_(True)
    lab = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    tgt = torch.as_tensor(np.asarray(delta_targets, dtype=np.float64))
    loss = detection_loss(lg, dl, lab, tgt, origin, mask)
    if loss.requires_grad:
        g_logits, g_deltas = torch.autograd.grad(loss, (lg, dl), allow_unused=True)
    else:
        g_logits = g_deltas = None
    g_logits = np.zeros_like(lg.detach().numpy()) if g_logits is None else g_logits.numpy()
    g_deltas = np.zeros_like(dl.detach().numpy()) if g_deltas is None else g_deltas.numpy()
    return float(loss.detach()), g_logits, g_deltas


def sample_anchors(labels: torch.Tensor, per_image: int, generator: torch.Generator) -> torch.Tensor:
    """Keep at most ``per_image`` labelled anchors per image, positives capped at half.

    Dropped anchors become IGNORE for this step only.
    """
    labels = labels.clone()
    for r in range(labels.shape[0]):
        pos = torch.nonzero(labels[r] > 0).flatten()
        neg = torch.nonzero(labels[r] == 0).flatten()
        n_pos = min(len(pos), per_image // 2)
        if len(pos) > n_pos:
            drop = pos[torch.randperm(len(pos), generator=generator)[n_pos:]]
            labels[r, drop] = IGNORE
        n_neg = per_image - n_pos
        if len(neg) > n_neg:
            drop = neg[torch.randperm(len(neg), generator=generator)[n_neg:]]
            labels[r, drop] = IGNORE
    return labels


# --------------------------------------------------------------------------- network


class DetectorNet(nn.Module):
    """Four stride-2 conv stages to stride 16, one refinement conv, 1x1 heads."""

    def __init__(self, n_anchors: int, n_classes: int, widths=(16, 32, 64, 64)):
        super().__init__()
        layers, c_in = [], 3
        for c in widths:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.GroupNorm(4, c), nn.ReLU(inplace=True)]
            c_in = c
        layers += [nn.Conv2d(c_in, c_in, 3, padding=1), nn.GroupNorm(4, c_in), nn.ReLU(inplace=True)]
        self.backbone = nn.Sequential(*layers)
        self.cls_head = nn.Conv2d(c_in, n_anchors * (n_classes + 1), 1)
        self.reg_head = nn.Conv2d(c_in, n_anchors * 4, 1)
        self.n_anchors = n_anchors
        self.n_classes = n_classes
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.cls_head.weight, std=0.01)
        nn.init.normal_(self.reg_head.weight, std=0.01)
        # background prior so early training is not swamped by negatives
        with torch.no_grad():
            b = self.cls_head.bias.view(n_anchors, n_classes + 1)
            b[:, 0] = math.log(n_classes * 99.0)

    def forward(self, x: torch.Tensor, grid=None):
        f = self.backbone(x - 0.5)
        if grid is not None:
            f = f[:, :, : grid[0], : grid[1]]
        n, _, gh, gw = f.shape
        logits = self.cls_head(f).permute(0, 2, 3, 1).reshape(n, gh * gw * self.n_anchors, self.n_classes + 1)
        deltas = self.reg_head(f).permute(0, 2, 3, 1).reshape(n, gh * gw * self.n_anchors, 4)
        return logits, deltas


# --------------------------------------------------------------------------- inference helpers


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ov = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def postprocess(probs: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, image_size,
                score_floor: float, nms_iou: float, max_detections: int = 100) -> list[BoundingBox]:
    """Decode one image's anchor outputs into scored, clipped, NMS-filtered boxes."""
    h, w = image_size
    fg = probs[:, 1:]
    cats = fg.argmax(axis=1) + 1  # lowest index wins ties
    scores = fg.max(axis=1)
    keep = scores > score_floor
    if not keep.any():
        return []
    boxes = decode_boxes(anchors[keep], deltas[keep])
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    scores, cats = scores[keep], cats[keep]
    ok = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    boxes, scores, cats = boxes[ok], scores[ok], cats[ok]
    out = []
    for c in np.unique(cats):
        idx = np.flatnonzero(cats == c)
        for k in nms(boxes[idx], scores[idx], nms_iou):
            j = idx[k]
            out.append(BoundingBox(int(c), *map(float, boxes[j]), score=float(min(max(scores[j], 0.0), 1.0))))
    out.sort(key=lambda b: -b.score)
    return out[:max_detections]


# --------------------------------------------------------------------------- estimator


@dataclass
class Sample:
    """One training image with its labels and origin ("source" or "target")."""

    image: AnnotatedImage
    origin: str = "source"


class AnchorDetector(BaseEstimator):
    """Toy single-stage detector.

    ``fit`` accepts annotated images (all treated as GT-labelled) or, via
    ``stream``, an iterator of batches of :class:`Sample`.
    """

    def __init__(
        self,
        n_categories: int = 3,
        stride: int = 16,
        anchor_scales=(16.0, 28.0),
        aspect_ratios=(1.0,),
        iou_positive: float = 0.5,
        iou_negative: float = 0.3,
        widths=(16, 32, 64, 64),
        epochs: int = 12,
        steps_per_epoch: int | None = None,
        batch_size: int = 4,
        learning_rate: float = 2e-3,
        weight_decay: float = 0.0,
        anchor_batch: int | None = 32,
        grad_clip: float = 10.0,
        loss_mask: LossMask = FULL_MASK,
        score_floor: float = 0.05,
        nms_iou: float = 0.5,
        max_detections: int = 100,
        seed: int = 0,
    ):
        self.n_categories = n_categories
        self.stride = stride
        self.anchor_scales = anchor_scales
        self.aspect_ratios = aspect_ratios
        self.iou_positive = iou_positive
        self.iou_negative = iou_negative
        self.widths = widths
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.anchor_batch = anchor_batch
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.loss_mask = loss_mask
        self.score_floor = score_floor
        self.nms_iou = nms_iou
        self.max_detections = max_detections
        self.seed = seed

    @property
    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(self.stride, tuple(self.anchor_scales), tuple(self.aspect_ratios),
                            self.iou_positive, self.iou_negative)

    def _init_network(self):
        torch.manual_seed(self.seed)
        cfg = self.anchor_config
        self.network_ = DetectorNet(cfg.anchors_per_cell, self.n_categories, tuple(self.widths))
        self.anchor_config_ = cfg
        self.n_steps_ = 0
        self.loss_history_ = []

    def fit(self, X=None, y=None, *, stream: Iterable | None = None, n_steps: int | None = None,
            warm_start: bool = False):
        """Train from images (``X`` with ``y`` box lists or AnnotatedImage boxes) or a batch stream.

        Total optimisation steps default to ``epochs * steps_per_epoch`` with
        ``steps_per_epoch = ceil(len(X) / batch_size)``.
        """
        if not isinstance(self.loss_mask, LossMask):
            raise ValidationError("loss_mask must be a LossMask")
        if stream is None:
            if X is None:
                raise ValidationError("fit needs images or a batch stream")
            images = check_images(X, y)
            from .sampling import SamplingPlan, make_batch_stream

            plan = SamplingPlan(self.batch_size, self.batch_size, 0, strict=False)
            stream = make_batch_stream(images, None, plan, seed=self.seed)
            n_ref = len(images)
        else:
            n_ref = None
        steps_per_epoch = self.steps_per_epoch or (math.ceil(n_ref / self.batch_size) if n_ref else None)
        if n_steps is None:
            if steps_per_epoch is None:
                raise ValidationError("steps_per_epoch or n_steps is required when training from a stream")
            n_steps = self.epochs * steps_per_epoch
        if not (warm_start and hasattr(self, "network_")):
            self._init_network()
        self._train(iter(stream), n_steps, steps_per_epoch or n_steps)
        return self

    def _prepare(self, sample: Sample, cache: dict):
        img = sample.image
        key = (img.image_id, img.domain_tag, str(img.label_kind), sample.origin)
        hit = cache.get(key)
        if hit is not None:
            return hit
        h, w = img.height, img.width
        anchors = self._anchors_for((h, w))
        tg = assign_targets(anchors, img.boxes, self.anchor_config_)
        hit = (
            torch.from_numpy(np.ascontiguousarray(img.pixels.transpose(2, 0, 1), dtype=np.float32)),
            torch.from_numpy(tg.labels),
            torch.from_numpy(tg.deltas.astype(np.float32)),
        )
        cache[key] = hit
        return hit

    def _anchors_for(self, size):
        if not hasattr(self, "_anchor_cache"):
            self._anchor_cache = {}
        key = (tuple(size), self.anchor_config_)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(self.anchor_config_, size)
        return self._anchor_cache[key]

    def _train(self, batches: Iterator, n_steps: int, steps_per_epoch: int):
        net = self.network_
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate, weight_decay=self.weight_decay)
        gen = torch.Generator().manual_seed(int(self.seed))
        decay_at = int(round(n_steps * 2 / 3))
        cache: dict = {}
        epoch_losses = []
        for step in range(n_steps):
            if step == decay_at:
                for g in opt.param_groups:
                    g["lr"] = self.learning_rate * 0.1
            batch = next(batches)
            if step == 0:
                self.image_size_ = (batch[0].image.height, batch[0].image.width)
            items = [self._prepare(s, cache) for s in batch]
            origins = ["target" if s.origin == "target" else "source" for s in batch]
            x = torch.stack([it[0] for it in items])
            labels = torch.stack([it[1] for it in items])
            tgts = torch.stack([it[2] for it in items])
            if self.anchor_batch:
                labels = sample_anchors(labels, self.anchor_batch, gen)
            logits, deltas = net(x, grid_size(x.shape[2:], self.stride))
            loss = logits.new_zeros(())
            for origin in ORIGINS:
                rows = [k for k, o in enumerate(origins) if o == origin]
                if rows:
                    idx = torch.tensor(rows)
                    loss = loss + detection_loss(logits[idx], deltas[idx], labels[idx], tgts[idx],
                                                 origin, self.loss_mask)
            loss = loss / len(batch)
            total = float(loss.detach())
            if not math.isfinite(total) or total > 1e4:
                raise TrainingDivergenceError(f"detector loss {total} at step {step}")
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
                if self.grad_clip:
                    nn.utils.clip_grad_norm_(net.parameters(), self.grad_clip)
                opt.step()
            epoch_losses.append(total)
            self.n_steps_ += 1
            if (step + 1) % steps_per_epoch == 0 or step + 1 == n_steps:
                self.loss_history_.append(float(np.mean(epoch_losses)))
                epoch_losses = []
        net.eval()

    # ---------------------------------------------------------------- inference

    def _forward(self, X):
        check_is_fitted(self, "network_")
        px = as_pixel_batch(X)
        out = []
        with torch.no_grad():
            for start in range(0, len(px), 32):
                chunk = px[start : start + 32]
                shapes = {p.shape for p in chunk}
                if len(shapes) == 1:
                    x = torch.from_numpy(np.stack([p.transpose(2, 0, 1) for p in chunk]).astype(np.float32))
                    grid = grid_size(x.shape[2:], self.stride)
                    logits, deltas = self.network_(x, grid)
                    probs = torch.softmax(logits.double(), dim=-1).numpy()
                    for k, p in enumerate(chunk):
                        out.append((probs[k], deltas[k].double().numpy(), p.shape[:2]))
                else:
                    for p in chunk:
                        out.extend(self._forward([p]))
        return out

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per-anchor softmax over background + categories, one (A, C+1) array per image."""
        return [p for p, _, _ in self._forward(X)]

    def predict(self, X, score_floor: float | None = None, nms_iou: float | None = None) -> list[list[BoundingBox]]:
        floor = self.score_floor if score_floor is None else score_floor
        thr = self.nms_iou if nms_iou is None else nms_iou
        out = []
        for probs, deltas, size in self._forward(X):
            anchors = self._anchors_for(size)
            out.append(postprocess(probs, deltas, anchors, size, floor, thr, self.max_detections))
        return out

    # ---------------------------------------------------------------- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "network_")
        out = {k: v.detach().numpy().copy() for k, v in self.network_.state_dict().items()}
        if hasattr(self, "image_size_"):
            out["image_size"] = np.asarray(self.image_size_, dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self._init_network()
        arrays = dict(arrays)
        size = arrays.pop("image_size", None)
        if size is not None:
            self.image_size_ = tuple(int(v) for v in size)
        self.network_.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()})
        self.network_.eval()
        return self


def infer(model: AnchorDetector, image, score_floor: float = 0.05, nms_iou: float = 0.5) -> list[BoundingBox]:
    return model.predict([image], score_floor=score_floor, nms_iou=nms_iou)[0]


def train_detector(samples_or_stream, *, epochs: int = 12, mask: LossMask = FULL_MASK, seed: int = 0,
                   steps_per_epoch: int | None = None, **params) -> AnchorDetector:
    """Functional wrapper: images/samples or a batch stream in, fitted detector out."""
    model = AnchorDetector(epochs=epochs, loss_mask=mask, seed=seed, steps_per_epoch=steps_per_epoch, **params)
    if isinstance(samples_or_stream, (list, tuple)):
        return model.fit(samples_or_stream)
    return model.fit(stream=samples_or_stream)
