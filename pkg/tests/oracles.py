"""Independent reference implementations used as test oracles."""

import itertools
from fractions import Fraction

import numpy as np
from shapely.geometry import box as shp_box

from cdssl.domain import BoundingBox


def iou_shapely(a, b):
    pa = shp_box(a.x_min, a.y_min, a.x_max, a.y_max)
    pb = shp_box(b.x_min, b.y_min, b.x_max, b.y_max)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    return inter / union if union > 0 else 0.0


def score_order(preds):
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def brute_force_flags(preds, gts, thr=0.5):
    """Enumerate every one-to-one assignment of predictions to same-category GTs with IoU >= thr
    and keep the one whose vector of matched IoUs, read in score order, is lexicographically largest."""
    order = score_order(preds)
    options = []
    for i in order:
        cand = [None] + [j for j, g in enumerate(gts)
                         if g.category == preds[i].category and iou_shapely(preds[i], g) >= thr]
        options.append(cand)
    best, best_key = None, None
    for combo in itertools.product(*options):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(-1.0 if j is None else iou_shapely(preds[i], gts[j]) for i, j in zip(order, combo))
        if best_key is None or key > best_key:
            best, best_key = combo, key
    flags = [False] * len(preds)
    for i, j in zip(order, best):
        flags[i] = j is not None
    return flags


def brute_force_ap(scores, flags, n_gt):
    """Area under the PR curve by enumerating every score threshold and taking, for each
    recall level reached, the best precision at that recall or beyond (exact rationals)."""
    points = []
    for t in sorted(set(scores), reverse=True):
        kept = [f for s, f in zip(scores, flags) if s >= t]
        tp = sum(kept)
        points.append((Fraction(tp, n_gt), Fraction(tp, len(kept))))
    area = Fraction(0)
    prev_r = Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        p = max(p for rr, p in points if rr >= r)
        area += (r - prev_r) * p
        prev_r = r
    return area


def central_difference(f, x, eps=1e-4):
    """Central finite-difference gradient of scalar f at array x (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def closed_form_loss_gradients(logits, deltas, labels, targets, use_cls=True, use_reg=True):
    """Per-image mean softmax cross-entropy over non-ignored anchors plus mean smooth-L1
    (beta 1) over positive anchors, summed over images, with hand-derived gradients."""

    logits = np.asarray(logits, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    loss = 0.0
    gl = np.zeros_like(logits)
    gd = np.zeros_like(deltas)
    for n in range(logits.shape[0]):
        lab = labels[n]
        if use_cls:
            valid = lab >= 0
            if valid.any():
                z = logits[n] - logits[n].max(axis=1, keepdims=True)
                p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
                k = valid.sum()
                idx = np.flatnonzero(valid)
                loss += -np.log(p[idx, lab[idx]]).sum() / k
                onehot = np.zeros_like(p)
                onehot[idx, lab[idx]] = 1.0
                gl[n, idx] = (p[idx] - onehot[idx]) / k
        if use_reg:
            pos = lab > 0
            if pos.any():
                d = deltas[n, pos] - targets[n, pos]
                a = np.abs(d)
                loss += np.where(a < 1, 0.5 * d * d, a - 0.5).sum() / pos.sum()
                gd[n, pos] = np.clip(d, -1, 1) / pos.sum()
    return loss, gl, gd


def random_ap_instance(rng):
    """Up to 5 predictions and 5 GTs on a 34x34 canvas, predictions often jittered copies of GTs."""
    def rbox(score=None):
        x, y = rng.integers(0, 20, size=2)
        w, h = rng.integers(2, 14, size=2)
        return BoundingBox(int(rng.integers(1, 3)), float(x), float(y), float(x + w), float(y + h), score)

    gts = [rbox() for _ in range(rng.integers(0, 6))]
    scores = rng.permutation(np.linspace(0.05, 0.95, 19))[: rng.integers(0, 6)]
    preds = []
    for s in scores:
        if gts and rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            dx, dy = rng.integers(-3, 4, size=2)
            cat = g.category if rng.random() < 0.8 else 3 - g.category
            preds.append(BoundingBox(cat, g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy, float(s)))
        else:
            preds.append(rbox(float(s)))
    return preds, gts
