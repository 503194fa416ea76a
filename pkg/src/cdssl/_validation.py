"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .domain import AnnotatedImage, BoundingBox, ValidationError


def check_pixels(pixels, min_side: int = 1) -> np.ndarray:
    """Return ``pixels`` as a float64 HxWx3 array in [0, 1]."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 image, got shape {px.shape}")
    if min(px.shape[:2]) < min_side:
        raise ValidationError(f"image side {min(px.shape[:2])} is below the minimum {min_side}")
    if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
        raise ValidationError("pixel values must be finite and lie in [0, 1]")
    return px


def as_pixel_batch(X, min_side: int = 1) -> list[np.ndarray]:
    """Accept AnnotatedImages, HxWx3 arrays or an NxHxWx3 stack."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    elif isinstance(X, (AnnotatedImage, np.ndarray)):
        X = [X]
    out = []
    for item in X:
        px = item.pixels if isinstance(item, AnnotatedImage) else item
        out.append(check_pixels(px, min_side))
    return out


def check_images(X, y=None, domain_tag: str = "source") -> list[AnnotatedImage]:
    """Pair pixels with box lists, producing validated AnnotatedImages."""
    if y is None:
        images = []
        for i, item in enumerate(X):
            if not isinstance(item, AnnotatedImage):
                raise ValidationError("boxes (y) are required when X holds raw arrays")
            images.append(item)
        return [img.validate() for img in images]
    pixels = as_pixel_batch(X)
    y = list(y)
    if len(y) != len(pixels):
        raise ValidationError(f"{len(pixels)} images but {len(y)} box lists")
    images = []
    for i, (px, boxes) in enumerate(zip(pixels, y)):
        boxes = [b if isinstance(b, BoundingBox) else BoundingBox(*b) for b in boxes]
        images.append(AnnotatedImage(f"img_{i:05d}", px, domain_tag, boxes).validate())
    return images


def check_probabilities(p, atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValidationError("expected a probability vector over background + categories")
    if not np.isfinite(p).all() or (p < -atol).any() or abs(p.sum() - 1.0) > atol:
        raise ValidationError(f"probabilities must be non-negative and sum to 1 (sum={p.sum():.8f})")
    return p
