"""Synthetic paired-domain shape benchmark.

Each domain differs from the other in *style* (brightness, contrast, noise,
fog, background texture) and in *content* (object count, size, category
mix). Target-train ground truth is written to a separate sealed directory
read only by the evaluator.
"""

from __future__ import annotations

import dataclasses
import logging
import shutil
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .domain import (
    DEFAULT_CATEGORIES,
    AnnotatedImage,
    BoundingBox,
    DatasetManifest,
    ValidationError,
    quantize,
    save_annotations,
)
from .metrics import iou

logger = logging.getLogger(__name__)

CATEGORY_NAMES = {1: "circle", 2: "square", 3: "triangle"}
# fill intensity per category before style effects
FILL_INTENSITY = {1: 0.9, 2: 0.7, 3: 0.5}
BACKGROUND_LEVEL = 0.15
TEXTURE_AMPLITUDE = 0.05
MAX_ATTEMPTS = 1000
MAX_GT_IOU = 0.7


class GenerationError(RuntimeError):
    pass


class DomainGapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class StyleParams:
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0
    fog_alpha: float = 0.0
    texture_frequency: float = 2.0

    def validate(self):
        if not -0.5 <= self.brightness_offset <= 0.5:
            raise ValidationError("brightness_offset must lie in [-0.5, 0.5]")
        if not 0.0 < self.contrast_scale <= 2.0:
            raise ValidationError("contrast_scale must lie in (0, 2]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0.0 <= self.fog_alpha <= 1.0:
            raise ValidationError("fog_alpha must lie in [0, 1]")
        if self.texture_frequency <= 0:
            raise ValidationError("texture_frequency must be > 0")
        return self


@dataclass(frozen=True)
class ContentParams:
    count_mean: float = 3.0  # Poisson lambda before truncation
    count_max: int = 8
    size_min: float = 12.0
    size_max: float = 36.0
    category_mixture: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    def validate(self, image_size=(128, 128)):
        if self.count_mean <= 0:
            raise ValidationError("count_mean (lambda) must be > 0")
        if self.count_mean > self.count_max:
            raise ValidationError("count_mean must not exceed count_max")
        if self.size_min < 4:
            raise ValidationError("size_min must be >= 4 pixels")
        if self.size_max > min(image_size) / 2:
            raise ValidationError("size_max must be <= min(H, W) / 2")
        if self.size_min > self.size_max:
            raise ValidationError("size_min must not exceed size_max")
        mix = np.asarray(self.category_mixture, dtype=np.float64)
        if mix.ndim != 1 or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
            raise ValidationError("category_mixture must be a probability vector summing to 1")
        return self

    def count_pmf(self) -> np.ndarray:
        """Truncated Poisson pmf over 0..count_max."""
        k = np.arange(self.count_max + 1)
        from scipy.stats import poisson

        pmf = poisson.pmf(k, self.count_mean)
        return pmf / pmf.sum()


@dataclass(frozen=True)
class DomainSpec:
    name: str = "source"
    style: StyleParams = field(default_factory=StyleParams)
    content: ContentParams = field(default_factory=ContentParams)
    image_size: tuple[int, int] = (128, 128)
    categories: tuple[str, ...] = DEFAULT_CATEGORIES

    def validate(self):
        self.style.validate()
        self.content.validate(self.image_size)
        if len(self.content.category_mixture) != len(self.categories):
            raise ValidationError("category_mixture length must equal the number of categories")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["categories"] = list(self.categories)
        d["content"]["category_mixture"] = list(self.content.category_mixture)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "DomainSpec | None" = None) -> "DomainSpec":
        """Build a spec from a (possibly partial) dict, overriding ``base``."""
        base = base or cls()
        style = dataclasses.replace(base.style, **d.get("style", {}))
        content_kw = dict(d.get("content", {}))
        if "category_mixture" in content_kw:
            content_kw["category_mixture"] = tuple(content_kw["category_mixture"])
        content = dataclasses.replace(base.content, **content_kw)
        kw = {k: v for k, v in d.items() if k not in ("style", "content")}
        if "image_size" in kw:
            kw["image_size"] = tuple(kw["image_size"])
        if "categories" in kw:
            kw["categories"] = tuple(kw["categories"])
        return dataclasses.replace(base, style=style, content=content, **kw).validate()


def default_source_spec() -> DomainSpec:
    return DomainSpec(
        name="source",
        style=StyleParams(
            brightness_offset=0.05, contrast_scale=1.0, noise_sigma=0.01, fog_alpha=0.0, texture_frequency=2.0
        ),
        content=ContentParams(count_mean=3.0, count_max=8, size_min=12.0, size_max=36.0,
                              category_mixture=(1 / 3, 1 / 3, 1 / 3)),
    ).validate()


def default_target_spec() -> DomainSpec:
    return DomainSpec(
        name="target",
        style=StyleParams(
            brightness_offset=-0.1, contrast_scale=0.7, noise_sigma=0.05, fog_alpha=0.3, texture_frequency=8.0
        ),
        content=ContentParams(count_mean=6.0, count_max=12, size_min=12.0, size_max=30.0,
                              category_mixture=(0.4, 0.35, 0.25)),
    ).validate()


def scene_rng(dataset_seed: int, image_index: int, stream: int = 0) -> np.random.Generator:
    """Per-image generator derived from (dataset_seed, stream, image_index)."""
    return np.random.default_rng(np.random.SeedSequence([int(dataset_seed) & (2**64 - 1), int(stream), int(image_index)]))


# --------------------------------------------------------------------------- rendering


def _shape_mask(category: int, box: BoundingBox, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if category == 1:
        cx, cy = (box.x_min + box.x_max) / 2, (box.y_min + box.y_max) / 2
        r = box.width / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if category == 2:
        return (xx >= box.x_min) & (xx <= box.x_max) & (yy >= box.y_min) & (yy <= box.y_max)
    if category == 3:
        # apex at top centre, base on the bottom edge
        t = (yy - box.y_min) / box.height
        half = t * box.width / 2
        cx = (box.x_min + box.x_max) / 2
        return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half)
    raise ValidationError(f"no renderer for category {category}")


def _background(style: StyleParams, size, rng: np.random.Generator) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    proj = (xx * np.cos(theta) + yy * np.sin(theta)) / max(h, w)
    wave = np.sin(2 * np.pi * style.texture_frequency * proj[..., None] + phase)
    return BACKGROUND_LEVEL + TEXTURE_AMPLITUDE * wave


def fog_layer(size, rng: np.random.Generator, grid: int = 4) -> np.ndarray:
    """Smooth low-frequency field in roughly [0.4, 0.8], shared across channels."""
    h, w = size
    coarse = rng.uniform(0.4, 0.8, size=(grid, grid))
    field_ = ndimage.zoom(coarse, (h / grid, w / grid), order=3, mode="nearest")[:h, :w]
    return np.clip(field_, 0.0, 1.0)[..., None]


def apply_style(pixels: np.ndarray, style: StyleParams, seed=None) -> np.ndarray:
    """Apply brightness/contrast, fog blend and Gaussian noise, then clip to [0, 1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    px = np.asarray(pixels, dtype=np.float64)
    out = style.contrast_scale * (px - 0.5) + 0.5 + style.brightness_offset
    if style.fog_alpha > 0:
        out = out + style.fog_alpha * (fog_layer(px.shape[:2], rng) - px)
    if style.noise_sigma > 0:
        out = out + rng.normal(0.0, style.noise_sigma, size=px.shape)
    return np.clip(out, 0.0, 1.0)


def _sample_boxes(spec: DomainSpec, rng: np.random.Generator) -> list[BoundingBox]:
    c = spec.content
    h, w = spec.image_size
    n = int(rng.choice(c.count_max + 1, p=c.count_pmf()))
    cats = np.arange(1, len(spec.categories) + 1)
    boxes: list[BoundingBox] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"could not place {n} shapes within {MAX_ATTEMPTS} attempts (spec too dense)")
        s = float(np.exp(rng.uniform(np.log(c.size_min), np.log(c.size_max))))
        cat = int(rng.choice(cats, p=np.asarray(c.category_mixture)))
        x0 = float(rng.uniform(0, w - s))
        y0 = float(rng.uniform(0, h - s))
        cand = BoundingBox(cat, x0, y0, x0 + s, y0 + s)
        if all(iou(cand, b) <= MAX_GT_IOU for b in boxes):
            boxes.append(cand)
    return boxes


def render(spec: DomainSpec, boxes, rng: np.random.Generator) -> np.ndarray:
    """Clean canvas: textured background plus shapes painted in list order."""
    h, w = spec.image_size
    canvas = _background(spec.style, (h, w), rng)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for b in boxes:
        mask = _shape_mask(b.category, b, yy, xx)
        canvas[mask] = FILL_INTENSITY.get(b.category, 0.8)
    return canvas


def sample_scene(spec: DomainSpec, dataset_seed: int, image_index: int, *, stream: int = 0,
                 image_id: str | None = None, domain_tag: str | None = None) -> AnnotatedImage:
    """Generate one styled image with exact ground-truth boxes.

    Identical ``(dataset_seed, stream, image_index)`` always yields an
    identical image; pixels are snapped to the 8-bit grid.
    """
    rng = scene_rng(dataset_seed, image_index, stream)
    boxes = _sample_boxes(spec, rng)
    clean = render(spec, boxes, rng)
    styled = quantize(apply_style(clean, spec.style, rng))
    tag = domain_tag or ("target" if spec.name == "target" else "source")
    return AnnotatedImage(image_id or f"{spec.name}_{image_index:05d}", styled, tag, boxes)


def generate_images(spec: DomainSpec, n: int, dataset_seed: int, stream: int, prefix: str,
                    domain_tag: str, n_jobs: int | None = None) -> list[AnnotatedImage]:
    def one(i):
        return sample_scene(spec, dataset_seed, i, stream=stream, image_id=f"{prefix}_{i:05d}", domain_tag=domain_tag)

    if n_jobs and n_jobs != 1:
        from joblib import Parallel, delayed

        return Parallel(n_jobs=n_jobs)(delayed(one)(i) for i in range(n))
    return [one(i) for i in range(n)]


# --------------------------------------------------------------------------- benchmark

STREAM_SOURCE_TRAIN, STREAM_TARGET_TRAIN, STREAM_TARGET_VAL = 1, 2, 3


@dataclass
class Benchmark:
    root: Path
    source_train: DatasetManifest
    target_train: DatasetManifest  # unlabeled view
    target_val: DatasetManifest
    sealed_dir: Path  # target-train GT, evaluator only

    @classmethod
    def open(cls, root) -> "Benchmark":
        from .domain import read_manifest

        root = Path(root)
        return cls(
            root=root,
            source_train=read_manifest(root / "source_train"),
            target_train=read_manifest(root / "target_train"),
            target_val=read_manifest(root / "target_val"),
            sealed_dir=root / "sealed" / "target_train_gt",
        )


def build_benchmark(
    source_spec: DomainSpec,
    target_spec: DomainSpec,
    sizes=(500, 500, 200),
    dataset_seed: int = 0,
    root="benchmark",
    n_jobs: int | None = None,
) -> Benchmark:
    """Write source-train, target-train (unlabeled + sealed GT) and target-val sets under ``root``."""
    source_spec.validate()
    target_spec.validate()
    if source_spec.style == target_spec.style or source_spec.content == target_spec.content:
        warnings.warn(
            "source and target specs share style or content parameters; the benchmark has no full domain gap",
            DomainGapWarning,
            stacklevel=2,
        )
    n_src, n_tgt, n_val = sizes
    root = Path(root)
    for sub in ("source_train", "target_train", "target_val", "sealed"):
        if (root / sub).exists():
            shutil.rmtree(root / sub)
    cats = source_spec.categories
    meta = {"dataset_seed": dataset_seed}

    src = generate_images(source_spec, n_src, dataset_seed, STREAM_SOURCE_TRAIN, "src", "source", n_jobs)
    source_train = save_annotations(src, root / "source_train", name="source_train", split="train",
                                    categories=cats, header=meta)
    del src

    tgt = generate_images(target_spec, n_tgt, dataset_seed, STREAM_TARGET_TRAIN, "tgt", "target", n_jobs)
    target_train = save_annotations([t.with_boxes([]) for t in tgt], root / "target_train",
                                    name="target_train", split="train", categories=cats,
                                    header={**meta, "view": "unlabeled"})
    sealed_dir = root / "sealed" / "target_train_gt"
    save_annotations(tgt, sealed_dir, name="target_train_gt", split="train", categories=cats,
                     header={**meta, "view": "sealed_gt"}, write_images=False)
    _point_sealed_at_unlabeled_images(sealed_dir, target_train)
    del tgt

    val = generate_images(target_spec, n_val, dataset_seed, STREAM_TARGET_VAL, "val", "target", n_jobs)
    target_val = save_annotations(val, root / "target_val", name="target_val", split="val",
                                  categories=cats, header=meta)

    import yaml

    (root / "benchmark.yaml").write_text(yaml.safe_dump({
        "dataset_seed": int(dataset_seed),
        "sizes": [int(n_src), int(n_tgt), int(n_val)],
        "source": source_spec.to_dict(),
        "target": target_spec.to_dict(),
    }, sort_keys=True))
    logger.info("benchmark written to %s (%d/%d/%d images)", root, n_src, n_tgt, n_val)
    return Benchmark(root, source_train, target_train, target_val, sealed_dir)


def _point_sealed_at_unlabeled_images(sealed_dir: Path, target_train: DatasetManifest):
    """Sealed GT shares pixels with the unlabeled view instead of duplicating PNGs."""
    from .domain import ManifestEntry, read_manifest, write_manifest, link_images

    sealed = read_manifest(sealed_dir)
    rel = link_images(target_train, sealed_dir)
    sealed.entries = [ManifestEntry(e.image_id, rel[e.image_id], e.annotation_path) for e in sealed.entries]
    write_manifest(sealed)

