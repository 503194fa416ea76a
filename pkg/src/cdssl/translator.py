"""Patch-restricted cycle-consistent style translation.

Generators and discriminators only ever see ``patch_size`` crops during
training; the fully convolutional generator is then run on whole images.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_pixel_batch, check_pixels
from .domain import AnnotatedImage, DatasetManifest, ValidationError, load_annotations, quantize, save_annotations
from .sampling import ConfigurationError

logger = logging.getLogger(__name__)

ALLOWED_PATCH_SIZES = (32, 64, 128)
_EPS = 1e-3
PIXEL_BUDGET = 32 * 32 * 16  # crop pixels per step when batch_size is None


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


def _conv(c_in, c_out, k=3, stride=1):
    return nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, padding_mode="reflect")


class _ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(_conv(c, c), nn.LeakyReLU(0.2, inplace=True), _conv(c, c))

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder-decoder: three stride-2 stages, two residual blocks, three upsampling stages.

    The decoder predicts a per-pixel change in logit space, so the output
    always stays inside (0, 1).
    """

    def __init__(self, ngf: int = 16):
        super().__init__()
        c1, c2, c3 = ngf, 2 * ngf, 4 * ngf
        act = lambda: nn.LeakyReLU(0.2, inplace=True)  # noqa: E731
        self.encoder = nn.Sequential(
            _conv(3, c1), act(),
            _conv(c1, c1, stride=2), act(),
            _conv(c1, c2, stride=2), act(),
            _conv(c2, c3, stride=2), act(),
        )
        self.blocks = nn.Sequential(_ResBlock(c3), _ResBlock(c3))
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(c3, c2), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(c2, c1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(c1, c1), act(),
        )
        self.head = _conv(c1 + 3, 3)

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % 8, (-w) % 8
        xp = F.pad(x, (0, pw, 0, ph), mode="reflect") if ph or pw else x
        f = self.decoder(self.blocks(self.encoder(xp - 0.5)))
        delta = self.head(torch.cat([f, xp - 0.5], dim=1))[..., :h, :w]
        return torch.sigmoid(torch.logit(x.clamp(_EPS, 1 - _EPS)) + delta)


class PatchDiscriminator(nn.Module):
    """Three-layer patch classifier producing a map of real/fake scores.

    No normalization layers: per-instance normalization would hide global
    brightness and contrast, which is most of the style gap.
    """

    def __init__(self, ndf: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ndf, 2 * ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * ndf, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x - 0.5)


def _random_crops(images: np.ndarray, idx: np.ndarray, p: int, rng: np.random.Generator) -> torch.Tensor:
    crops = []
    for i in idx:
        img = images[i]
        h, w = img.shape[:2]
        y = int(rng.integers(0, h - p + 1))
        x = int(rng.integers(0, w - p + 1))
        crops.append(img[y : y + p, x : x + p].transpose(2, 0, 1))
    return torch.from_numpy(np.ascontiguousarray(np.stack(crops), dtype=np.float32))


class StyleTranslator(TransformerMixin, BaseEstimator):
    """Source-to-target style translator (CycleGAN objective, LSGAN adversarial terms).

    ``fit(X_source, X_target)`` trains on random ``patch_size`` crops; with
    ``batch_size=None`` every patch size sees the same number of crop pixels
    per step.
    ``transform`` maps full images source -> target, ``inverse_transform``
    target -> source.
    """

    def __init__(self, patch_size: int = 32, epochs: int = 20, steps_per_epoch: int = 25, batch_size: int | None = None,
                 learning_rate: float = 5e-4, cycle_weight: float = 10.0, identity_weight: float = 0.0,
                 ngf: int = 16, ndf: int = 16, restrict_patch_sizes: bool = True, seed: int = 0):
        self.patch_size = patch_size
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cycle_weight = cycle_weight
        self.identity_weight = identity_weight
        self.ngf = ngf
        self.ndf = ndf
        self.restrict_patch_sizes = restrict_patch_sizes
        self.seed = seed

    def _build(self):
        torch.manual_seed(self.seed)
        self.g_s2t_ = Generator(self.ngf)
        self.g_t2s_ = Generator(self.ngf)
        self.d_s_ = PatchDiscriminator(self.ndf)
        self.d_t_ = PatchDiscriminator(self.ndf)
        self.loss_history_ = []

    def fit(self, X, y):
        """Train on source images ``X`` and target images ``y`` (arrays or AnnotatedImages)."""
        p = int(self.patch_size)
        if self.restrict_patch_sizes and p not in ALLOWED_PATCH_SIZES:
            raise ConfigurationError(f"patch size {p} not in {ALLOWED_PATCH_SIZES}")
        src = as_pixel_batch(X)
        tgt = as_pixel_batch(y)
        if not src or not tgt:
            raise ConfigurationError("both source and target image sets must be non-empty")
        min_side = min(min(im.shape[:2]) for im in src + tgt)
        if p > min_side:
            raise ConfigurationError(f"patch size {p} exceeds the smallest image side {min_side}")
        batch = self.batch_size or max(1, PIXEL_BUDGET // (p * p))
        self._build()
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0xC7C1]))
        g_params = list(self.g_s2t_.parameters()) + list(self.g_t2s_.parameters())
        d_params = list(self.d_s_.parameters()) + list(self.d_t_.parameters())
        opt_g = torch.optim.Adam(g_params, lr=self.learning_rate, betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(d_params, lr=self.learning_rate, betas=(0.5, 0.999))
        for epoch in range(1, self.epochs + 1):
            sums = {"g_adv": 0.0, "d_adv": 0.0, "cycle": 0.0, "change": 0.0}
            for _ in range(self.steps_per_epoch):
                xs = _random_crops(src, rng.integers(0, len(src), batch), p, rng)
                xt = _random_crops(tgt, rng.integers(0, len(tgt), batch), p, rng)
                stats = self._step(xs, xt, opt_g, opt_d)
                for k, v in stats.items():
                    if not math.isfinite(v):
                        raise TrainingDivergenceError(epoch, f"non-finite {k} loss")
                    sums[k] += v
            record = {"epoch": epoch, **{k: v / self.steps_per_epoch for k, v in sums.items()}}
            self.loss_history_.append(record)
            logger.debug("translator p=%d epoch %d %s", p, epoch, record)
        for net in (self.g_s2t_, self.g_t2s_, self.d_s_, self.d_t_):
            net.eval()
        return self

    def _step(self, xs, xt, opt_g, opt_d):
        g, f, ds, dt = self.g_s2t_, self.g_t2s_, self.d_s_, self.d_t_
        fake_t = g(xs)
        fake_s = f(xt)
        rec_s = f(fake_t)
        rec_t = g(fake_s)
        pred_t, pred_s = dt(fake_t), ds(fake_s)
        g_adv = F.mse_loss(pred_t, torch.ones_like(pred_t)) + F.mse_loss(pred_s, torch.ones_like(pred_s))
        cycle = F.l1_loss(rec_s, xs) + F.l1_loss(rec_t, xt)
        loss_g = g_adv + self.cycle_weight * cycle
        if self.identity_weight:
            # identity term in units of the cycle weight
            ident = F.l1_loss(g(xt), xt) + F.l1_loss(f(xs), xs)
            loss_g = loss_g + self.identity_weight * self.cycle_weight * ident
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        d_loss = 0.0
        for disc, real, fake in ((dt, xt, fake_t), (ds, xs, fake_s)):
            pr = disc(real)
            pf = disc(fake.detach())
            d_loss = d_loss + 0.5 * (F.mse_loss(pr, torch.ones_like(pr)) + F.mse_loss(pf, torch.zeros_like(pf)))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()
        change = float((fake_t.detach() - xs).abs().mean())
        return {"g_adv": float(g_adv.detach()), "d_adv": float(d_loss.detach()),
                "cycle": float(cycle.detach()), "change": change}

    def _apply(self, net, X) -> list[np.ndarray]:
        check_is_fitted(self, "g_s2t_")
        out = []
        with torch.no_grad():
            for px in as_pixel_batch(X, min_side=1):
                x = torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1), dtype=np.float32))[None]
                y = net(x)[0].double().numpy().transpose(1, 2, 0)
                out.append(np.clip(y, 0.0, 1.0))
        return out

    def transform(self, X):
        """Translate source-domain images to the target style; output shapes equal input shapes."""
        return self._apply(self.g_s2t_, X)

    def inverse_transform(self, X):
        return self._apply(self.g_t2s_, X)

    # ---------------------------------------------------------------- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "g_s2t_")
        out = {}
        for name in ("g_s2t_", "g_t2s_", "d_s_", "d_t_"):
            for k, v in getattr(self, name).state_dict().items():
                out[f"{name.rstrip('_')}.{k}"] = v.detach().numpy().copy()
        return out

    def load_state_arrays(self, arrays):
        self._build()
        for name in ("g_s2t_", "g_t2s_", "d_s_", "d_t_"):
            prefix = name.rstrip("_") + "."
            sd = {k[len(prefix):]: torch.from_numpy(np.asarray(v)) for k, v in arrays.items() if k.startswith(prefix)}
            net = getattr(self, name)
            net.load_state_dict(sd)
            net.eval()
        return self


def train_translator(source_images, target_images, patch_size: int = 32, seed: int = 0, **hyper) -> StyleTranslator:
    return StyleTranslator(patch_size=patch_size, seed=seed, **hyper).fit(source_images, target_images)


def translate_full(model: StyleTranslator, image) -> np.ndarray:
    px = image.pixels if isinstance(image, AnnotatedImage) else image
    if min(np.shape(px)[:2]) < model.patch_size:
        raise ValidationError(f"image side below the training patch size {model.patch_size}")
    return model.transform([px])[0]


# --------------------------------------------------------------------------- content metric


def edge_map(pixels: np.ndarray) -> np.ndarray:
    from skimage.filters import sobel

    gray = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    return sobel(gray)


def content_preservation(original, translated) -> float:
    """SSIM between the Sobel gradient-magnitude maps of two images, clipped to [0, 1]."""
    from skimage.metrics import structural_similarity

    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(translated, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    ea, eb = edge_map(a), edge_map(b)
    if np.array_equal(ea, eb):
        return 1.0
    rng = max(float(ea.max()), float(eb.max()), 1e-12)
    score = structural_similarity(ea, eb, data_range=rng)
    return float(np.clip(score, 0.0, 1.0))


def mean_content_preservation(model: StyleTranslator, images) -> float:
    px = as_pixel_batch(images)
    return float(np.mean([content_preservation(a, b) for a, b in zip(px, model.transform(px))]))


def build_intermediate_domain(model: StyleTranslator, source_manifest: DatasetManifest, directory,
                              name: str = "intermediate_train") -> DatasetManifest:
    """Translate every labelled source image; boxes are copied unchanged."""
    images = load_annotations(source_manifest)
    out = []
    for img in images:
        translated = quantize(model.transform([img.pixels])[0])
        out.append(AnnotatedImage(img.image_id, translated, "intermediate", list(img.boxes), img.label_kind))
    return save_annotations(out, Path(directory), name=name, split=source_manifest.split,
                            domain_tag="intermediate", categories=source_manifest.categories,
                            header={"translator_patch": model.patch_size, "source": source_manifest.name})


def translate_images(model: StyleTranslator, images: list[AnnotatedImage]) -> list[AnnotatedImage]:
    """In-memory counterpart of build_intermediate_domain."""
    out = []
    translated = model.transform([img.pixels for img in images])
    for img, px in zip(images, translated):
        out.append(AnnotatedImage(img.image_id, quantize(px), "intermediate", list(img.boxes), img.label_kind))
    return out
