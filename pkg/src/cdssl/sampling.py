"""Fixed-ratio mini-batch sampling over a GT-labelled pool and a pseudo-labelled pool."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import AnnotatedImage, ValidationError


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingPlan:
    """``labeled`` GT-pool images and ``pseudo`` target images per batch.

    ``strict`` enforces labeled > pseudo (the default self-training regime);
    ablations pass ``strict=False`` to sweep any split.
    """

    batch_size: int = 4
    labeled: int = 3
    pseudo: int = 1
    strict: bool = True

    def __post_init__(self):
        if self.labeled < 0 or self.pseudo < 0:
            raise ConfigurationError("per-batch counts must be non-negative")
        if self.labeled + self.pseudo != self.batch_size:
            raise ConfigurationError(
                f"labeled + pseudo must equal batch_size ({self.labeled} + {self.pseudo} != {self.batch_size})"
            )
        if self.batch_size <= 0:
            raise ConfigurationError("batch_size must be positive")
        if self.strict and not self.labeled > self.pseudo:
            raise ConfigurationError(
                f"plan {self.labeled}:{self.pseudo} violates labeled > pseudo; pass strict=False for ablations"
            )

    @classmethod
    def from_ratio(cls, ratio: str, batch_size: int | None = None, strict: bool = False) -> "SamplingPlan":
        """Parse ``"3:1"``; batch size defaults to the sum of the two parts."""
        s, t = (int(v) for v in ratio.split(":"))
        b = batch_size or s + t
        if b % (s + t):
            raise ConfigurationError(f"batch size {b} is not a multiple of ratio {ratio}")
        k = b // (s + t)
        return cls(b, s * k, t * k, strict=strict)

    @property
    def ratio(self) -> str:
        return f"{self.labeled}:{self.pseudo}"


class BatchStream:
    """Endless iterator of batches; each pool is reshuffled whenever it is exhausted.

    ``counts`` tallies draws per origin, ``epochs`` the number of reshuffles
    per pool.
    """

    def __init__(self, labeled: Sequence[AnnotatedImage], pseudo: Sequence[AnnotatedImage] | None,
                 plan: SamplingPlan, seed: int = 0, labeled_origin: str = "source"):
        from .detector import Sample

        self._sample = Sample
        self.plan = plan
        self.labeled = list(labeled or [])
        self.pseudo = list(pseudo or [])
        if plan.labeled > 0 and not self.labeled:
            raise ConfigurationError("plan draws labeled images but the labeled pool is empty")
        if plan.pseudo > 0 and not self.pseudo:
            raise ConfigurationError("plan draws target images but the pseudo-labelled pool is empty")
        self.labeled_origin = labeled_origin
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A3D]))
        self._order = {"source": np.empty(0, dtype=np.int64), "target": np.empty(0, dtype=np.int64)}
        self._pos = {"source": 0, "target": 0}
        self.counts: Counter = Counter()
        self.epochs: Counter = Counter()

    def _take(self, pool_name: str, pool: list, k: int) -> list:
        out = []
        while len(out) < k:
            if self._pos[pool_name] >= len(self._order[pool_name]):
                self._order[pool_name] = self.rng.permutation(len(pool))
                self._pos[pool_name] = 0
                self.epochs[pool_name] += 1
            out.append(pool[self._order[pool_name][self._pos[pool_name]]])
            self._pos[pool_name] += 1
        return out

    def __iter__(self):
        return self

    def __next__(self):
        batch = [self._sample(img, "source") for img in self._take("source", self.labeled, self.plan.labeled)]
        batch += [self._sample(img, "target") for img in self._take("target", self.pseudo, self.plan.pseudo)]
        self.counts["source"] += self.plan.labeled
        self.counts["target"] += self.plan.pseudo
        return batch


def make_batch_stream(labeled_pool, pseudo_pool, plan: SamplingPlan, seed: int = 0) -> BatchStream:
    return BatchStream(labeled_pool, pseudo_pool, plan, seed)
