"""Multi-seed ablations on the synthetic benchmark: factorial, patch size, sampling ratio, loss masks.

Every trained artefact is a deterministic function of (config, seed), so a
per-seed :class:`Lab` memoises translators and detectors and hands the same
object to every arm that asks for it. Arms write their own output rows and
never look at another arm's results.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .benchmark import Benchmark, DomainSpec, build_benchmark, default_source_spec, default_target_spec
from .checkpoint import load_detector, load_translator, save_detector, save_translator
from .detector import FULL_MASK, AnchorDetector, LossMask
from .domain import AnnotatedImage, load_annotations
from .metrics import EvalReport, evaluate, load_sealed_ground_truth, pseudo_label_quality
from .sampling import ConfigurationError, SamplingPlan
from .selftrain import ConfidenceSchedule, SelfTrainConfig, SelfTrainData, initialize_annotator, run, run_round
from .translator import StyleTranslator, mean_content_preservation, translate_images

logger = logging.getLogger(__name__)

FACTORIAL_ARMS = ("Baseline", "ST", "DT", "DT+ST", "Oracle")
DEFAULT_RATIOS = ("0:4", "1:3", "2:2", "3:1")


def _mask_arms() -> dict[str, tuple[LossMask, str]]:
    return {
        "target_reg_only": (LossMask(True, True, False, True), "3:1"),
        "target_cls_only": (LossMask(True, True, True, False), "3:1"),
        "target_both": (FULL_MASK, "3:1"),
        "source_reg_only": (LossMask(False, True, True, True), "3:1"),
        "source_cls_only": (LossMask(True, False, True, True), "3:1"),
        "source_both": (FULL_MASK, "3:1"),
        "pseudo_only": (FULL_MASK, "0:4"),
    }


@dataclass
class ExperimentConfig:
    name: str = "cdssl"
    seeds: tuple[int, ...] = (0, 1, 2)
    sizes: tuple[int, int, int] = (500, 500, 200)
    source: dict = field(default_factory=dict)  # DomainSpec overrides
    target: dict = field(default_factory=dict)
    translator: dict = field(default_factory=dict)
    patch_size: int = 32
    patch_sizes: tuple[int, ...] = (32, 64, 128)
    detector: dict = field(default_factory=dict)
    rounds: int = 3
    schedule: tuple[float, ...] = (0.6, 0.8, 0.9)
    ratio: str = "3:1"
    batch_size: int = 4
    combination: str = "source"
    fine_tune: bool = False
    early_stop: bool = True
    ratios: tuple[str, ...] = DEFAULT_RATIOS
    arms: tuple[str, ...] | None = None
    content_images: int = 50
    out_dir: str = "runs"
    n_jobs: int | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.sizes = tuple(int(s) for s in self.sizes)
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        self.schedule = tuple(float(t) for t in self.schedule)
        self.ratios = tuple(str(r) for r in self.ratios)
        if not self.seeds:
            raise ConfigurationError("experiment needs at least one seed")
        if self.arms is not None:
            self.arms = tuple(self.arms)
            if len(set(self.arms)) != len(self.arms):
                raise ConfigurationError("arm names must be unique")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        import yaml

        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def source_spec(self) -> DomainSpec:
        return DomainSpec.from_dict(self.source, default_source_spec())

    def target_spec(self) -> DomainSpec:
        return DomainSpec.from_dict(self.target, default_target_spec())

    def selftrain_config(self, seed: int, **changes) -> SelfTrainConfig:
        cfg = SelfTrainConfig(
            rounds=self.rounds,
            schedule=ConfidenceSchedule(self.schedule),
            plan=SamplingPlan.from_ratio(self.ratio, self.batch_size, strict=True),
            combination=self.combination,
            detector=dict(self.detector),
            fine_tune=self.fine_tune,
            early_stop=self.early_stop,
            seed=seed,
        )
        return cfg.replace(**changes) if changes else cfg


class Lab:
    """Benchmark, translators and detectors for one seed, built on first use and cached on disk."""

    def __init__(self, config: ExperimentConfig, seed: int, root=None):
        self.config = config
        self.seed = int(seed)
        self.root = Path(root or config.out_dir) / f"seed_{self.seed}"
        self._memo: dict = {}

    # -- data

    @property
    def benchmark(self) -> Benchmark:
        if "bench" not in self._memo:
            path = self.root / "benchmark"
            if (path / "benchmark.yaml").exists():
                bench = Benchmark.open(path)
            else:
                bench = build_benchmark(self.config.source_spec(), self.config.target_spec(), self.config.sizes,
                                        self.seed, path, self.config.n_jobs)
            self._memo["bench"] = bench
        return self._memo["bench"]

    def _images(self, key) -> list[AnnotatedImage]:
        if key not in self._memo:
            self._memo[key] = load_annotations(getattr(self.benchmark, key))
        return self._memo[key]

    @property
    def source(self):
        return self._images("source_train")

    @property
    def target(self):
        return self._images("target_train")

    @property
    def target_val(self):
        return self._images("target_val")

    # -- models

    def _detector(self, key: str, images_fn) -> AnchorDetector:
        if key in self._memo:
            return self._memo[key]
        path = self.root / "models" / f"{key}.npz"
        if path.exists():
            model = load_detector(path)
        else:
            model = AnchorDetector(seed=self.seed, **self.config.detector).fit(images_fn())
            save_detector(path, model)
        self._memo[key] = model
        return model

    def translator(self, patch_size: int | None = None) -> StyleTranslator:
        p = int(patch_size or self.config.patch_size)
        key = f"translator_p{p}"
        if key not in self._memo:
            path = self.root / "models" / f"{key}.npz"
            if path.exists():
                model = load_translator(path)
            else:
                t0 = time.time()
                model = StyleTranslator(patch_size=p, seed=self.seed, **self.config.translator)
                model.fit(self.source, self.target)
                logger.info("seed %d: translator p=%d trained in %.0fs", self.seed, p, time.time() - t0)
                save_translator(path, model)
            self._memo[key] = model
        return self._memo[key]

    def intermediate(self, patch_size: int | None = None) -> list[AnnotatedImage]:
        p = int(patch_size or self.config.patch_size)
        key = f"intermediate_p{p}"
        if key not in self._memo:
            self._memo[key] = translate_images(self.translator(p), self.source)
        return self._memo[key]

    def baseline(self) -> AnchorDetector:
        return self._detector("baseline", lambda: self.source)

    def dt(self, patch_size: int | None = None) -> AnchorDetector:
        p = int(patch_size or self.config.patch_size)
        return self._detector(f"dt_p{p}", lambda: self.intermediate(p))

    def oracle(self) -> AnchorDetector:
        # analysis arm: the only training path that reads the sealed split
        def images():
            gt = {g.image_id: g.boxes for g in load_sealed_ground_truth(self.benchmark.sealed_dir)}
            return [img.with_boxes(gt[img.image_id]) for img in self.target]

        return self._detector("oracle", images)

    def data(self, with_intermediate: bool = True) -> SelfTrainData:
        inter = self.intermediate() if with_intermediate else None
        return SelfTrainData(self.source, self.target, self.target_val, inter)

    def round0(self, annotator: str = "dt"):
        """Annotator model and its pseudo(0) set."""
        key = f"round0_{annotator}"
        if key not in self._memo:
            model = self.dt() if annotator == "dt" else self.baseline()
            self._memo[key] = initialize_annotator(self.config.selftrain_config(self.seed), None, self.target, model)
        return self._memo[key]

    def selftrain(self, annotator: str = "dt"):
        key = f"selftrain_{annotator}"
        if key not in self._memo:
            cfg = self.config.selftrain_config(self.seed)
            with_inter = annotator == "dt"
            model = self.dt() if with_inter else self.baseline()
            out = self.root / f"selftrain_{annotator}"
            self._memo[key] = run(cfg, self.data(with_inter), annotator=model, out_dir=out,
                                  sealed_dir=self.benchmark.sealed_dir)
        return self._memo[key]

    def evaluate(self, model) -> EvalReport:
        val = self.target_val
        preds = model.predict(val)
        return evaluate({img.image_id: p for img, p in zip(val, preds)}, val)


# --------------------------------------------------------------------------- tables


def _write_rows(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return path


@dataclass
class ResultTable:
    """Long-format results: one row per (arm, seed)."""

    name: str
    rows: list[dict]
    arms: list[str]
    seeds: list[int]

    def value(self, arm: str, seed: int, metric: str = "mAP") -> float:
        for r in self.rows:
            if r["arm"] == arm and r["seed"] == seed:
                return float(r[metric])
        raise KeyError((arm, seed))

    def wide(self, metric: str = "mAP") -> list[dict]:
        """Arms as rows, seeds as columns plus their mean."""
        out = []
        for arm in self.arms:
            vals = [self.value(arm, s, metric) for s in self.seeds]
            row = {"arm": arm, **{f"seed_{s}": v for s, v in zip(self.seeds, vals)}, "mean": float(np.mean(vals))}
            out.append(row)
        return out

    def incomplete(self) -> list[tuple[str, int]]:
        have = {(r["arm"], r["seed"]) for r in self.rows}
        return [(a, s) for a in self.arms for s in self.seeds if (a, s) not in have]

    def save(self, out_dir, metric: str = "mAP") -> dict[str, Path]:
        out_dir = Path(out_dir)
        paths = {"long": _write_rows(self.rows, out_dir / f"{self.name}_long.csv")}
        if not self.incomplete():
            paths["wide"] = _write_rows(self.wide(metric), out_dir / f"{self.name}.csv")
        return paths


def _labs(cfg: ExperimentConfig, seeds=None, labs=None) -> list[Lab]:
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    labs = labs or {}
    return [labs[s] if s in labs else Lab(cfg, s) for s in seeds]


def _report_row(arm: str, seed: int, report: EvalReport, **extra) -> dict:
    return {"arm": arm, "seed": seed, **report.row(), **extra}


def _run_arms(name, cfg, arm_fns: dict, seeds, labs) -> ResultTable:
    arms = [a for a in arm_fns if cfg.arms is None or a in cfg.arms]
    rows = []
    used = _labs(cfg, seeds, labs)
    for lab in used:
        for arm in arms:
            t0 = time.time()
            try:
                rows.append(arm_fns[arm](lab))
            except Exception:
                logger.exception("%s: arm %s failed on seed %d", name, arm, lab.seed)
                raise
            logger.info("%s seed %d arm %s done in %.0fs", name, lab.seed, arm, time.time() - t0)
    table = ResultTable(name, rows, arms, [lab.seed for lab in used])
    table.save(Path(cfg.out_dir) / "tables")
    return table


def run_factorial(cfg: ExperimentConfig, seeds=None, labs=None) -> ResultTable:
    """Baseline, ST, DT, DT+ST and Oracle per seed.

    Self-training arms report the model of the last executed round.
    """

    def st_arm(annotator):
        def fn(lab):
            res = lab.selftrain(annotator)
            last = res.history[-1]
            return _report_row("ST" if annotator == "source" else "DT+ST", lab.seed, last.report,
                               rounds=last.round)
        return fn

    arm_fns = {
        "Baseline": lambda lab: _report_row("Baseline", lab.seed, lab.evaluate(lab.baseline())),
        "ST": st_arm("source"),
        "DT": lambda lab: _report_row("DT", lab.seed, lab.evaluate(lab.dt())),
        "DT+ST": st_arm("dt"),
        "Oracle": lambda lab: _report_row("Oracle", lab.seed, lab.evaluate(lab.oracle())),
    }
    return _run_arms("factorial", cfg, arm_fns, seeds, labs)


def run_patch_sweep(cfg: ExperimentConfig, seeds=None, labs=None) -> ResultTable:
    """DT mAP and content preservation per translator patch size, plus the non-adapted baseline."""

    def patch_arm(p):
        def fn(lab):
            held = lab.source[: cfg.content_images]
            cp = mean_content_preservation(lab.translator(p), held)
            return _report_row(f"p{p}", lab.seed, lab.evaluate(lab.dt(p)), patch_size=p, content_preservation=cp)
        return fn

    arm_fns = {"Non-Adapt": lambda lab: _report_row("Non-Adapt", lab.seed, lab.evaluate(lab.baseline()),
                                                     patch_size="", content_preservation="")}
    arm_fns.update({f"p{p}": patch_arm(p) for p in cfg.patch_sizes})
    return _run_arms("patch", cfg, arm_fns, seeds, labs)


def _first_round(lab: Lab, plan: SamplingPlan, mask: LossMask = FULL_MASK):
    st = lab.config.selftrain_config(lab.seed)
    model, labels = lab.round0("dt")
    labeled = lab.data().labeled_pool(st.combination)
    return run_round(model, labels, st, labeled, lab.target, lab.target_val, plan=plan, loss_mask=mask)


def run_sampling_sweep(cfg: ExperimentConfig, seeds=None, labs=None) -> ResultTable:
    """First self-training round from the DT annotator's pseudo(0), one arm per labelled:target split."""

    def ratio_arm(ratio):
        def fn(lab):
            plan = SamplingPlan.from_ratio(ratio, cfg.batch_size, strict=False)
            _, _, report = _first_round(lab, plan)
            return _report_row(ratio, lab.seed, report, labeled=plan.labeled, target=plan.pseudo)
        return fn

    return _run_arms("sampling", cfg, {r: ratio_arm(r) for r in cfg.ratios}, seeds, labs)


def run_mask_matrix(cfg: ExperimentConfig, seeds=None, labs=None) -> ResultTable:
    """Per-origin, per-head loss masks in the first self-training round, plus reference arms."""

    def mask_arm(name, mask, ratio):
        def fn(lab):
            memo = ("mask", mask, ratio)
            if memo not in lab._memo:
                plan = SamplingPlan.from_ratio(ratio, cfg.batch_size, strict=False)
                lab._memo[memo] = _first_round(lab, plan, mask)[2]
            return _report_row(name, lab.seed, lab._memo[memo], mask=mask.describe(), ratio=ratio)
        return fn

    arm_fns = {
        "Baseline": lambda lab: _report_row("Baseline", lab.seed, lab.evaluate(lab.baseline()), mask="", ratio=""),
        "DT": lambda lab: _report_row("DT", lab.seed, lab.evaluate(lab.dt()), mask="", ratio=""),
    }
    arm_fns.update({name: mask_arm(name, m, r) for name, (m, r) in _mask_arms().items()})
    return _run_arms("mask", cfg, arm_fns, seeds, labs)


def pseudo_quality_table(cfg: ExperimentConfig, seeds=None, labs=None, annotator: str = "dt") -> ResultTable:
    """Coverage and pseudo-box counts per self-training round (analysis only)."""
    rows = []
    used = _labs(cfg, seeds, labs)
    for lab in used:
        for rec in lab.selftrain(annotator).history:
            q = rec.quality or pseudo_label_quality(rec.labels.boxes, lab.benchmark.sealed_dir)
            rows.append({"arm": f"round{rec.round}", "seed": lab.seed, "mAP": rec.report.mAP,
                         "coverage": "" if q is None else q.coverage, "pseudo_boxes": rec.labels.n_boxes,
                         "threshold": rec.labels.confidence_threshold})
    arms = sorted({r["arm"] for r in rows}, key=lambda a: int(a[5:]))
    table = ResultTable("pseudo_quality", rows, arms, [lab.seed for lab in used])
    table.save(Path(cfg.out_dir) / "tables")
    return table


EXPERIMENTS = {
    "factorial": run_factorial,
    "patch": run_patch_sweep,
    "sampling": run_sampling_sweep,
    "mask": run_mask_matrix,
}


def majority(flags: Sequence[bool], k: int | None = None) -> bool:
    """True when at least ``k`` (default: a strict majority) of the flags hold."""
    need = k if k is not None else len(flags) // 2 + 1
    return sum(bool(f) for f in flags) >= need
