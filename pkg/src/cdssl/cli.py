"""Command-line entry point: ``cdssl <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

logger = logging.getLogger("cdssl")


def _yaml(path) -> dict:
    import yaml

    if path is None:
        return {}
    return yaml.safe_load(Path(path).read_text()) or {}


def _print_report(report, out=None):
    row = {k: round(v, 4) if isinstance(v, float) else v for k, v in report.row().items()}
    row.update(images=report.n_images, gt=report.n_gt, predictions=report.n_predictions)
    print(json.dumps(row))
    if out:
        from .experiments import _write_rows

        _write_rows([report.row() | {"images": report.n_images, "gt": report.n_gt,
                                      "predictions": report.n_predictions}], out)


# --------------------------------------------------------------------------- commands


def cmd_datagen(args):
    from .benchmark import DomainSpec, build_benchmark, default_source_spec, default_target_spec

    cfg = _yaml(args.config)
    src = DomainSpec.from_dict(cfg.get("source", {}), default_source_spec())
    tgt = DomainSpec.from_dict(cfg.get("target", {}), default_target_spec())
    sizes = tuple(cfg.get("sizes", (args.n_source, args.n_target, args.n_val)))
    bench = build_benchmark(src, tgt, sizes, args.seed, args.out, n_jobs=args.jobs)
    print(f"benchmark: {bench.root} ({len(bench.source_train)} source, {len(bench.target_train)} target, "
          f"{len(bench.target_val)} val)")


def cmd_train_translator(args):
    from .benchmark import Benchmark
    from .checkpoint import save_translator
    from .domain import load_annotations
    from .translator import StyleTranslator

    bench = Benchmark.open(args.bench)
    hyper = _yaml(args.config).get("translator", {})
    model = StyleTranslator(patch_size=args.patch_size, seed=args.seed, **hyper)
    if args.epochs:
        model.set_params(epochs=args.epochs)
    model.fit(load_annotations(bench.source_train), load_annotations(bench.target_train))
    save_translator(args.out, model)
    print(f"translator (p={args.patch_size}) saved to {args.out}")


def cmd_translate(args):
    from .benchmark import Benchmark
    from .checkpoint import load_translator
    from .domain import read_manifest
    from .translator import build_intermediate_domain

    model = load_translator(args.translator)
    source = read_manifest(args.source) if args.source else Benchmark.open(args.bench).source_train
    manifest = build_intermediate_domain(model, source, args.out)
    print(f"intermediate domain: {len(manifest)} images in {args.out}")


def cmd_train_detector(args):
    from .checkpoint import save_detector
    from .detector import AnchorDetector
    from .domain import load_annotations

    images = []
    for path in args.train:
        images += load_annotations(path)
    params = _yaml(args.config).get("detector", {})
    model = AnchorDetector(seed=args.seed, **params)
    if args.epochs:
        model.set_params(epochs=args.epochs)
    model.fit(images)
    save_detector(args.out, model)
    print(f"detector trained on {len(images)} images saved to {args.out}")


def cmd_infer(args):
    from .checkpoint import load_detector
    from .domain import read_manifest
    from .pseudo import annotate

    model = load_detector(args.model)
    manifest = read_manifest(args.images)
    from .domain import load_annotations

    images = [img.with_boxes([]) for img in load_annotations(manifest)]
    labels = annotate(model, images, args.conf, args.nms_iou, round=args.round, annotator_id=Path(args.model).stem)
    labels.save(args.out, manifest)
    print(f"{labels.n_boxes} boxes above {args.conf} on {len(images)} images written to {args.out}")


def cmd_self_train(args):
    from .benchmark import Benchmark
    from .experiments import ExperimentConfig
    from .selftrain import SelfTrainData, run

    cfg = ExperimentConfig.from_dict(_yaml(args.config).get("experiment", {})) if args.config else ExperimentConfig()
    if args.rounds is not None:
        cfg.rounds = args.rounds
    if args.combination:
        cfg.combination = args.combination
    bench = Benchmark.open(args.bench)
    data = SelfTrainData.from_benchmark(bench, args.intermediate)
    st = cfg.selftrain_config(args.seed)
    annotator_pool = data.intermediate if data.intermediate is not None else data.source
    sealed = bench.sealed_dir if args.coverage else None
    from .pseudo import PseudoLabelStore

    store = PseudoLabelStore(Path(args.out) / "pseudo", bench.target_train)
    result = run(st, data, annotator_pool=annotator_pool, out_dir=args.out, sealed_dir=sealed, store=store)
    for row in result.table():
        print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()}))
    print(f"history written to {Path(args.out) / 'history.csv'}")


def cmd_eval(args):
    from .checkpoint import load_detector
    from .domain import load_annotations
    from .metrics import evaluate
    from .pseudo import PseudoLabelSet

    gt = load_annotations(args.data, pixels=args.model is not None)
    if args.model:
        model = load_detector(args.model)
        preds = dict(zip([g.image_id for g in gt], model.predict(gt)))
    else:
        preds = PseudoLabelSet.load(args.predictions).boxes
    _print_report(evaluate(preds, gt), args.out)


def cmd_report(args):
    from . import plots
    from .metrics import density_histogram

    run_dir = Path(args.run)
    figs = run_dir / "figures"
    made = []
    if args.bench:
        from .benchmark import Benchmark

        bench = Benchmark.open(args.bench)
        blocks = {"source": density_histogram(bench.source_train), "target val": density_histogram(bench.target_val)}
        made.append(plots.density_plot(blocks, figs / "density.png"))
    pseudo_root = run_dir / "pseudo"
    if pseudo_root.exists():
        from .pseudo import PseudoLabelSet

        rounds = sorted(p for p in pseudo_root.glob("round_*") if (p / "manifest.txt").exists())
        sets = [PseudoLabelSet.load(p) for p in rounds]
        scores = [[b.score for bs in s.boxes.values() for b in bs] for s in sets]
        if sets:
            made.append(plots.confidence_traces(scores, figs / "confidence_per_round.png"))
        if args.bench:
            from .metrics import pseudo_label_quality

            for s in sets:
                q = pseudo_label_quality(s.boxes, bench.sealed_dir)
                if q is not None:
                    made.append(plots.iou_confidence_map(q, figs / f"iou_confidence_round{s.round}.png"))
    tables = run_dir / "tables"
    for path in sorted(tables.glob("*.csv")) if tables.exists() else []:
        if path.stem.endswith("_long"):
            continue
        with open(path) as fh:
            rows = [{k: (float(v) if k == "mean" or k.startswith("seed_") else v) for k, v in r.items()}
                    for r in csv.DictReader(fh)]
        if rows and "mean" in rows[0]:
            made.append(plots.table_bars(rows, figs / f"{path.stem}.png"))
    for p in made:
        print(p)
    if not made:
        print("nothing to report", file=sys.stderr)


def cmd_exp(args):
    from .experiments import EXPERIMENTS, ExperimentConfig, pseudo_quality_table

    cfg = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    if args.seeds:
        cfg.seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.out:
        cfg.out_dir = args.out
    table = EXPERIMENTS[args.which](cfg)
    for row in table.wide():
        print(json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()}))
    if args.which == "factorial":
        pseudo_quality_table(cfg)
    print(f"tables written to {Path(cfg.out_dir) / 'tables'}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdssl", description="Cross-domain self-training lab on synthetic shapes.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the source/target benchmark")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="benchmark")
    p.add_argument("--n-source", type=int, default=500)
    p.add_argument("--n-target", type=int, default=500)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train-translator", help="train the source->target style translator")
    p.add_argument("--bench", required=True)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_translator)

    p = sub.add_parser("translate", help="build the intermediate domain from source images")
    p.add_argument("--translator", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--bench")
    g.add_argument("--source")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("train-detector", help="train a detector on labelled datasets")
    p.add_argument("--train", nargs="+", required=True, help="dataset directories")
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_detector)

    p = sub.add_parser("infer", help="predict and keep boxes above a confidence threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--conf", type=float, default=0.6)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--round", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("self-train", help="annotator + self-training rounds, writes history.csv")
    p.add_argument("--bench", required=True)
    p.add_argument("--intermediate", help="intermediate-domain directory (omit for ST only)")
    p.add_argument("--config")
    p.add_argument("--rounds", type=int)
    p.add_argument("--combination", choices=("source", "intermediate"))
    p.add_argument("--coverage", action="store_true", help="add pseudo-label coverage from the sealed split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_self_train)

    p = sub.add_parser("eval", help="mAP@0.5 of a detector or a saved prediction set")
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--predictions")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render figures for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--bench")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("exp", help="multi-seed ablations")
    p.add_argument("which", choices=("factorial", "patch", "sampling", "mask"))
    p.add_argument("--config")
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_exp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
