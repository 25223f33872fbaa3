"""``flowdet`` command line: gradcheck, train, eval, stats, bench.

Exit codes: 0 success, 1 verification/evaluation/data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
HELD_OUT_IMAGES = 16
HELD_OUT_SEED_OFFSET = 7919  # held-out scenes come from a different generator stream


class UsageError(Exception):
    pass


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


def _load_config(args):
    from .detector.config import ConfigError, ModelConfig

    if args.config:
        try:
            cfg = ModelConfig.load(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        except ConfigError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    else:
        cfg = ModelConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    from .data import ensure_dir

    return ensure_dir(args.out)


def _synthetic(count: int, seed: int, size):
    from .data import SynthSceneSpec, synth_dataset

    return synth_dataset(count, SynthSceneSpec(image_size=tuple(size)), seed=seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradsuite import REGISTRY, run_suite, write_suite_csv

    out = _out_dir(args)
    names = args.ops.split(",") if args.ops else None
    if names:
        unknown = [n for n in names if n not in REGISTRY]
        if unknown:
            raise UsageError(f"unknown ops {unknown}; registered: {list(REGISTRY)}")
    rows = run_suite(names, seed=args.seed or 0, sabotage_op=args.sabotage)
    write_suite_csv(rows, out / "gradcheck.csv")
    failed = [r for r in rows if not r.passed]
    for r in rows:
        _log(args, f"{'PASS' if r.passed else 'FAIL'} {r.op:18s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:g}")
    if failed:
        for r in failed:
            print(f"gradcheck failed: {r.op} max_rel_err={r.max_rel_err:.3e} {r.message}".rstrip(), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --------------------------------------------------------------------------- train


def _training_scenes(args, cfg):
    from .data import AnnotationError, SYNTH_CATEGORIES, load_coco_dir

    if args.data in (None, "synthetic"):
        return _synthetic(args.train_images, cfg.seed, cfg.input_size), [c["id"] for c in SYNTH_CATEGORIES]
    try:
        doc, scenes = load_coco_dir(args.data)
    except (OSError, AnnotationError) as exc:
        raise _DataError(str(exc)) from None
    for img, _ in scenes:
        if img.shape[1:] != tuple(cfg.input_size):
            raise _DataError(f"{args.data}: image size {img.shape[1:]} differs from config input_size {cfg.input_size}")
    return scenes, doc.category_ids


class _DataError(Exception):
    pass


def cmd_train(args) -> int:
    from .detector.ablation import evaluate_model, gate_statistics
    from .detector.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
    from .detector.model import build_model
    from .detector.train import OptimizerState, TrainingDiverged, fit
    from .plotting import loss_svg

    cfg = _load_config(args)
    out = _out_dir(args)
    state = OptimizerState()
    if args.checkpoint:
        try:
            ck = load_checkpoint(args.checkpoint, expect=cfg if args.config else None)
        except (OSError, CheckpointError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAIL
        cfg = ck.config
        model = ck.model()
        state = ck.optimizer
    else:
        model = build_model(cfg)
    try:
        scenes, category_ids = _training_scenes(args, cfg)
    except _DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if len(category_ids) != cfg.class_count:
        print(f"error: data has {len(category_ids)} categories, config class_count={cfg.class_count}", file=sys.stderr)
        return EXIT_FAIL
    steps = args.iters if args.iters is not None else max(cfg.optimizer.total_steps - state.step, 0)

    def progress(rec):
        if args.verbose and (rec.step % 50 == 0 or rec.step == 1):
            print(f"step {rec.step:5d} total={rec.total:.4f} cls={rec.cls:.4f} l1={rec.l1:.4f} "
                  f"giou={rec.giou:.4f} lr={rec.lr:.2e}")

    try:
        history, state = fit(model, scenes, steps, category_ids, state=state, callback=progress)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "cls", "l1", "giou", "total", "lr"])
        for r in history:
            w.writerow([r.step, repr(r.cls), repr(r.l1), repr(r.giou), repr(r.total), repr(r.lr)])
    save_checkpoint(out / "model.fdckpt", model, state)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    if history:
        loss_svg(history, out / "loss.svg")
    held_out = _synthetic(HELD_OUT_IMAGES, cfg.seed + HELD_OUT_SEED_OFFSET, cfg.input_size)
    if args.data in (None, "synthetic"):
        report = evaluate_model(model, held_out, category_ids)
        _write_json(out / "eval.json", dict(report.to_dict(), gate_statistics=gate_statistics(model, held_out)))
        _log(args, f"trained {len(history)} steps (step {state.step}); held-out AP={report.ap:.4f} AP50={report.ap50:.4f}")
    else:
        _log(args, f"trained {len(history)} steps (step {state.step})")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from .data import AnnotationError, SYNTH_CATEGORIES, export_detections, load_annotations, load_coco_dir, \
        load_detections, synth_coco
    from .detector.checkpoint import CheckpointError, load_checkpoint
    from .detector.model import detections_to_records
    from .metrics import ap_evaluate
    from .plotting import pr_curves_svg

    out = _out_dir(args)
    if not args.checkpoint and not args.detections:
        raise UsageError("eval needs --checkpoint or --detections")
    try:
        if args.detections:
            if args.data in (None, "synthetic"):
                raise UsageError("--detections needs --data pointing at a COCO annotation file or directory")
            path = Path(args.data)
            doc = load_annotations(path / "annotations.json" if path.is_dir() else path)
            dets = load_detections(args.detections)
            gts = doc.annotations
            category_ids = doc.category_ids
            names = {c["id"]: c["name"] for c in doc.categories}
        else:
            expect = _load_config(args) if args.config else None
            ck = load_checkpoint(args.checkpoint, expect=expect)
            model = ck.model()
            cfg = ck.config
            if args.data in (None, "synthetic"):
                seed = cfg.seed if args.seed is None else args.seed
                scenes = _synthetic(HELD_OUT_IMAGES, seed + HELD_OUT_SEED_OFFSET, cfg.input_size)
                doc = synth_coco(scenes)
                category_ids = [c["id"] for c in SYNTH_CATEGORIES]
            else:
                doc, scenes = load_coco_dir(args.data)
                category_ids = doc.category_ids
            names = {c["id"]: c["name"] for c in doc.categories}
            image_ids = [img["id"] for img in doc.images]
            dets = []
            for start in range(0, len(scenes), 16):
                chunk = scenes[start:start + 16]
                preds = model.predict(np.stack([img for img, _ in chunk]))
                dets += detections_to_records(preds, image_ids[start:start + 16], cfg.input_size, category_ids)
            gts = doc.annotations
            export_detections(dets, out / "detections.json")
        report = ap_evaluate(dets, gts, category_ids)
    except (CheckpointError, AnnotationError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_json(out / "ap_report.json", report.to_dict())
    pr_curves_svg(report, out / "pr_curves.svg", names)
    _log(args, " ".join(f"{k}={v:.4f}" for k, v in report.headline().items()))
    return EXIT_OK


# --------------------------------------------------------------------------- stats


def cmd_stats(args) -> int:
    from .data import AnnotationError, dataset_stats, load_annotations, read_manifest

    if not args.data or args.data == "synthetic":
        raise UsageError("stats needs --data pointing at a COCO annotation file")
    try:
        doc = load_annotations(args.data)
        splits = None
        if args.manifest:
            splits = {}
            for item in args.manifest:
                name, _, path = item.partition("=")
                if not path:
                    raise UsageError(f"--manifest expects split=path, got {item!r}")
                for img_id in read_manifest(path):
                    splits[img_id] = name
        table = dataset_stats(doc, splits)
    except (AnnotationError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    text = table.to_csv()
    if args.out:
        (_out_dir(args) / "stats.csv").write_text(text)
    _log(args, text.rstrip())
    return EXIT_OK


# --------------------------------------------------------------------------- bench

SWEEP_ALIASES = {"ablation": "components", "components": "components", "gate": "gate",
                 "window": "window", "reduction": "reduction"}


def cmd_bench(args) -> int:
    from .detector.ablation import ablation_harness, sweep_configs
    from .detector.model import build_model
    from .metrics import latency_bench
    from .plotting import bar_svg

    cfg = _load_config(args)
    out = _out_dir(args)
    if args.sweep not in SWEEP_ALIASES:
        raise UsageError(f"unknown sweep {args.sweep!r}; choose from {sorted(SWEEP_ALIASES)}")
    mode = SWEEP_ALIASES[args.sweep]
    train = test = None
    if args.train_steps:
        train = _synthetic(args.train_images, cfg.seed, cfg.input_size)
        test = _synthetic(HELD_OUT_IMAGES, cfg.seed + HELD_OUT_SEED_OFFSET, cfg.input_size)
    rows = ablation_harness(mode, cfg, train, test, steps=args.train_steps)
    iters = args.iters if args.iters is not None else 20
    image = _synthetic(1, cfg.seed, cfg.input_size)[0][0][None]
    if iters > 0:
        for row, (_, c) in zip(rows, sweep_configs(mode, cfg)):
            model = build_model(c)
            rep = latency_bench(lambda: model.predict(image), iters=iters, warmup=10)
            row["latency_ms"] = rep.mean_ms
    keys = ["mode", "row", "params", "flops", "final_loss", "ap", "ap50", "ap_s", "ap_l", "latency_ms"]
    with open(out / f"bench_{mode}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in rows:
            w.writerow([_fmt(row.get(k, float("nan"))) for k in keys])
    bar_svg([r["row"] for r in rows], [r["flops"] / 1e6 for r in rows], out / f"bench_{mode}.svg",
            "MFLOPs / image", f"{mode} sweep")
    for row in rows:
        _log(args, f"{row['row']:28s} flops={row['flops']:>12,d} params={row['params']:>8,d}")
    return EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return v


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model config JSON (keys mirror ModelConfig fields)")
    common.add_argument("--seed", type=int, default=None, help="seed for every stochastic component")
    common.add_argument("--out", default="flowdet_out", help="output directory (created if absent)")
    common.add_argument("--data", default=None, help="'synthetic' or a COCO annotation file/directory")
    common.add_argument("--checkpoint", default=None)
    common.add_argument("--iters", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="flowdet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite over every registered op")
    g.add_argument("--ops", default=None, help="comma-separated subset of registered ops")
    g.add_argument("--sabotage", default=None, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", parents=[common], help="train the toy detector")
    t.add_argument("--train-images", type=int, default=32, help="synthetic training scenes")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="AP report and PR curves")
    e.add_argument("--detections", default=None, help="COCO results JSON to score instead of a checkpoint")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", parents=[common], help="per-category, per-split counts")
    s.add_argument("--manifest", action="append", default=None, metavar="SPLIT=PATH",
                   help="image-id manifest assigning a split (repeatable)")
    s.set_defaults(func=cmd_stats)

    b = sub.add_parser("bench", parents=[common], help="FLOPs/latency sweeps and ablations")
    b.add_argument("--sweep", default="window", help="window | reduction | gate | ablation")
    b.add_argument("--train-steps", type=int, default=0, help="train each row this many steps before scoring AP")
    b.add_argument("--train-images", type=int, default=32)
    b.set_defaults(func=cmd_bench)
    return p


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("FLOWDET_THREADS")
    if not value:
        yield
        return
    from threadpoolctl import threadpool_limits

    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"FLOWDET_THREADS must be an integer, got {value!r}") from None
    with threadpool_limits(limits=max(n, 1)):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        with _thread_cap():
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
