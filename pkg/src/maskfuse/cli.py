"""``maskfuse`` command-line front end.

Every command is a deterministic per-image orchestration over COCO-style JSON
files.  Settings come from flags, then an optional flat JSON ``--config``
file, then built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import coco_io
from .copypaste import (
    BalanceConfig,
    ClassStats,
    build_source_pool,
    iter_augmented,
    make_report,
    mode_weights,
    pool_weights,
)
from .errors import ContractViolation, SchemaError
from .evaluation import EvalConfig, evaluate
from .fusion import CalibrationConfig, TtaPrediction, TtaTransform, ensemble, tta_merge
from .masks import PredictionSet, RleMask, rle_encode
from .nms import NmsConfig, matrix_nms
from .synth import SynthConfig, synth

log = logging.getLogger("maskfuse")


def _compact(pset: PredictionSet) -> PredictionSet:
    """Re-encode dense masks so finished images do not pin dense buffers."""
    preds = [p if isinstance(p.mask, RleMask) else replace(p, mask=rle_encode(p.mask)) for p in pset.predictions]
    return pset.with_predictions(preds)


def _map_images(fn, image_ids, threads):
    ids = sorted(image_ids)
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers == 1 or len(ids) < 2:
        return {i: fn(i) for i in ids}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(zip(ids, pool.map(fn, ids)))


def _nms_config(args) -> NmsConfig:
    return NmsConfig(
        kernel=args.kernel,
        sigma=args.sigma,
        score_threshold=args.score_thr,
        max_keep=args.max_keep,
        category_mode="agnostic" if args.class_agnostic else "per-category",
        pre_top_k=args.pre_top_k,
    )


def _images_from(args):
    if getattr(args, "gt", None):
        return coco_io.load_dataset(args.gt).images
    return None


def _source_tags(paths):
    tags, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        tags.append(stem if n == 0 else f"{stem}#{n}")
    return tags


def cmd_nms(args):
    cfg = _nms_config(args)
    preds = coco_io.load_results(args.input, _images_from(args))
    out = _map_images(lambda i: _compact(matrix_nms(preds[i], cfg)), preds, args.threads)
    coco_io.save_results(out, args.out)
    log.info("wrote %d detections for %d images to %s", sum(len(s) for s in out.values()), len(out), args.out)


def _parse_multipliers(items):
    mult = {}
    for item in items or ():
        name, sep, value = item.rpartition("=")
        if not sep or not name:
            raise ContractViolation(f"multiplier must look like SOURCE=VALUE, got {item!r}")
        mult[name] = float(value)
    return CalibrationConfig(mult)


def cmd_ensemble(args):
    cfg = _nms_config(args)
    images = _images_from(args)
    tags = _source_tags(args.inputs)
    runs = [coco_io.load_results(p, images, tag=t) for p, t in zip(args.inputs, tags)]
    calibration = _parse_multipliers(args.multiplier)
    ids = set().union(*runs)

    def fuse(i):
        sets = [r[i] for r in runs if i in r]
        return _compact(ensemble(sets, calibration, cfg))

    out = _map_images(fuse, ids, args.threads)
    coco_io.save_results(out, args.out)
    log.info("fused %d inputs into %s", len(runs), args.out)


def _tta_transforms(scales, flip):
    return [TtaTransform(scale=s, hflip=f) for s in scales for f in ((False, True) if flip else (False,))]


def cmd_tta_merge(args):
    cfg = _nms_config(args)
    ds = coco_io.load_dataset(args.gt)
    transforms = _tta_transforms(args.scales, args.flip)
    if len(transforms) != len(args.inputs):
        raise ContractViolation(
            f"{len(args.inputs)} inputs given but --scales/--flip describe {len(transforms)} transforms "
            "(order: for each scale, unflipped then flipped)"
        )
    runs = []
    for path, t, tag in zip(args.inputs, transforms, _source_tags(args.inputs)):
        runs.append((t, coco_io.load_results(path, tag=tag)))

    def merge(i):
        info = ds.images[i]
        items = []
        for t, preds in runs:
            tw, th = t.transformed_size(info.width, info.height)
            pset = preds.get(i, PredictionSet(i, tw, th))
            items.append(TtaPrediction(pset, t, info.width, info.height))
        return _compact(tta_merge(items, cfg, args.resize_method))

    unknown = set().union(*(set(p) for _, p in runs)) - set(ds.images)
    if unknown:
        raise ContractViolation(f"predictions for unknown images: {sorted(unknown)[:5]}")
    out = _map_images(merge, ds.images, args.threads)
    coco_io.save_results(out, args.out)


def cmd_eval(args):
    ds = coco_io.load_dataset(args.gt)
    preds = coco_io.load_results(args.results, ds.images)
    report = evaluate(preds, ds.ground_truth(), EvalConfig(max_dets=args.max_dets))
    print(report.format_table())
    if args.out:
        _write_json(report.to_dict(), args.out)


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args):
    cfg = SynthConfig(
        num_images=args.images,
        width=args.width,
        height=args.height,
        num_categories=args.categories,
        long_tail_exponent=args.long_tail,
        num_models=args.models,
        jitter_px=args.jitter,
        drop_prob=args.drop,
        duplicate_prob=args.dup,
        score_noise=args.score_noise,
        seed=args.seed,
        render_images=not args.no_images,
    )
    data = synth(cfg)
    out = Path(args.out)
    coco_io.save_dataset(data.dataset, out / "gt.json")
    for image_id, pixels in sorted(data.images.items()):
        coco_io.save_image(pixels, out / "images" / data.dataset.images[image_id].file_name)
    for k, preds in enumerate(data.models):
        coco_io.save_results(preds, out / f"model_{k}.json")
    log.info("wrote %d images and %d model files to %s", cfg.num_images, cfg.num_models, out)


def _overlay(sample):
    from .synth import _PALETTE

    img = sample.image.astype(np.float64)
    for inst in sample.instances:
        bits = coco_io.rle_decode(inst.mask).bits if isinstance(inst.mask, RleMask) else inst.mask.bits
        color = _PALETTE[(inst.category_id - 1) % len(_PALETTE)]
        img[bits] = 0.5 * img[bits] + 0.5 * color
    return img.astype(np.uint8)


def cmd_augment(args):
    cfg = BalanceConfig(
        mode=args.mode,
        beta=args.beta,
        pastes_per_image=args.pastes,
        min_visible_fraction=args.min_visible,
        hflip_prob=args.hflip_prob,
    )
    ds = coco_io.load_dataset(args.dataset)
    counts = {}
    for insts in ds.instances.values():
        for inst in insts:
            counts[inst.category_id] = counts.get(inst.category_id, 0) + 1
    stats = ClassStats(dict(sorted(counts.items())))
    pool = build_source_pool(coco_io.iter_samples(ds, args.images))
    weights = pool_weights(pool, mode_weights(stats, cfg)) if pool.crops else {}

    out = Path(args.out)
    trail = {}
    images, instances, after = {}, {}, Counter()
    ann_id = 1
    for sample in iter_augmented(coco_io.iter_samples(ds, args.images), pool, weights, cfg, args.seed, trail):
        info = ds.images[sample.image_id]
        coco_io.save_image(sample.image, out / "images" / info.file_name)
        if args.dump_overlays:
            coco_io.save_image(_overlay(sample), Path(args.dump_overlays) / info.file_name)
        insts = []
        for inst in sample.instances:
            insts.append(replace(inst, mask=coco_io.to_rle(inst.mask), instance_id=ann_id))
            ann_id += 1
        images[info.id] = info
        instances[info.id] = tuple(insts)
        after.update(i.category_id for i in insts)
    new_ds = coco_io.CocoDataset(images, ds.categories, instances)
    coco_io.save_dataset(new_ds, out / "annotations.json")
    report = make_report(cfg, weights, stats.counts, after, trail)
    _write_json(report.to_dict(), out / "augment_report.json")
    print(json.dumps(report.to_dict(), sort_keys=True))


def _report_rows(gt, runs, names, base_cfg: NmsConfig, eval_cfg: EvalConfig):
    rows = []
    for name, preds in zip(names, runs):
        rows.append({"method": name, "kernel": None, "category_mode": None, "mAP": evaluate(preds, gt, eval_cfg).mAP})
    for mode in ("per-category", "agnostic"):
        for kernel, label in (("linear", "Ensemble (linear)"), ("gaussian", "Ensemble (Gaussian)")):
            cfg = replace(base_cfg, kernel=kernel, category_mode=mode)
            fused = {i: ensemble([r[i] for r in runs if i in r], nms=cfg) for i in gt}
            rows.append(
                {"method": label, "kernel": kernel, "category_mode": mode, "mAP": evaluate(fused, gt, eval_cfg).mAP}
            )
    return rows


def format_report(rows):
    lines = [f"{'method':<24} {'nms':<13} {'mAP':>7}", "-" * 46]
    for r in rows:
        mode = r["category_mode"] or "-"
        lines.append(f"{r['method']:<24} {mode:<13} {100 * r['mAP']:7.2f}")
    return "\n".join(lines)


def cmd_report(args):
    if args.data:
        data = Path(args.data)
        gt_path = data / "gt.json"
        models = sorted(str(p) for p in data.glob("model_*.json"))
    else:
        gt_path, models = args.gt, list(args.models)
    if not models:
        raise ContractViolation("report needs at least one model results file")
    ds = coco_io.load_dataset(gt_path)
    tags = _source_tags(models)
    runs = [coco_io.load_results(p, ds.images, tag=t) for p, t in zip(models, tags)]
    rows = _report_rows(ds.ground_truth(), runs, tags, _nms_config(args), EvalConfig())
    print(format_report(rows))
    if args.out:
        _write_json({"rows": rows}, args.out)


def _add_nms_flags(p):
    p.add_argument("--kernel", choices=("linear", "gaussian"), default="gaussian")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--score-thr", type=float, default=0.05)
    p.add_argument("--max-keep", type=int, default=100)
    p.add_argument("--class-agnostic", action="store_true")
    p.add_argument("--pre-top-k", type=int, default=None)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON object of option defaults")
    common.add_argument("--threads", type=int, default=0, help="worker threads (0 = one per CPU)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="maskfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("nms", parents=[common], help="Matrix NMS over a results file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="dataset JSON supplying image sizes")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("tta-merge", parents=[common], help="merge predictions made on transformed images")
    p.add_argument("inputs", nargs="+", help="one results file per transform, for each scale unflipped then flipped")
    p.add_argument("--gt", required=True, help="dataset JSON with the original image sizes")
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=float, nargs="+", default=[0.75, 1.0, 1.25])
    p.add_argument("--flip", action="store_true", help="each scale also has a horizontally flipped input")
    p.add_argument("--resize-method", choices=("nearest", "bilinear"), default="bilinear")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_tta_merge)

    p = sub.add_parser("ensemble", parents=[common], help="pool several models' results and fuse")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="dataset JSON supplying image sizes")
    p.add_argument("--multiplier", action="append", metavar="SOURCE=VALUE",
                   help="score multiplier for the input whose file stem is SOURCE")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("augment", parents=[common], help="offline (balanced) copy-paste augmentation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--images", required=True, help="directory holding the dataset's image files")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("simple", "balanced"), default="balanced")
    p.add_argument("--beta", type=float, default=0.999)
    p.add_argument("--pastes", type=int, default=3)
    p.add_argument("--min-visible", type=float, default=0.1)
    p.add_argument("--hflip-prob", type=float, default=0.5)
    p.add_argument("--dump-overlays", metavar="DIR")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", parents=[common], help="mask mAP of a results file")
    p.add_argument("--gt", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--max-dets", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a toy dataset and simulated model outputs")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--categories", type=int, default=3)
    p.add_argument("--long-tail", type=float, default=1.0)
    p.add_argument("--models", type=int, default=3)
    p.add_argument("--jitter", type=float, default=2.0)
    p.add_argument("--drop", type=float, default=0.15)
    p.add_argument("--dup", type=float, default=0.0)
    p.add_argument("--score-noise", type=float, default=0.1)
    p.add_argument("--no-images", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", parents=[common], help="single-model vs ensemble table, both kernels")
    p.add_argument("--data", help="directory written by `synth` (gt.json + model_*.json)")
    p.add_argument("--gt")
    p.add_argument("--models", nargs="*", default=[])
    p.add_argument("--out", help="write the rows as JSON")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_report)
    return parser, sub


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON ({exc.msg})", f"line {exc.lineno} column {exc.colno}", path) from None
    if not isinstance(doc, dict) or any(isinstance(v, (dict, list)) and k != "scales" for k, v in doc.items()):
        raise SchemaError("config must be a flat JSON object", "$", path)
    return {k.replace("-", "_"): v for k, v in doc.items()}


def main(argv=None):
    parser, sub = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = _load_config(args.config)
            sp = sub.choices[args.command]
            known = {a.dest for a in sp._actions}
            unknown = sorted(set(values) - known)
            if unknown:
                raise SchemaError(f"unknown option(s) {unknown} for `{args.command}`", "$", args.config)
            sp.set_defaults(**values)
        except (SchemaError, OSError) as exc:
            print(f"maskfuse: error: {exc}", file=sys.stderr)
            return 2
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ContractViolation, SchemaError, OSError) as exc:
        print(f"maskfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
