"""Command-line entry point: ``changekit <command> [options]``.

Commands::

    gen-data            write synthetic train/val/test splits (A/, B/, label/)
    train               train a model, keep the best-validation-IoU checkpoint
    infer               sliding-window masks for every pair in a split
    eval                metrics.csv, masks/ and confusion/ for a labelled split
    ablate              train the four CSDW/LED combinations -> ablation.csv
    analyze-similarity  per-level cosine maps for one pair -> similarity/
    render-mask         colour a prediction against ground truth

Global flags (``--config``, ``--seed``, ``--out-dir``, ``--set key=value``)
go before the command name.  ``--set`` takes dotted config keys, e.g.
``--set optim.lr=0.002 --set model.led_enabled=false``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import yaml

from .analysis import analyze_similarity
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, merge
from .data import gen_synthetic, load_dataset, read_mask, save_dataset, synthetic_splits
from .infer import slide_infer
from .metrics import metrics, render_confusion, save_png, write_metrics_csv, write_radar_csv
from .model import ChangeDetector
from .train import ablate, evaluate, model_from_checkpoint, train, write_ablation_csv

log = logging.getLogger("changekit")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(raw)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return merge(cfg, overrides) if overrides else cfg


def _splits(cfg: RunConfig, data_dir: str | None, names=("train", "val")) -> dict:
    data_dir = data_dir or cfg.data_dir
    if data_dir:
        return {n: load_dataset(Path(data_dir) / n) for n in names if (Path(data_dir) / n).is_dir()}
    d = cfg.data
    log.info("no --data-dir given; generating synthetic splits from seed %d", cfg.seed)
    return synthetic_splits(
        cfg.seed,
        d.train_count,
        d.val_count,
        d.test_count,
        d.size,
        max_shapes=d.max_shapes,
        min_change=d.min_change,
        max_change=d.max_change,
    )


def cmd_gen_data(cfg: RunConfig, args) -> None:
    d = cfg.data
    splits = synthetic_splits(
        cfg.seed,
        args.train if args.train is not None else d.train_count,
        args.val if args.val is not None else d.val_count,
        args.test if args.test is not None else d.test_count,
        args.size or d.size,
        max_shapes=d.max_shapes,
        min_change=d.min_change,
        max_change=d.max_change,
    )
    out = Path(cfg.out_dir)
    for name, samples in splits.items():
        save_dataset(samples, out / name)
        print(f"{name}: {len(samples)} pairs -> {out / name}")


def cmd_train(cfg: RunConfig, args) -> None:
    splits = _splits(cfg, args.data_dir)
    if "train" not in splits or "val" not in splits:
        raise SystemExit("training needs train/ and val/ splits")
    result = train(cfg, splits["train"], splits["val"])
    out = Path(cfg.out_dir)
    save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_iou"))
        for r in result.history:
            w.writerow((r.epoch, f"{r.train_loss:.6f}", f"{r.val_iou:.6f}"))
    val_metrics, _, _ = evaluate(result.model, splits["val"], cfg.patch_size, cfg.stride, cfg.batch_size)
    write_metrics_csv(out / "metrics.csv", [("val", val_metrics)])
    print(f"best epoch {result.best_epoch}, val IoU {result.checkpoint.best_val_iou:.4f} -> {out / 'checkpoint.ckpt'}")


def _load_model(args, cfg: RunConfig) -> ChangeDetector:
    if args.checkpoint:
        return model_from_checkpoint(load_checkpoint(args.checkpoint))
    log.warning("no --checkpoint given; using an untrained model seeded with %d", cfg.seed)
    return ChangeDetector(cfg.model, seed=cfg.seed)


def cmd_infer(cfg: RunConfig, args) -> None:
    model = _load_model(args, cfg)
    samples = load_dataset(args.data_dir, require_labels=False)
    out = Path(cfg.out_dir) / "masks"
    for s in samples:
        mask = slide_infer(model, s.img_a, s.img_b, args.patch or cfg.patch_size, args.stride or cfg.stride, pad=True)
        save_png(out / f"{s.id}.png", mask * 255)
    print(f"{len(samples)} masks -> {out}")


def cmd_eval(cfg: RunConfig, args) -> None:
    model = _load_model(args, cfg)
    samples = load_dataset(args.data_dir)
    m, acc, preds = evaluate(model, samples, args.patch or cfg.patch_size, args.stride or cfg.stride, cfg.batch_size)
    out = Path(cfg.out_dir)
    for s, p in zip(samples, preds):
        save_png(out / "masks" / f"{s.id}.png", p * 255)
        save_png(out / "confusion" / f"{s.id}.png", render_confusion(p, s.mask))
    name = args.name or Path(args.data_dir).name
    rows = [(name, m)]
    if args.per_image:
        rows += [(key, metrics(c)) for key, c in acc.per_image.items()]
    write_metrics_csv(out / "metrics.csv", rows)
    write_radar_csv(out / "radar.csv", [(name, m)])
    print(f"OA {100 * m.oa:.2f}  IoU {100 * m.iou:.2f}  F1 {100 * m.f1:.2f}  Rec {100 * m.rec:.2f}  Prec {100 * m.prec:.2f}")


def cmd_ablate(cfg: RunConfig, args) -> None:
    splits = _splits(cfg, args.data_dir, names=("train", "val", "test"))
    rows = ablate(
        cfg,
        splits["train"],
        splits["val"],
        splits.get("test"),
        on_epoch=lambda tag, r: log.info("[%s] epoch %d val IoU %.4f", tag, r.epoch, r.val_iou),
    )
    out = Path(cfg.out_dir)
    write_ablation_csv(out / "ablation.csv", rows)
    write_radar_csv(out / "radar.csv", [(f"csdw={int(r.csdw)},led={int(r.led)}", r.metrics) for r in rows])
    gap = rows[-1].iou - rows[0].iou
    print(f"full model vs baseline IoU gap: {100 * gap:+.2f} points -> {out / 'ablation.csv'}")


def cmd_analyze(cfg: RunConfig, args) -> None:
    model = _load_model(args, cfg)
    if args.data_dir:
        samples = load_dataset(args.data_dir, require_labels=False)
        pick = [s for s in samples if s.id == args.id] if args.id else samples[:1]
        if not pick:
            raise SystemExit(f"no pair with id {args.id!r} in {args.data_dir}")
        s = pick[0]
    else:
        s = gen_synthetic(cfg.seed, 1, cfg.data.size)[0]
    report = analyze_similarity(model, s.img_a, s.img_b, Path(cfg.out_dir) / "similarity")
    print(f"pair {s.id}: RGB cosine {report.rgb_cosine:.4f} -> {Path(cfg.out_dir) / 'similarity'}")


def cmd_render(cfg: RunConfig, args) -> None:
    pred, gt = read_mask(args.pred), read_mask(args.gt)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "confusion" / Path(args.pred).name
    save_png(out, render_confusion(pred, gt))
    print(f"-> {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="changekit", description="Bi-temporal change detection toolkit")
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic splits")
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--size", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and checkpoint")
    t.add_argument("--data-dir", help="root holding train/ and val/ splits (synthetic if omitted)")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("infer", cmd_infer, "predict masks for a split"),
        ("eval", cmd_eval, "score a labelled split"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint")
        s.add_argument("--data-dir", required=True, help="split directory with A/ and B/ (and label/)")
        s.add_argument("--patch", type=int)
        s.add_argument("--stride", type=int)
        if name == "eval":
            s.add_argument("--name", help="row label in metrics.csv")
            s.add_argument("--per-image", action="store_true", help="also write one metrics row per image")
        s.set_defaults(func=func)

    a = sub.add_parser("ablate", help="four-way CSDW/LED ablation")
    a.add_argument("--data-dir")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("analyze-similarity", help="per-level cosine similarity maps")
    s.add_argument("--checkpoint")
    s.add_argument("--data-dir")
    s.add_argument("--id")
    s.set_defaults(func=cmd_analyze)

    r = sub.add_parser("render-mask", help="colour a prediction against ground truth")
    r.add_argument("--pred", required=True)
    r.add_argument("--gt", required=True)
    r.add_argument("--output")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    cfg = _resolve_config(args)
    args.func(cfg, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
