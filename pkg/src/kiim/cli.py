"""Command line entry point: ``kiim <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .core import DatasetManifest, ExperimentConfig, load_sample, split_dataset
from .knowledge import ProjectionMatrix

logger = logging.getLogger("kiim")


def load_config(path: Optional[str], overrides: List[str], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Read a config file (or start from ``base``) and apply key=value overrides."""
    d = base.to_dict() if base is not None and not path else {}
    if path:
        text = Path(path).read_text()
        if path.endswith((".yaml", ".yml")):
            import yaml

            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    return ExperimentConfig.from_dict(d)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    for flag, key, typ in (
        ("--lr", "lr", float),
        ("--batch-size", "batch_size", int),
        ("--epochs", "epochs", int),
        ("--max-steps", "max_steps", int),
        ("--alpha", "loss_alpha", float),
        ("--seed", "seed", int),
        ("--fusion-mode", "fusion_mode", str),
        ("--encoder", "encoder", str),
    ):
        p.add_argument(flag, dest=f"cfg_{key}", type=typ, metavar=key.upper())


def _config(args, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = load_config(args.config, args.set, base)
    direct = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.replace(**direct) if direct else cfg


def _projection(path: Optional[str]) -> Optional[ProjectionMatrix]:
    return ProjectionMatrix.load(path) if path else None


def cmd_generate(args) -> None:
    from .synthgen import StateSpec, default_state_specs, generate_dataset

    if args.spec:
        spec = StateSpec.load(args.spec)
    else:
        specs = {s.state_id: s for s in default_state_specs(args.patch_size)}
        if args.state not in specs:
            raise SystemExit(f"unknown default state {args.state!r}; choose from {sorted(specs)}")
        spec = specs[args.state]
    m = generate_dataset(spec, args.n_patches, args.seed, args.out)
    print(f"wrote {len(m)} patches and manifest.json to {args.out}")


def cmd_build_projection(args) -> None:
    from .knowledge import build_projection_matrix, estimate_area_stats

    m = DatasetManifest.load_json(args.manifest)
    P = build_projection_matrix(estimate_area_stats(m), m.vocab.K)
    P.save(args.out)
    print(f"wrote projection for state {P.state_id!r} to {args.out}")


def _train_val(args, cfg):
    m = DatasetManifest.load_json(args.manifest)
    if args.val_manifest:
        return m, DatasetManifest.load_json(args.val_manifest)
    return split_dataset(m, args.train_fraction, cfg.seed)


def cmd_train(args) -> None:
    from .harness import train

    cfg = _config(args)
    tr, va = _train_val(args, cfg)
    _, report = train(cfg, tr, va, _projection(args.projection), out_dir=args.out)
    print(json.dumps({"val_miou": report.miou("val"), "out": args.out}))


def cmd_finetune(args) -> None:
    from .harness import Checkpoint, finetune, train

    if args.checkpoint:
        phase1 = Checkpoint.load(args.checkpoint)
        cfg = _config(args, base=phase1.config)
    else:
        cfg = _config(args)
        if not args.pretrain_manifest:
            raise SystemExit("either --checkpoint or --pretrain-manifest is required")
        phase1, _ = train(cfg, DatasetManifest.load_json(args.pretrain_manifest), out_dir=Path(args.out) / "phase1")
    target = DatasetManifest.load_json(args.target_manifest)
    val = DatasetManifest.load_json(args.val_manifest) if args.val_manifest else None
    ckpt, report = finetune(phase1, target, args.fraction, cfg, val, _projection(args.projection))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoint.pt")
    report.save(out / "report.json")
    print(json.dumps({"tag": report.tag, "val_miou": report.miou("val"), "out": str(out)}))


def cmd_gridsearch(args) -> None:
    from .harness import DEFAULT_GRIDS, grid_search

    cfg = _config(args)
    grids = {
        "lr": args.lrs or DEFAULT_GRIDS["lr"],
        "batch_size": args.batch_sizes or DEFAULT_GRIDS["batch_size"],
        "loss_alpha": args.alphas or DEFAULT_GRIDS["loss_alpha"],
    }
    best, cells = grid_search(cfg, DatasetManifest.load_json(args.manifest), grids, args.folds, args.stratified)
    result = {
        "best": best.to_dict(),
        "cells": [{"params": c.params, "fold_mious": c.fold_mious, "mean_miou": c.mean_miou, "error": c.error}
                  for c in cells],
    }
    Path(args.out).write_text(json.dumps(result, indent=1))
    print(json.dumps({"best": {k: best.to_dict()[k] for k in grids}}))


def cmd_ablate(args) -> None:
    from .harness import ablate, ablation_table

    cfg = _config(args)
    tr, va = _train_val(args, cfg)
    rows = ablate(cfg, tr, va, args.seeds, args.rows)
    table = ablation_table(rows)
    print(table)
    if args.out:
        Path(args.out).write_text(json.dumps(
            [{"name": r.name, "flags": list(r.flags), "dice": r.dice, "iou": r.iou, "per_seed_iou": r.per_seed_iou}
             for r in rows], indent=1))


def cmd_evaluate(args) -> None:
    from .harness import evaluate

    report = evaluate(args.checkpoint, DatasetManifest.load_json(args.manifest), _projection(args.projection))
    Path(args.out).write_text(report.to_json())
    Path(args.out).with_suffix(".txt").write_text(report.table() + "\n")
    print(report.table())


def cmd_predict(args) -> None:
    from .harness import predict_render

    sample = load_sample(args.sample)
    path = predict_render(args.checkpoint, sample, args.out, _projection(args.projection),
                          side_by_side=args.side_by_side, dump_indices=args.dump_indices)
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kiim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic state dataset")
    p.add_argument("--spec", help="StateSpec JSON (defaults to a built-in state)")
    p.add_argument("--state", default="S1", help="built-in state id when --spec is absent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-patches", type=int, default=200)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-projection", help="crop -> irrigation prior from training patches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_projection)

    for name, func, help_ in (("train", cmd_train, "train a model"), ("ablate", cmd_ablate, "run the ablation rows")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--val-manifest")
        p.add_argument("--train-fraction", type=float, default=0.85)
        _add_config_args(p)
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--projection")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
            p.add_argument("--rows", nargs="+")
            p.add_argument("--out")

    p = sub.add_parser("finetune", help="pretrain on a pooled manifest (or load a checkpoint) and fine-tune")
    p.add_argument("--checkpoint")
    p.add_argument("--pretrain-manifest")
    p.add_argument("--target-manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--projection")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("gridsearch", help="k-fold grid search over lr, batch size and loss alpha")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--stratified", action="store_true")
    p.add_argument("--lrs", type=float, nargs="+")
    p.add_argument("--batch-sizes", type=int, nargs="+")
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--projection")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="render the predicted class map of one patch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--projection")
    p.add_argument("--out", required=True)
    p.add_argument("--side-by-side", action="store_true")
    p.add_argument("--dump-indices", action="store_true", help="also write NDVI/NDWI/NDTI as grayscale PNGs")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
