"""Command-line entry point: synth, train, eval, aggregate, params.

Exit codes are a stable scripting contract: 0 success, 1 configuration
validation, 2 I/O or data problems, 3 checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import random
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import aggregator, data, metrics
from .config import RunConfig, load_config
from .errors import CheckpointError, ConfigError, DynasegError
from .model import DynamicSegNet, load_checkpoint, parameter_breakdown
from .trainer import train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_CHECKPOINT = 3


def set_determinism(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Fixed-width help so output does not depend on the terminal."""

    def __init__(self, prog):
        super().__init__(prog, width=96)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynaseg",
        description="Partial-label multi-tissue segmentation with a single "
                    "class-conditioned dynamic head.",
        formatter_class=_HelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", required=True, metavar="PATH",
                       help="run configuration (JSON)")
        p.add_argument("--seed", type=int, default=None, metavar="INT",
                       help="override the config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic kernels")
        if out_default is not None:
            p.add_argument("--out", default=out_default, metavar="DIR",
                           help="output directory")

    p = sub.add_parser("synth", formatter_class=_HelpFormatter,
                       help="generate the synthetic partial-label corpus")
    common(p, out_default=None)
    p.add_argument("--out", default=None, metavar="DIR",
                   help="corpus directory (default: data.root from the config)")

    p = sub.add_parser("train", formatter_class=_HelpFormatter,
                       help="train the model on the configured corpus")
    common(p, out_default="runs/train")

    p = sub.add_parser("eval", formatter_class=_HelpFormatter,
                       help="evaluate a checkpoint on the test split")
    common(p, out_default="runs/eval")
    p.add_argument("--checkpoint", required=True, metavar="PATH",
                   help="checkpoint archive to evaluate")

    p = sub.add_parser("aggregate", formatter_class=_HelpFormatter,
                       help="segment every class on one image and merge labels")
    common(p, out_default="runs/aggregate")
    p.add_argument("--checkpoint", required=True, metavar="PATH",
                   help="checkpoint archive to run")
    p.add_argument("--image", required=True, metavar="PATH",
                   help="RGB raster image to segment")
    p.add_argument("--stride", type=int, default=None, metavar="INT",
                   help="tile stride override (default: aggregate.stride)")

    p = sub.add_parser("params", formatter_class=_HelpFormatter,
                       help="report parameter counts for the configured model")
    common(p, out_default=None)

    return parser


def _prepare(args) -> RunConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.train.seed = args.seed
    if args.deterministic:
        config.deterministic = True
    set_determinism(config.seed, config.deterministic)
    return config


def cmd_synth(args) -> int:
    config = _prepare(args)
    root = Path(args.out) if args.out else Path(config.data.root)
    manifest = data.generate_synthetic(
        config.data.synth_config(config.seed), config.registry, root
    )
    plan = data.split_dataset(
        manifest.patients(), ratio=config.data.split_ratio, seed=config.seed
    )
    data.save_splits(plan, root)
    print(f"corpus: {root}")
    print(f"manifest rows: {len(manifest.entries)}")
    print(f"patients: {len(manifest.patients())} "
          f"(train {len(plan.train)} / val {len(plan.val)} / test {len(plan.test)})")
    return EXIT_OK


def _load_patch_sets(config: RunConfig):
    manifest = data.load_manifest(config.data.root, config.registry)
    plan = data.load_splits(config.data.root)
    return data.build_patch_sets(
        manifest,
        plan,
        config.registry,
        patch_size=config.data.patch_size,
        target_per_class=config.data.target_per_class,
        seed=config.seed,
        eval_patches_per_image=config.data.eval_patches_per_image,
    )


def cmd_train(args) -> int:
    config = _prepare(args)
    patch_sets = _load_patch_sets(config)
    model = DynamicSegNet(config.backbone, config.registry)
    result = train(
        model,
        patch_sets,
        config.registry,
        config.train,
        config.loss,
        out_dir=args.out,
        log_stream=sys.stdout,
    )
    best_scores = result.history[result.best_epoch]
    print(f"best epoch: {result.best_epoch}")
    print(f"best mean val dice: {float(np.mean(list(best_scores.values()))):.2f}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _prepare(args)
    bundle = load_checkpoint(
        args.checkpoint,
        expected_registry=config.registry,
        expected_backbone=config.backbone,
    )
    patch_sets = _load_patch_sets(config)
    table = metrics.evaluate_model(
        bundle.model,
        patch_sets["test"],
        config.registry,
        threshold=config.metrics.foreground_threshold,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.write_csv(out_dir / "metrics.csv", config.registry)
    text = table.format_text(config.registry)
    (out_dir / "metrics.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_aggregate(args) -> int:
    config = _prepare(args)
    bundle = load_checkpoint(
        args.checkpoint,
        expected_registry=config.registry,
        expected_backbone=config.backbone,
    )
    image = data.load_image(args.image)
    stride = args.stride if args.stride is not None else config.aggregate.stride
    merged, prob_maps = aggregator.aggregate_image(
        image,
        bundle.model,
        config.registry,
        tile_stride=stride,
        tile_size=config.aggregate.tile_size,
        threshold=config.aggregate.threshold,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    Image.fromarray(merged.labels.astype(np.uint8), mode="L").save(
        out_dir / "labels.png"
    )
    overlay = aggregator.render_overlay(image, merged)
    data.save_image(out_dir / "overlay.png", overlay)
    for tissue in config.registry:
        prob16 = np.round(
            prob_maps[tissue.id].probabilities * 65535.0
        ).astype(np.uint16)
        Image.fromarray(prob16).save(out_dir / f"prob_{tissue.name}.png")
    print(f"wrote labels.png, overlay.png and {config.registry.m} probability "
          f"maps to {out_dir}")
    return EXIT_OK


def cmd_params(args) -> int:
    config = _prepare(args)
    model = DynamicSegNet(config.backbone, config.registry)
    counts = parameter_breakdown(model)
    controller_cfg = model.controller.config
    print(f"backbone parameters: {counts['backbone']}")
    print(f"controller parameters: {counts['controller']} "
          f"(input {controller_cfg.in_dim} -> output {controller_cfg.out_dim})")
    print(f"dynamic head parameters: {counts['dynamic_head']}")
    print(f"total learned parameters: {counts['total']}")
    print(f"multi-network equivalent ({config.registry.m} backbones): "
          f"{counts['multi_network_equivalent']}")
    return EXIT_OK


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "aggregate": cmd_aggregate,
    "params": cmd_params,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DynasegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
