"""Command-line entry point: ``space-clip {train,evaluate,infer,ablate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import torch

from . import config as config_mod
from .ablation import REFERENCE_ABLATION_ABS_REL, AblationPlan, run_ablation
from .config import BackboneConfig, ConfigError, RunConfig
from .data import (
    DataSetupError,
    DepthDataset,
    load_image,
    load_split,
    save_depth_png,
    synthetic_dataset,
)
from .decoder import SpaceClip
from .encoder import BackboneLoadError, build_backbone
from .metrics import Protocol, format_table, write_report
from .plotting import plot_ablation, plot_error_histogram, plot_training_curves, plot_triptych, save_colorized
from .training import CheckpointError, TrainingError, evaluate, fit, load_checkpoint, model_from_checkpoint

log = logging.getLogger("space_clip")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


class IncompatibleCheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _resolve_config(args) -> RunConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "output_dir", None) is not None:
        overrides.append(f'output_dir="{args.output_dir}"')
    cfg = config_mod.load_run_config(args.config, overrides)
    # keep depth range consistent between head, loss mask and evaluation cap
    loss = dataclasses.replace(
        cfg.train.loss, min_depth=cfg.model.min_depth, max_depth=cfg.model.max_depth
    )
    cfg.train = dataclasses.replace(cfg.train, loss=loss)
    return cfg


def _echo(cfg: RunConfig, out_dir: Path) -> None:
    text = config_mod.dumps(cfg)
    print("# effective config")
    print(text, flush=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.toml").write_text(text)


def _datasets(cfg: RunConfig):
    """(train, val, test) datasets from the data section."""
    d = cfg.data
    size = cfg.model.output_size
    if d.root is not None or d.train_split or d.test_split:
        if d.root is not None and not Path(d.root).is_dir():
            raise DataSetupError(f"data root does not exist: {d.root}")
        manifest = load_split(d.root, d.train_split, d.test_split)
        train_entries = manifest.train_list
        n_val = int(len(train_entries) * cfg.train.val_fraction)
        train_part = train_entries[: len(train_entries) - n_val] if n_val else train_entries
        val_part = train_entries[len(train_entries) - n_val:] if n_val else []
        train = DepthDataset(entries=train_part, train=True, seed=cfg.train.seed, size=size,
                             repeat=d.repeat) if train_part else None
        val = DepthDataset(entries=val_part, size=size) if val_part else None
        test = DepthDataset(entries=manifest.test_list, size=size) if manifest.test_list else None
        return train, val, test
    samples = synthetic_dataset(d.synthetic_n or 4, d.synthetic_seed, size, d.synthetic_keep)
    n_val = int(len(samples) * cfg.train.val_fraction)
    fit_samples = samples[: len(samples) - n_val] if n_val else samples
    train = DepthDataset(samples=fit_samples, train=True, seed=cfg.train.seed, size=size, repeat=d.repeat)
    val = DepthDataset(samples=samples[len(samples) - n_val:], size=size) if n_val else None
    test = DepthDataset(samples=samples, size=size)
    return train, val, test


def _protocol(cfg: RunConfig, split: str, crop: str | None = None) -> Protocol:
    return Protocol(cfg.eval.min_depth, cfg.eval.max_depth, crop or cfg.eval.crop, split)


def _load_model(checkpoint: str, cfg: RunConfig | None) -> tuple[SpaceClip, RunConfig]:
    ckpt = load_checkpoint(checkpoint)
    bb = ckpt.backbone or {}
    run = cfg or RunConfig()
    if cfg is not None and cfg.model != ckpt.model_config:
        diff = [f.name for f in dataclasses.fields(cfg.model)
                if getattr(cfg.model, f.name) != getattr(ckpt.model_config, f.name)]
        raise IncompatibleCheckpointError(
            f"checkpoint {checkpoint} was trained with a different model config (fields: {', '.join(diff)})"
        )
    backbone_cfg = BackboneConfig(**{k: v for k, v in bb.items()
                                     if k in {f.name for f in dataclasses.fields(BackboneConfig)}})
    if cfg is not None and config_mod.to_dict(cfg.backbone) != config_mod.to_dict(backbone_cfg):
        raise IncompatibleCheckpointError(
            f"checkpoint {checkpoint} expects backbone {bb}, config requests {config_mod.to_dict(cfg.backbone)}"
        )
    run = dataclasses.replace(run, model=ckpt.model_config, backbone=backbone_cfg)
    try:
        model = model_from_checkpoint(ckpt, build_backbone(backbone_cfg))
    except CheckpointError as exc:
        raise IncompatibleCheckpointError(str(exc)) from exc
    return model, run


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    _echo(cfg, out)
    train, val, _ = _datasets(cfg)
    if train is None:
        raise DataSetupError("training split is empty")
    torch.manual_seed(cfg.train.seed)
    model = SpaceClip(build_backbone(cfg.backbone), cfg.model)
    result = fit(model, train, val, cfg.train, out_dir=out,
                 protocol=_protocol(cfg, "val"), max_steps=args.max_steps)
    plot_training_curves(result.steps, result.history, out / "training_curves.png")
    summary = {
        "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
        "last_checkpoint": str(result.last_checkpoint) if result.last_checkpoint else None,
        "steps": len(result.steps),
        "final_loss": result.steps[-1].loss if result.steps else None,
        "best_score": None if math.isinf(result.best_abs_rel) else result.best_abs_rel,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args) if args.config or args.override else None
    model, run = _load_model(args.checkpoint, cfg)
    if cfg is not None:
        run = dataclasses.replace(cfg, model=run.model, backbone=run.backbone)
    if args.output_dir:
        run.output_dir = args.output_dir
    out = Path(run.output_dir)
    _echo(run, out)
    train, val, test = _datasets(run)
    split = args.split
    dataset = {"test": test, "train": train, "val": val}[split]
    if dataset is None:
        raise DataSetupError(f"split {split!r} is empty for this configuration")
    if split == "train":
        dataset.train = False  # evaluate without augmentation
    protocol = _protocol(run, split, args.crop)
    report, per_image = evaluate(model, dataset, protocol, batch_size=args.batch_size)
    write_report(report, out, "metrics")
    with open(out / "per_image.jsonl", "w") as fh:
        for i, r in enumerate(per_image):
            fh.write(json.dumps({"index": i, **r.to_dict()}) + "\n")
    plot_error_histogram(per_image, out / "abs_rel_histogram.png")
    fig_dir = out / "qualitative"
    fig_dir.mkdir(exist_ok=True)
    for i in range(min(args.figures, len(dataset))):
        sample = dataset.load(i)
        pred = model.predict(torch.from_numpy(sample.image).permute(2, 0, 1)[None])[0]
        plot_triptych(sample.image, sample.gt, pred.values, fig_dir / f"sample_{i:03d}.png",
                      max_depth=run.model.max_depth, title=sample.source_id)
    print(format_table({"SPACE-CLIP": report}), end="")
    return 0


def _collect_images(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [path] if path.exists() else []


def cmd_infer(args) -> int:
    model, run = _load_model(args.checkpoint, None)
    out = Path(args.output_dir or run.output_dir)
    _echo(run, out)
    paths = _collect_images(Path(args.input))
    if not paths:
        raise DataSetupError(f"no input images found at {args.input}")
    size = run.model.output_size
    written = 0
    for p in paths:
        try:
            image = load_image(p)
        except Exception as exc:  # PIL raises several unrelated types
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        x = torch.from_numpy(image).permute(2, 0, 1)[None]
        if tuple(image.shape[:2]) != tuple(size):
            x = torch.nn.functional.interpolate(x, size=size, mode="bilinear", align_corners=False)
        depth = model.predict(x.clamp(0, 1))[0].values
        save_depth_png(depth, out / f"{p.stem}_depth.png")
        save_colorized(depth, out / f"{p.stem}_color.png", run.model.min_depth, run.model.max_depth)
        written += 1
    if written == 0:
        raise DataSetupError(f"none of the {len(paths)} input images could be read")
    print(f"wrote {2 * written} files to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    _echo(cfg, out)
    train, val, test = _datasets(cfg)
    if train is None or test is None:
        raise DataSetupError("ablation needs both training and evaluation data")
    results = run_ablation(
        AblationPlan(),
        lambda: build_backbone(cfg.backbone),
        train,
        test,
        cfg.model,
        cfg.train,
        protocol=_protocol(cfg, "test"),
        out_dir=out,
        max_steps=args.max_steps,
        val_data=val,
    )
    plot_ablation(results, out / "ablation.png", REFERENCE_ABLATION_ABS_REL)
    print((out / "ablation.tsv").read_text(), end="")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="space-clip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, config_required=False):
        p.add_argument("--config", required=config_required, help="TOML run configuration")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. train.epochs=1 (repeatable)")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the decoder")
    shared(p)
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train", "val"), default="test")
    p.add_argument("--crop", choices=("garg", "none"))
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--figures", type=int, default=4, help="qualitative figures to render")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="predict depth for an image or a directory of images")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare the four component configurations")
    shared(p)
    p.add_argument("--max-steps", type=int, help="optimizer steps per row (desk-scale runs)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IncompatibleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataSetupError, CheckpointError, BackboneLoadError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
