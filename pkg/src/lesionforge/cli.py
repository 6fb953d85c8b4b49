"""Command line entry points.

Nine subcommands cover the pipeline piecewise (ingest, mask-gen, train-gan,
synth, train-seg, predict, evaluate, report) plus `run`, which executes a
whole experiment from a YAML description with stage caching.

Exit codes: 0 on success, 2 for configuration and validation problems
(including argparse usage errors), 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import ConfigurationError, LesionForgeError, ValidationError
from .evaluator import METRICS, Regime, render_table
from .experiment import (
    build_report,
    evaluate_predictions,
    load_metrics,
    predict_to_dir,
    run_experiment,
    validate_config,
)
from .ingest import (
    DatasetManifest,
    SPLITS,
    load_dataset,
    load_manifest,
    save_manifest,
    write_samples,
)
from .maskforge import (
    DeformationField,
    elastic_deform,
    fit_pca_shape_model,
    import_mask,
    make_geometric_mask,
    random_geometric_spec,
    sample_pca_mask,
    save_shape_model,
)
from .segmenter import (
    SegmenterConfig,
    compose_regime_dataset,
    load_segmenter,
    save_segmenter,
    train_segmenter,
)
from .translator import (
    TranslatorConfig,
    load_checkpoint,
    synthesize,
    train_translator,
)
from .util import mix_seed

logger = logging.getLogger(__name__)

REGIME_CHOICES = tuple(r.value for r in Regime)


def _write_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def _read_mask_dir(masks_dir: Path, side: int) -> tuple[list[np.ndarray], list[str]]:
    paths = sorted(p for p in masks_dir.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise ConfigurationError(f"no .png masks under {masks_dir}")
    return [import_mask(p, side) for p in paths], [p.stem for p in paths]


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    manifest = load_dataset(args.data, args.split, side=args.side, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, args.out)
    print(f"ingested {len(manifest)} pairs from {args.data} -> {args.out}")
    return 0


def cmd_mask_gen(args: argparse.Namespace) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    written = 0
    skipped = 0
    if args.mode == "geometric":
        rng = np.random.default_rng(args.seed)
        for i in range(args.count):
            spec = random_geometric_spec(rng, args.side)
            try:
                mask = make_geometric_mask(spec, args.side)
            except LesionForgeError as exc:
                logger.warning("mask %d (%s): %s", i, spec.get("kind"), exc)
                skipped += 1
                continue
            _write_mask_png(mask, args.out / f"{spec['kind']}{i:05d}.png")
            written += 1
    elif args.mode == "elastic":
        if args.masks is None:
            raise ConfigurationError("--masks is required for elastic mode")
        masks, ids = _read_mask_dir(args.masks, args.side)
        for copy in range(args.copies):
            for i, (mask, mask_id) in enumerate(zip(masks, ids)):
                field = DeformationField(
                    amplitude=args.amplitude,
                    smoothing_sigma=args.smoothing,
                    seed=mix_seed(args.seed, copy * len(masks) + i),
                    grid_size=args.grid_size,
                )
                try:
                    warped = elastic_deform(mask, field)
                except LesionForgeError as exc:
                    logger.warning("deforming %s (copy %d): %s", mask_id, copy, exc)
                    skipped += 1
                    continue
                suffix = f"-def{copy}" if args.copies > 1 else "-def"
                _write_mask_png(warped, args.out / f"{mask_id}{suffix}.png")
                written += 1
    else:  # pca
        if args.masks is None:
            raise ConfigurationError("--masks is required for pca mode")
        masks, _ = _read_mask_dir(args.masks, args.side)
        model = fit_pca_shape_model(masks, k=args.components)
        if args.save_model is not None:
            args.save_model.parent.mkdir(parents=True, exist_ok=True)
            save_shape_model(model, args.save_model)
            print(f"shape model ({model.k} components) -> {args.save_model}")
        rng = np.random.default_rng(args.seed)
        for i in range(args.count):
            weights = {j: float(rng.uniform(-1.0, 1.0)) for j in range(model.k)}
            try:
                mask = sample_pca_mask(model, weights)
            except LesionForgeError as exc:
                logger.warning("pca sample %d: %s", i, exc)
                skipped += 1
                continue
            _write_mask_png(mask, args.out / f"pca{i:05d}.png")
            written += 1
    print(f"wrote {written} masks to {args.out}" + (f" ({skipped} skipped)" if skipped else ""))
    return 0


def cmd_train_gan(args: argparse.Namespace) -> int:
    config = TranslatorConfig(
        side=args.side,
        epochs=args.epochs,
        seed=args.seed,
        l1_weight=args.l1_weight,
        batch_size=args.batch_size,
        base_channels=args.base_channels,
        adversarial_variant=args.variant,
        checkpoint_interval=args.checkpoint_interval,
    )
    train = load_dataset(args.data, "train", side=args.side, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    train_translator(train, config, out_dir=args.out.parent, ckpt_name=args.out.name)
    print(f"trained translator for {config.epochs} epochs on {len(train)} pairs -> {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    masks, ids = _read_mask_dir(args.masks, ckpt.config.side)
    result = synthesize(ckpt, masks, dropout_seed=args.seed, ids=ids)
    write_samples(result.samples, args.out)
    manifest = DatasetManifest(
        samples=result.samples, split="train", seed=args.seed, source_path=str(args.out)
    )
    save_manifest(manifest, Path(args.out) / "manifest.tsv")
    msg = f"synthesized {len(result.samples)} pairs -> {args.out}"
    if result.skipped:
        msg += f" ({len(result.skipped)} skipped: {', '.join(i for i, _ in result.skipped[:5])})"
    print(msg)
    return 0


def cmd_train_seg(args: argparse.Namespace) -> int:
    regime = Regime.from_string(args.regime)
    train = load_dataset(args.data, "train", side=args.side, seed=args.seed)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt is not None else None
    composed = compose_regime_dataset(
        train, regime,
        checkpoint=ckpt,
        seed=args.aug_seed,
        classical_ops=tuple(args.classical_ops.split(",")) if args.classical_ops else ("random", "random"),
        synthetic_per_real=args.synthetic_per_real,
    )
    config = SegmenterConfig(
        side=args.side,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch_size,
        base_channels=args.base_channels,
        depth=args.depth,
        learning_rate=args.lr,
        threshold=args.threshold,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model = train_segmenter(composed, config, out_dir=args.out.parent)
    save_segmenter(model, args.out)
    print(
        f"trained {regime.label} segmenter on {len(composed)} samples "
        f"for {config.epochs} epochs -> {args.out}"
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_segmenter(args.model)
    data = load_dataset(args.data, args.split, side=model.config.side, seed=0)
    written = predict_to_dir(model, data, args.out)
    print(f"wrote {len(written)} predictions to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    regime = Regime.from_string(args.regime)
    test = load_dataset(args.data, args.split, side=args.side, seed=0)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate_predictions(args.pred, test, regime, out_path=args.out)
    print(f"scored {report.n} predictions ({regime.label}) -> {args.out}")
    for m in METRICS:
        print(f"  {m}: {report.cell(m)}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    metrics_by_regime = {}
    for path in args.metrics:
        regime, records = load_metrics(path)
        if regime in metrics_by_regime:
            raise ConfigurationError(f"duplicate regime {regime.value!r} across metrics files")
        metrics_by_regime[regime] = records
    synth_pairs = []
    if args.synth is not None:
        synth_pairs = list(load_manifest(Path(args.synth) / "manifest.tsv", side=args.side))
    manifest = build_report(
        metrics_by_regime, synth_pairs, args.out,
        grid_points=args.grid_points, boundary=args.boundary,
    )
    for name, err in manifest.errors.items():
        logger.warning("artifact %s not produced: %s", name, err)
    print(f"wrote {len(manifest.files)} report files to {args.out}")
    table_txt = Path(args.out) / "comparison_table.txt"
    if table_txt.is_file():
        print(table_txt.read_text(encoding="utf-8"), end="")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = validate_config(args.config)
    manifest = run_experiment(config, force=args.force)
    for stage in manifest.stages:
        print(f"  {stage.name}: {stage.status} ({stage.wall_seconds:.1f}s)")
    table_txt = config.out_dir / "report" / "comparison_table.txt"
    if table_txt.is_file():
        print(table_txt.read_text(encoding="utf-8"), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionforge",
        description="Mask-conditioned lesion synthesis and segmentation augmentation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load an images/+masks/ tree into a manifest")
    p.add_argument("--data", type=Path, required=True, help="directory with images/ and masks/")
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="manifest TSV to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mask-gen", help="generate binary masks (geometric, elastic, or PCA)")
    p.add_argument("--mode", choices=("geometric", "elastic", "pca"), required=True)
    p.add_argument("--count", type=int, default=16, help="masks to generate (geometric/pca)")
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--masks", type=Path, help="source mask directory (elastic/pca)")
    p.add_argument("--amplitude", type=float, default=10.0, help="elastic: displacement bound, pixels")
    p.add_argument("--smoothing", type=float, default=16.0, help="elastic: Gaussian sigma, pixels")
    p.add_argument("--grid-size", type=int, default=4, help="elastic: control grid side")
    p.add_argument("--copies", type=int, default=1, help="elastic: deformed copies per source")
    p.add_argument("--components", type=int, default=8, help="pca: components to keep")
    p.add_argument("--save-model", type=Path, help="pca: also save the fitted shape model")
    p.add_argument("--out", type=Path, required=True, help="output mask directory")
    p.set_defaults(func=cmd_mask_gen)

    p = sub.add_parser("train-gan", help="train the mask-to-image translator")
    p.add_argument("--data", type=Path, required=True, help="training directory (images/ + masks/)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l1-weight", type=float, default=100.0)
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--base-channels", type=int, default=64)
    p.add_argument("--variant", choices=("saturating", "non-saturating"), default="non-saturating")
    p.add_argument("--checkpoint-interval", type=int, default=50)
    p.add_argument("--out", type=Path, required=True, help="checkpoint file to write")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("synth", help="synthesize images from a mask directory")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--masks", type=Path, required=True, help="directory of binary mask PNGs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory (images/ + masks/)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", help="train a segmenter under one regime")
    p.add_argument("--data", type=Path, required=True, help="training directory (images/ + masks/)")
    p.add_argument("--regime", choices=REGIME_CHOICES, required=True)
    p.add_argument("--ckpt", type=Path, help="translator checkpoint (m2l/all regimes)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aug-seed", type=int, default=0)
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--classical-ops", help="comma-separated ops, default random,random")
    p.add_argument("--synthetic-per-real", type=int, default=1)
    p.add_argument("--out", type=Path, required=True, help="model file to write")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("predict", help="write <id>_pred.png for every sample")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="directory of <id>_pred.png files")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--regime", choices=REGIME_CHOICES, required=True)
    p.add_argument("--out", type=Path, required=True, help="metrics TSV to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="comparison table, density overlays, synthesis grid")
    p.add_argument("--metrics", type=Path, nargs="+", required=True, help="metrics TSV files")
    p.add_argument("--synth", type=Path, help="synth output directory (for the preview grid)")
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--grid-points", type=int, default=512)
    p.add_argument("--boundary", choices=("truncate", "reflect"), default="truncate")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run a whole experiment from a YAML config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError) as exc:
        logger.error("%s", exc)
        return 2
    except LesionForgeError as exc:
        logger.error("%s", exc)
        return 1
    except OSError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
