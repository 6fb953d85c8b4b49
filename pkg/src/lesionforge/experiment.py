"""End-to-end experiment orchestration with content-addressed resumability.

An experiment is described by a small YAML file (validated against a strict
schema with typo suggestions) and runs as a linear stage graph: ingest the
paired dataset, train the translator, synthesize a preview set, then per
regime compose + train a segmenter, predict on the held-out split, and score
the predictions; a final report stage renders the comparison table, density
overlays, and the synthesis grid.

Every stage records a hash of its effective inputs (config slice plus the
hashes of upstream outputs) and of each file it wrote. Re-running an
unchanged experiment verifies those hashes and skips the work; changing any
input invalidates exactly the stages downstream of it. A failing stage is
recorded with its error, everything already written stays on disk, and
downstream stages do not run.
"""

from __future__ import annotations

import dataclasses
import difflib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigurationError, DataIOError, LesionForgeError, ValidationError
from .evaluator import (
    KDE_CLIP,
    MetricRecord,
    Regime,
    RegimeReport,
    aggregate_metrics,
    compare_regimes,
    kde_estimate,
)
from .figures import KDE_METRICS, emit_figures
from .ingest import (
    AUGMENT_OPS,
    DatasetManifest,
    binarize_mask,
    load_dataset,
    load_manifest,
    resize_nearest,
    save_manifest,
    write_samples,
    _read_mask_gray,
)
from .segmenter import (
    SegmenterConfig,
    SegmenterModel,
    compose_regime_dataset,
    load_segmenter,
    predict_mask,
    save_segmenter,
    train_segmenter,
)
from .translator import (
    Checkpoint,
    TranslatorConfig,
    load_checkpoint,
    synthesize,
    train_translator,
)
from .util import canonical_json, sha256_bytes, sha256_file, write_tsv, read_tsv

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_TOP_KEYS = (
    "schema_version", "data_dir", "out_dir", "side", "regimes", "seeds",
    "translator", "segmenter", "augmentation", "evaluation", "preview_count",
)
_SEED_KEYS = ("global", "translator", "segmenter", "augmentation")
_TRANSLATOR_KEYS = (
    "epochs", "batch_size", "base_channels", "l1_weight", "adversarial_variant",
    "learning_rate", "beta1", "beta2", "dropout_keep", "dropout_decoder_only",
    "checkpoint_interval", "leaky_slope",
)
_SEGMENTER_KEYS = (
    "epochs", "batch_size", "base_channels", "depth", "learning_rate",
    "momentum", "threshold",
)
_AUGMENTATION_KEYS = ("classical_ops", "synthetic_per_real")
_EVALUATION_KEYS = ("grid_points", "boundary")


@dataclass
class Seeds:
    """The four independent randomness scopes of one experiment."""

    global_seed: int = 0
    translator: int = 0
    segmenter: int = 0
    augmentation: int = 0

    def validate(self) -> "Seeds":
        for name in ("global_seed", "translator", "segmenter", "augmentation"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ConfigurationError(f"seed {name!r} must be a non-negative integer, got {v!r}")
        return self


@dataclass
class ExperimentConfig:
    data_dir: Path
    out_dir: Path
    side: int = 128
    regimes: tuple[Regime, ...] = (Regime.NO_AUG, Regime.CLASSIC, Regime.SYNTH, Regime.ALL)
    seeds: Seeds = field(default_factory=Seeds)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    classical_ops: tuple[str, ...] = ("random", "random")
    synthetic_per_real: int = 1
    grid_points: int = 512
    boundary: str = "truncate"
    preview_count: int = 8
    schema_version: int = SCHEMA_VERSION

    def describe(self) -> dict:
        """JSON-ready view, used both for the manifest and for input hashing."""
        return {
            "schema_version": self.schema_version,
            "data_dir": str(self.data_dir),
            "out_dir": str(self.out_dir),
            "side": self.side,
            "regimes": [r.value for r in self.regimes],
            "seeds": dataclasses.asdict(self.seeds),
            "translator": dataclasses.asdict(self.translator),
            "segmenter": dataclasses.asdict(self.segmenter),
            "classical_ops": list(self.classical_ops),
            "synthetic_per_real": self.synthetic_per_real,
            "grid_points": self.grid_points,
            "boundary": self.boundary,
            "preview_count": self.preview_count,
        }


def _check_keys(mapping: dict, allowed: tuple[str, ...], section: str) -> None:
    for key in mapping:
        if key not in allowed:
            hint = difflib.get_close_matches(str(key), allowed, n=1)
            suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigurationError(f"unknown key {key!r} in {section}{suggestion}")


def _section(raw: dict, name: str, keys: tuple[str, ...]) -> dict:
    sec = raw.get(name, {})
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    _check_keys(sec, keys, f"section {name!r}")
    return sec


def validate_config(source: Path | str | dict) -> ExperimentConfig:
    """Parse and validate an experiment description.

    Accepts a YAML file path or an already-parsed mapping. Unknown keys are
    rejected with a closest-match suggestion; relative paths are resolved
    against the config file's directory.
    """
    base = Path.cwd()
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        base = path.resolve().parent
    else:
        raw = source
    if not isinstance(raw, dict):
        raise ConfigurationError("experiment config must be a mapping")

    _check_keys(raw, _TOP_KEYS, "experiment config")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    for required in ("data_dir", "out_dir"):
        if required not in raw:
            raise ConfigurationError(f"missing required key {required!r}")

    data_dir = Path(raw["data_dir"])
    if not data_dir.is_absolute():
        data_dir = base / data_dir
    out_dir = Path(raw["out_dir"])
    if not out_dir.is_absolute():
        out_dir = base / out_dir
    if not data_dir.is_dir():
        raise ConfigurationError(f"data_dir does not exist: {data_dir}")

    side = raw.get("side", 128)
    if not isinstance(side, int):
        raise ConfigurationError(f"side must be an integer, got {side!r}")

    regime_names = raw.get("regimes", [r.value for r in Regime])
    if not isinstance(regime_names, (list, tuple)) or not regime_names:
        raise ConfigurationError("regimes must be a non-empty list")
    regimes = tuple(Regime.from_string(str(r)) for r in regime_names)
    if len(set(regimes)) != len(regimes):
        raise ConfigurationError("duplicate regimes in config")

    seeds_raw = _section(raw, "seeds", _SEED_KEYS)
    seeds = Seeds(
        global_seed=seeds_raw.get("global", 0),
        translator=seeds_raw.get("translator", 0),
        segmenter=seeds_raw.get("segmenter", 0),
        augmentation=seeds_raw.get("augmentation", 0),
    ).validate()

    tr_raw = _section(raw, "translator", _TRANSLATOR_KEYS)
    translator = TranslatorConfig(side=side, seed=seeds.translator, **tr_raw).validate()
    seg_raw = _section(raw, "segmenter", _SEGMENTER_KEYS)
    segmenter = SegmenterConfig(side=side, seed=seeds.segmenter, **seg_raw).validate()

    aug_raw = _section(raw, "augmentation", _AUGMENTATION_KEYS)
    classical_ops = tuple(aug_raw.get("classical_ops", ("random", "random")))
    for op in classical_ops:
        if op != "random" and op not in AUGMENT_OPS:
            raise ConfigurationError(
                f"unknown classical op {op!r}; choose from {AUGMENT_OPS + ('random',)}"
            )
    synthetic_per_real = aug_raw.get("synthetic_per_real", 1)
    if not isinstance(synthetic_per_real, int) or synthetic_per_real < 1:
        raise ConfigurationError(f"synthetic_per_real must be an integer >= 1, got {synthetic_per_real!r}")

    ev_raw = _section(raw, "evaluation", _EVALUATION_KEYS)
    grid_points = ev_raw.get("grid_points", 512)
    if not isinstance(grid_points, int) or grid_points < 8:
        raise ConfigurationError(f"grid_points must be an integer >= 8, got {grid_points!r}")
    boundary = ev_raw.get("boundary", "truncate")
    if boundary not in ("truncate", "reflect"):
        raise ConfigurationError(f"boundary must be 'truncate' or 'reflect', got {boundary!r}")

    preview_count = raw.get("preview_count", 8)
    if not isinstance(preview_count, int) or preview_count < 1:
        raise ConfigurationError(f"preview_count must be an integer >= 1, got {preview_count!r}")

    return ExperimentConfig(
        data_dir=data_dir,
        out_dir=out_dir,
        side=side,
        regimes=regimes,
        seeds=seeds,
        translator=translator,
        segmenter=segmenter,
        classical_ops=classical_ops,
        synthetic_per_real=synthetic_per_real,
        grid_points=grid_points,
        boundary=boundary,
        preview_count=preview_count,
        schema_version=version,
    )


# ---------------------------------------------------------------------------
# Stage records and the experiment manifest
# ---------------------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    status: str  # completed | cached | failed
    inputs_hash: str
    outputs: dict[str, str] = field(default_factory=dict)  # rel path -> sha256
    auxiliary: list[str] = field(default_factory=list)      # unhashed (timing logs)
    wall_seconds: float = 0.0
    error: str = ""


@dataclass
class ExperimentManifest:
    config: dict
    stages: list[StageRecord] = field(default_factory=list)

    def stage(self, name: str) -> StageRecord | None:
        for s in self.stages:
            if s.name == name:
                return s
        return None

    def save(self, path: Path) -> None:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "stages": [dataclasses.asdict(s) for s in self.stages],
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "ExperimentManifest":
        payload = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            config=payload.get("config", {}),
            stages=[StageRecord(**s) for s in payload.get("stages", [])],
        )


def _hash_inputs(**parts) -> str:
    return sha256_bytes(canonical_json(parts).encode("utf-8"))


def _hash_tree(root: Path) -> str:
    """Content hash of a directory: every file's relative path and digest."""
    entries = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            entries[str(p.relative_to(root))] = sha256_file(p)
    return sha256_bytes(canonical_json(entries).encode("utf-8"))


# ---------------------------------------------------------------------------
# Stage bodies shared by the CLI verbs and the orchestrator
# ---------------------------------------------------------------------------

def predict_to_dir(model: SegmenterModel, manifest: DatasetManifest, out_dir: Path | str) -> list[Path]:
    """Write one <id>_pred.png per sample: 8-bit, foreground 255."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in manifest:
        pred = predict_mask(model, s.image)
        path = out_dir / f"{s.id}_pred.png"
        Image.fromarray((pred * 255).astype(np.uint8), mode="L").save(path)
        written.append(path)
    return written


METRICS_HEADER = ["id", "tp", "fp", "tn", "fn", "dice", "sensitivity", "specificity", "accuracy"]


def evaluate_predictions(
    pred_dir: Path | str,
    test: DatasetManifest,
    regime: Regime,
    out_path: Path | str | None = None,
) -> RegimeReport:
    """Score <id>_pred.png files against the manifest's masks; optionally
    persist per-image rows as TSV."""
    pred_dir = Path(pred_dir)
    records = []
    for s in test:
        path = pred_dir / f"{s.id}_pred.png"
        if not path.is_file():
            raise DataIOError(f"missing prediction for {s.id!r}: {path}")
        pred = binarize_mask(_read_mask_gray(path))
        if pred.shape != s.mask.shape:
            pred = resize_nearest(pred, s.mask.shape[0])
        from .evaluator import confusion_metrics

        records.append(confusion_metrics(pred, s.mask, id=s.id))
    report = aggregate_metrics(records, regime)
    if out_path is not None:
        rows = [
            [r.id, str(r.tp), str(r.fp), str(r.tn), str(r.fn),
             f"{r.dice:.10g}", f"{r.sensitivity:.10g}", f"{r.specificity:.10g}", f"{r.accuracy:.10g}"]
            for r in records
        ]
        write_tsv(out_path, METRICS_HEADER, rows, [f"regime\t{regime.value}", f"n\t{report.n}"])
    return report


def load_metrics(path: Path | str) -> tuple[Regime, list[MetricRecord]]:
    """Rebuild per-image records from a metrics TSV (counts are authoritative)."""
    header, rows, comments = read_tsv(path)
    meta = dict(c.split("\t", 1) for c in comments if "\t" in c)
    if "regime" not in meta:
        raise DataIOError(f"{path} has no regime comment; not a metrics file?")
    regime = Regime.from_string(meta["regime"])
    records = []
    for row in rows:
        rec = dict(zip(header, row))
        records.append(
            MetricRecord.from_counts(
                rec["id"], int(rec["tp"]), int(rec["fp"]), int(rec["tn"]), int(rec["fn"])
            )
        )
    return regime, records


def build_report(
    metrics_by_regime: dict[Regime, list[MetricRecord]],
    synth_pairs: list,
    out_dir: Path | str,
    grid_points: int = 512,
    boundary: str = "truncate",
):
    """Comparison table, per-metric density overlays, synthesis preview."""
    out_dir = Path(out_dir)
    reports = [aggregate_metrics(recs, regime) for regime, recs in metrics_by_regime.items()]
    # automatic bandwidth fails when every value coincides; a fixed fraction
    # of the unit interval still draws a visible bump for those
    fallback_bw = 0.05 * (KDE_CLIP[1] - KDE_CLIP[0])
    curves: dict[str, dict[str, object]] = {m: {} for m in KDE_METRICS}
    for report in reports:
        for m in KDE_METRICS:
            values = [getattr(r, m) for r in report.per_image]
            for bw in (None, fallback_bw):
                try:
                    curves[m][report.regime.label] = kde_estimate(
                        values, KDE_CLIP, bandwidth=bw, grid_points=grid_points, boundary=boundary
                    )
                    break
                except LesionForgeError as exc:
                    if bw is not None:
                        logger.warning("no %s density for %s: %s", m, report.regime.label, exc)
    return emit_figures(reports, curves, synth_pairs, out_dir)


# ---------------------------------------------------------------------------
# The orchestrator
# ---------------------------------------------------------------------------

class _StageFailed(Exception):
    """Internal sentinel wrapping the original stage exception."""

    def __init__(self, original: BaseException):
        super().__init__(str(original))
        self.original = original


def run_experiment(config: ExperimentConfig, force: bool = False) -> ExperimentManifest:
    """Execute (or resume) the full pipeline under config.out_dir.

    Returns the manifest of stage records; raises the first stage error after
    recording it. force=True re-runs everything regardless of cached hashes.
    """
    out_root = config.out_dir
    out_root.mkdir(parents=True, exist_ok=True)
    manifest_path = out_root / "manifest.json"
    previous = ExperimentManifest.load(manifest_path) if manifest_path.is_file() else ExperimentManifest(config={})
    manifest = ExperimentManifest(config=config.describe())

    # lazily loaded shared state
    state: dict = {}

    def get_train() -> DatasetManifest:
        if "train" not in state:
            state["train"] = load_manifest(out_root / "ingest" / "train_manifest.tsv", side=config.side)
        return state["train"]

    def get_test() -> DatasetManifest:
        if "test" not in state:
            state["test"] = load_manifest(out_root / "ingest" / "test_manifest.tsv", side=config.side)
        return state["test"]

    def get_ckpt() -> Checkpoint:
        if "ckpt" not in state:
            state["ckpt"] = load_checkpoint(out_root / "translator" / "translator.ckpt")
        return state["ckpt"]

    def run_stage(name: str, inputs_hash: str, fn) -> StageRecord:
        prev = previous.stage(name)
        if prev is not None and not force and prev.status in ("completed", "cached") and prev.inputs_hash == inputs_hash:
            intact = all(
                (out_root / rel).is_file() and sha256_file(out_root / rel) == digest
                for rel, digest in prev.outputs.items()
            )
            if intact:
                record = StageRecord(
                    name=name, status="cached", inputs_hash=inputs_hash,
                    outputs=dict(prev.outputs), auxiliary=list(prev.auxiliary),
                    wall_seconds=prev.wall_seconds,
                )
                manifest.stages.append(record)
                manifest.save(manifest_path)
                logger.info("stage %s: cached (inputs unchanged, outputs intact)", name)
                return record
        tic = time.monotonic()
        try:
            hashed_paths, aux_paths = fn()
        except BaseException as exc:
            record = StageRecord(
                name=name, status="failed", inputs_hash=inputs_hash,
                wall_seconds=time.monotonic() - tic, error=f"{type(exc).__name__}: {exc}",
            )
            manifest.stages.append(record)
            manifest.save(manifest_path)
            raise _StageFailed(exc) from exc
        record = StageRecord(
            name=name,
            status="completed",
            inputs_hash=inputs_hash,
            outputs={str(Path(p).relative_to(out_root)): sha256_file(p) for p in hashed_paths},
            auxiliary=[str(Path(p).relative_to(out_root)) for p in aux_paths],
            wall_seconds=time.monotonic() - tic,
        )
        manifest.stages.append(record)
        manifest.save(manifest_path)
        logger.info("stage %s: completed in %.1fs (%d outputs)", name, record.wall_seconds, len(record.outputs))
        return record

    def stage_output_hashes(record: StageRecord) -> dict[str, str]:
        return record.outputs

    try:
        # ingest -------------------------------------------------------
        data_hash = _hash_tree(config.data_dir)

        def do_ingest():
            ingest_dir = out_root / "ingest"
            ingest_dir.mkdir(parents=True, exist_ok=True)
            train = load_dataset(config.data_dir / "train", "train", side=config.side, seed=config.seeds.global_seed)
            test = load_dataset(config.data_dir / "test", "test", side=config.side, seed=config.seeds.global_seed)
            state["train"], state["test"] = train, test
            train_path = ingest_dir / "train_manifest.tsv"
            test_path = ingest_dir / "test_manifest.tsv"
            save_manifest(train, train_path)
            save_manifest(test, test_path)
            return [train_path, test_path], []

        ingest_rec = run_stage(
            "ingest",
            _hash_inputs(side=config.side, seed=config.seeds.global_seed, data=data_hash),
            do_ingest,
        )

        # translator ---------------------------------------------------
        def do_translator():
            tr_dir = out_root / "translator"
            ckpt = train_translator(get_train(), config.translator, out_dir=tr_dir)
            state["ckpt"] = ckpt
            return [tr_dir / "translator.ckpt"], [tr_dir / "training_log.tsv"]

        translator_rec = run_stage(
            "train-translator",
            _hash_inputs(
                upstream=stage_output_hashes(ingest_rec),
                translator=dataclasses.asdict(config.translator),
            ),
            do_translator,
        )

        # synthesis preview --------------------------------------------
        def do_synth():
            synth_dir = out_root / "synth"
            train = get_train()
            take = min(config.preview_count, len(train))
            masks = [s.mask for s in train.samples[:take]]
            ids = [s.id for s in train.samples[:take]]
            result = synthesize(get_ckpt(), masks, dropout_seed=config.seeds.augmentation, ids=ids)
            written = write_samples(result.samples, synth_dir)
            preview = DatasetManifest(
                samples=result.samples, split="train",
                seed=config.seeds.augmentation, source_path=str(synth_dir),
            )
            manifest_file = synth_dir / "manifest.tsv"
            save_manifest(preview, manifest_file)
            return written + [manifest_file], []

        synth_rec = run_stage(
            "synthesize",
            _hash_inputs(
                upstream=stage_output_hashes(translator_rec),
                seed=config.seeds.augmentation,
                preview_count=config.preview_count,
            ),
            do_synth,
        )

        # per-regime ----------------------------------------------------
        metrics_records: dict[str, StageRecord] = {}
        for regime in config.regimes:
            reg_dir = out_root / regime.value
            needs_ckpt = regime in (Regime.SYNTH, Regime.ALL)
            ckpt_hashes = stage_output_hashes(translator_rec) if needs_ckpt else {}

            def do_train(regime=regime, reg_dir=reg_dir, needs_ckpt=needs_ckpt):
                composed = compose_regime_dataset(
                    get_train(), regime,
                    checkpoint=get_ckpt() if needs_ckpt else None,
                    seed=config.seeds.augmentation,
                    classical_ops=config.classical_ops,
                    synthetic_per_real=config.synthetic_per_real,
                )
                model = train_segmenter(composed, config.segmenter, out_dir=reg_dir)
                model_path = reg_dir / "segmenter.bin"
                save_segmenter(model, model_path)
                return [model_path], [reg_dir / "segmenter_log.tsv"]

            train_rec = run_stage(
                f"train-{regime.value}",
                _hash_inputs(
                    upstream=stage_output_hashes(ingest_rec),
                    ckpt=ckpt_hashes,
                    segmenter=dataclasses.asdict(config.segmenter),
                    augmentation={
                        "classical_ops": list(config.classical_ops),
                        "synthetic_per_real": config.synthetic_per_real,
                        "seed": config.seeds.augmentation,
                    },
                    regime=regime.value,
                ),
                do_train,
            )

            def do_predict(regime=regime, reg_dir=reg_dir):
                model = load_segmenter(reg_dir / "segmenter.bin")
                return predict_to_dir(model, get_test(), reg_dir / "predictions"), []

            predict_rec = run_stage(
                f"predict-{regime.value}",
                _hash_inputs(
                    model=stage_output_hashes(train_rec),
                    test=stage_output_hashes(ingest_rec),
                ),
                do_predict,
            )

            def do_evaluate(regime=regime, reg_dir=reg_dir):
                path = reg_dir / "metrics.tsv"
                evaluate_predictions(reg_dir / "predictions", get_test(), regime, out_path=path)
                return [path], []

            metrics_records[regime.value] = run_stage(
                f"evaluate-{regime.value}",
                _hash_inputs(
                    predictions=stage_output_hashes(predict_rec),
                    test=stage_output_hashes(ingest_rec),
                ),
                do_evaluate,
            )

        # report --------------------------------------------------------
        def do_report():
            report_dir = out_root / "report"
            metrics_by_regime = {}
            for regime in config.regimes:
                r, records = load_metrics(out_root / regime.value / "metrics.tsv")
                metrics_by_regime[r] = records
            synth_pairs = list(load_manifest(out_root / "synth" / "manifest.tsv", side=config.side))
            fig_manifest = build_report(
                metrics_by_regime, synth_pairs, report_dir,
                grid_points=config.grid_points, boundary=config.boundary,
            )
            for name, err in fig_manifest.errors.items():
                logger.warning("report artifact %s failed: %s", name, err)
            return list(fig_manifest.files), []

        run_stage(
            "report",
            _hash_inputs(
                metrics={k: stage_output_hashes(v) for k, v in metrics_records.items()},
                synth=stage_output_hashes(synth_rec),
                grid_points=config.grid_points,
                boundary=config.boundary,
            ),
            do_report,
        )
    except _StageFailed as wrapper:
        raise wrapper.original
    return manifest
