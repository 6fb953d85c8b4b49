"""Dataset loading, resizing, normalization and classical augmentation.

Expected on-disk layout per split root (ISIC 2017 convention):

    <root>/images/<id>.png|.jpg|.jpeg
    <root>/masks/<id>_segmentation.png

Images become H x W x 3 float32 arrays in [-1, 1]; masks become H x W uint8
arrays with values in {0, 1}. A (image, mask) pair plus an id and a
provenance tag is the unit everything downstream trains on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataIOError, PairingError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_SIDE = 128
MASK_SUFFIX = "_segmentation"
MASK_BINARIZE_THRESHOLD = 128  # grayscale >= 128 -> foreground

PROVENANCE_REAL = "real"
PROVENANCE_SYNTHETIC = "synthetic"
PROVENANCE_CLASSICAL = "classical-augmented"
PROVENANCES = (PROVENANCE_REAL, PROVENANCE_SYNTHETIC, PROVENANCE_CLASSICAL)

SPLITS = ("train", "validation", "test")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# Spatial transform menu for classical augmentation. "random" draws one of
# these from the seeded RNG.
AUGMENT_OPS = (
    "rotate90",
    "rotate180",
    "rotate270",
    "flip-horizontal",
    "flip-vertical",
)


def validate_image(arr: np.ndarray) -> np.ndarray:
    """Check the image contract: HxWxC float, C in {1,3}, finite, within [-1, 1]."""
    if not isinstance(arr, np.ndarray) or arr.ndim != 3:
        raise ValidationError(f"image must be an HxWxC array, got shape {getattr(arr, 'shape', None)}")
    if arr.shape[2] not in (1, 3):
        raise ValidationError(f"image must have 1 or 3 channels, got {arr.shape[2]}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"image must be floating point, got dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains non-finite values")
    if arr.min() < -1.0 or arr.max() > 1.0:
        raise ValidationError(f"image values outside [-1, 1]: range [{arr.min()}, {arr.max()}]")
    return arr


def validate_mask(arr: np.ndarray) -> np.ndarray:
    """Check the binary-mask contract: HxW with every value in {0, 1}."""
    if not isinstance(arr, np.ndarray) or arr.ndim != 2:
        raise ValidationError(f"mask must be an HxW array, got shape {getattr(arr, 'shape', None)}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValidationError(f"mask values must be exactly 0 or 1, found {vals[:8]}")
    return arr


@dataclass
class PairedSample:
    """A lesion image paired with its binary mask."""

    id: str
    image: np.ndarray  # H x W x 3 float32 in [-1, 1]
    mask: np.ndarray   # H x W uint8 in {0, 1}
    provenance: str = PROVENANCE_REAL

    def validate(self) -> "PairedSample":
        validate_image(self.image)
        validate_mask(self.mask)
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError(
                f"sample {self.id!r}: image {self.image.shape[:2]} and mask {self.mask.shape} disagree"
            )
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"sample {self.id!r}: unknown provenance {self.provenance!r}")
        return self


@dataclass
class DatasetManifest:
    """Ordered collection of paired samples for one split."""

    samples: list[PairedSample] = field(default_factory=list)
    split: str = "train"
    seed: int = 0
    source_path: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def validate(self) -> "DatasetManifest":
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        ids = self.ids()
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate sample ids in manifest: {dupes[:8]}")
        for s in self.samples:
            s.validate()
        return self


def resize_nearest(arr: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbor resize to side x side using the center-aligned map
    src = floor((dst + 0.5) * src_size / dst_size).

    Works on HxW and HxWxC arrays; dtype is preserved, so binary masks stay
    binary and no new values are ever introduced.
    """
    if side < 1:
        raise ValidationError(f"side must be >= 1, got {side}")
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"cannot resize array of shape {arr.shape}")
    h, w = arr.shape[:2]
    rows = ((np.arange(side) + 0.5) * h / side).astype(np.int64)
    cols = ((np.arange(side) + 0.5) * w / side).astype(np.int64)
    out = arr[rows][:, cols]
    return np.ascontiguousarray(out)


def normalize_intensity(raw: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Linear map of 8-bit intensities to [-1, 1]: v -> v / 127.5 - 1."""
    if bit_depth != 8:
        raise ValidationError(f"only 8-bit inputs are supported, got bit_depth={bit_depth}")
    values = np.asarray(raw)
    if values.size and (values.min() < 0 or values.max() > 255):
        raise ValidationError(f"raw intensities outside [0, 255]: range [{values.min()}, {values.max()}]")
    return (values.astype(np.float64) / 127.5 - 1.0).astype(np.float32)


def denormalize_intensity(img: np.ndarray) -> np.ndarray:
    """Inverse of normalize_intensity, for writing PNGs."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def binarize_mask(raw: np.ndarray, threshold: int = MASK_BINARIZE_THRESHOLD) -> np.ndarray:
    """Grayscale pixels >= threshold become 1, everything else 0."""
    return (np.asarray(raw) >= threshold).astype(np.uint8)


def _read_image_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc


def _read_mask_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I", "I;16", "1"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
                if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2])):
                    raise DataIOError(f"mask {path} has diverging color channels; expected single-channel")
                arr = arr[..., 0]
            return arr
    except OSError as exc:
        raise DataIOError(f"cannot read mask {path}: {exc}") from exc


def load_dataset(root: Path | str, split: str, side: int = DEFAULT_SIDE, seed: int = 0) -> DatasetManifest:
    """Load every image/mask pair under root, resized and normalized.

    Sample order is lexicographic by id regardless of directory listing order,
    so two loads of the same tree produce identical manifests.
    """
    root = Path(root)
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    images_dir = root / "images"
    masks_dir = root / "masks"
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise ConfigurationError(f"missing dataset directory: {d}")

    image_paths: dict[str, Path] = {}
    for p in images_dir.iterdir():
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in image_paths:
                raise PairingError(f"duplicate image id {p.stem!r} under {images_dir}", (p.stem,))
            image_paths[p.stem] = p
    if not image_paths:
        raise ConfigurationError(f"no images found under {images_dir}")

    mask_paths = {
        p.stem[: -len(MASK_SUFFIX)]: p
        for p in masks_dir.glob(f"*{MASK_SUFFIX}.png")
    }
    orphan_images = sorted(set(image_paths) - set(mask_paths))
    orphan_masks = sorted(set(mask_paths) - set(image_paths))
    if orphan_images or orphan_masks:
        raise PairingError(
            f"unpaired dataset entries under {root}: "
            f"images without masks {orphan_images[:8]}, masks without images {orphan_masks[:8]}",
            tuple(orphan_images + orphan_masks),
        )

    samples = []
    for sample_id in sorted(image_paths):
        rgb = resize_nearest(_read_image_rgb(image_paths[sample_id]), side)
        mask = resize_nearest(binarize_mask(_read_mask_gray(mask_paths[sample_id])), side)
        samples.append(
            PairedSample(id=sample_id, image=normalize_intensity(rgb), mask=mask).validate()
        )
    manifest = DatasetManifest(samples=samples, split=split, seed=seed, source_path=str(root))
    logger.info("loaded %d samples from %s (split=%s, side=%d)", len(samples), root, split, side)
    return manifest.validate()


def split_validation(manifest: DatasetManifest, fraction: float, seed: int) -> tuple[DatasetManifest, DatasetManifest]:
    """Carve a validation subset out of a training manifest by seeded shuffle."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"validation fraction must be in (0, 1), got {fraction}")
    if manifest.split != "train":
        raise ValidationError(f"can only carve validation data from a train manifest, got {manifest.split!r}")
    n_val = max(1, int(round(fraction * len(manifest))))
    if n_val >= len(manifest):
        raise ValidationError(f"validation fraction {fraction} leaves no training data")
    order = np.random.default_rng(seed).permutation(len(manifest))
    val_idx = set(order[:n_val].tolist())
    train_samples = [s for i, s in enumerate(manifest.samples) if i not in val_idx]
    val_samples = [s for i, s in enumerate(manifest.samples) if i in val_idx]
    train = DatasetManifest(train_samples, split="train", seed=seed, source_path=manifest.source_path)
    val = DatasetManifest(val_samples, split="validation", seed=seed, source_path=manifest.source_path)
    return train.validate(), val.validate()


def _apply_op(arr: np.ndarray, op: str) -> np.ndarray:
    if op == "rotate90":
        return np.ascontiguousarray(np.rot90(arr, 1))
    if op == "rotate180":
        return np.ascontiguousarray(np.rot90(arr, 2))
    if op == "rotate270":
        return np.ascontiguousarray(np.rot90(arr, 3))
    if op == "flip-horizontal":
        return np.ascontiguousarray(arr[:, ::-1])
    if op == "flip-vertical":
        return np.ascontiguousarray(arr[::-1])
    raise ValidationError(f"unknown augmentation op {op!r}; choose from {AUGMENT_OPS} or 'random'")


def classical_augment(sample: PairedSample, ops: list[str], seed: int = 0) -> list[PairedSample]:
    """Apply each requested spatial transform to image and mask identically.

    Each entry of ops is one of AUGMENT_OPS or "random" (one op drawn from the
    seeded RNG). An empty ops list returns an empty list. Output ids are
    suffixed "-aug<i>" and provenance is set to classical-augmented.
    """
    sample.validate()
    rng = np.random.default_rng(seed)
    out = []
    for i, op in enumerate(ops):
        if op == "random":
            op = AUGMENT_OPS[rng.integers(len(AUGMENT_OPS))]
        out.append(
            PairedSample(
                id=f"{sample.id}-aug{i}",
                image=_apply_op(sample.image, op),
                mask=_apply_op(sample.mask, op),
                provenance=PROVENANCE_CLASSICAL,
            ).validate()
        )
    return out


def write_samples(samples: list[PairedSample], out_dir: Path | str) -> list[Path]:
    """Write samples to an ISIC-layout tree (images/ + masks/); returns paths."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        img_path = images_dir / f"{s.id}.png"
        mask_path = masks_dir / f"{s.id}{MASK_SUFFIX}.png"
        Image.fromarray(denormalize_intensity(s.image)).save(img_path)
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(mask_path)
        written += [img_path, mask_path]
    return written


def save_manifest(manifest: DatasetManifest, path: Path | str, data_root: Path | str | None = None) -> None:
    """Persist a manifest as line-oriented TSV (id, relative paths, provenance, split)."""
    root = Path(data_root) if data_root is not None else Path(manifest.source_path)
    rows = [
        [s.id, f"images/{s.id}.png", f"masks/{s.id}{MASK_SUFFIX}.png", s.provenance, manifest.split]
        for s in manifest.samples
    ]
    comments = [
        f"split\t{manifest.split}",
        f"seed\t{manifest.seed}",
        f"source_path\t{root}",
    ]
    from .util import write_tsv

    write_tsv(path, ["id", "image_path", "mask_path", "provenance", "split"], rows, comments)


def load_manifest(path: Path | str, side: int = DEFAULT_SIDE) -> DatasetManifest:
    """Re-read a persisted manifest, loading the referenced image/mask files."""
    from .util import read_tsv

    header, rows, comments = read_tsv(path)
    meta = {}
    for c in comments:
        parts = c.split("\t")
        if len(parts) == 2:
            meta[parts[0]] = parts[1]
    root = Path(meta.get("source_path", Path(path).parent))
    samples = []
    for row in rows:
        rec = dict(zip(header, row))
        rgb = resize_nearest(_read_image_rgb(root / rec["image_path"]), side)
        mask = resize_nearest(binarize_mask(_read_mask_gray(root / rec["mask_path"])), side)
        samples.append(
            PairedSample(
                id=rec["id"],
                image=normalize_intensity(rgb),
                mask=mask,
                provenance=rec.get("provenance", PROVENANCE_REAL),
            ).validate()
        )
    return DatasetManifest(
        samples=samples,
        split=meta.get("split", "train"),
        seed=int(meta.get("seed", 0)),
        source_path=str(root),
    ).validate()


def relabel(manifest: DatasetManifest, **changes) -> DatasetManifest:
    """Shallow manifest copy with metadata fields replaced."""
    return replace(manifest, **changes)
