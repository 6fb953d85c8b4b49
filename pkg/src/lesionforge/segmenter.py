"""U-shaped segmentation network and the four training-set compositions.

The segmenter consumes a 3-channel image and emits a per-pixel lesion
probability; thresholding at 0.5 (inclusive) yields the predicted mask.
Training sets are composed per regime: real images only, real plus classical
geometric augmentation, real plus translator-synthesized pairs, or all three
together. Synthetic samples never reach a test split.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DataIOError, NumericError, ValidationError
from .evaluator import Regime
from .ingest import (
    DatasetManifest,
    PairedSample,
    classical_augment,
    validate_image,
)
from .translator import Checkpoint, TranslatorModel, synthesize
from .util import canonical_json, mix_seed

logger = logging.getLogger(__name__)

SEGMENTER_MAGIC = b"LFSG"
SEGMENTER_VERSION = 1
WEIGHT_INIT_STD = 0.02

DEFAULT_CLASSICAL_OPS = ("random", "random")


@dataclass
class SegmenterConfig:
    side: int = 128
    base_channels: int = 32
    depth: int = 4           # pooling levels between input and bottleneck
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    threshold: float = 0.5
    seed: int = 0

    def validate(self) -> "SegmenterConfig":
        if self.side < 2 ** self.depth or self.side % 2 ** self.depth:
            raise ConfigurationError(
                f"side {self.side} is not divisible by 2^depth = {2 ** self.depth}"
            )
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.epochs < 0 or self.batch_size < 1 or self.base_channels < 1 or self.depth < 1:
            raise ConfigurationError("epochs must be >= 0; batch_size, base_channels, depth >= 1")
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("learning_rate must be > 0 and momentum in [0, 1)")
        return self


class _DoubleConv(nn.Module):
    """(conv3x3 -> batch norm -> relu) twice."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class SegmenterNet(nn.Module):
    """Contracting path, bottleneck, expanding path with skip concatenation,
    then a 1x1 conv and a sigmoid for per-pixel probabilities."""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        ch = [config.base_channels * 2**i for i in range(config.depth + 1)]
        self.down = nn.ModuleList()
        prev = 3
        for c in ch[:-1]:
            self.down.append(_DoubleConv(prev, c))
            prev = c
        self.bottleneck = _DoubleConv(prev, ch[-1])
        self.up_convs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for c in reversed(ch[:-1]):
            self.up_convs.append(nn.ConvTranspose2d(2 * c, c, 2, 2))
            self.up_blocks.append(_DoubleConv(2 * c, c))
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up_convs, self.up_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


@dataclass
class SegmenterModel:
    net: SegmenterNet
    config: SegmenterConfig
    trained_epochs: int = 0
    history: list = field(default_factory=list)


def build_segmenter(config: SegmenterConfig) -> SegmenterModel:
    """Construct the network with seeded Gaussian conv initialization."""
    config.validate()
    net = SegmenterNet(config)
    g = torch.Generator().manual_seed(mix_seed(config.seed, 0))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, WEIGHT_INIT_STD, generator=g)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
    return SegmenterModel(net=net, config=config)


# ---------------------------------------------------------------------------
# Regime composition
# ---------------------------------------------------------------------------

def compose_regime_dataset(
    train: DatasetManifest,
    regime: Regime,
    checkpoint: Checkpoint | TranslatorModel | None = None,
    seed: int = 0,
    classical_ops: tuple[str, ...] = DEFAULT_CLASSICAL_OPS,
    synthetic_per_real: int = 1,
) -> DatasetManifest:
    """Assemble the training set a regime dictates.

    Real samples always come first, then classical copies (one per entry in
    classical_ops, per real sample), then synthetic copies (synthetic_per_real
    per real sample, generated from the real masks). Regimes needing
    synthesis require a translator checkpoint.
    """
    if train.split != "train":
        raise ValidationError(f"regime composition only applies to the train split, got {train.split!r}")
    if len(train) == 0:
        raise ValidationError("cannot compose a regime from an empty manifest")
    if synthetic_per_real < 1:
        raise ConfigurationError(f"synthetic_per_real must be >= 1, got {synthetic_per_real}")

    reals = [s for s in train]
    samples = list(reals)

    if regime in (Regime.CLASSIC, Regime.ALL):
        for i, s in enumerate(reals):
            samples.extend(classical_augment(s, classical_ops, seed=mix_seed(seed, i)))

    if regime in (Regime.SYNTH, Regime.ALL):
        if checkpoint is None:
            raise ConfigurationError(f"regime {regime.label} needs a trained translator checkpoint")
        model = checkpoint.to_model() if isinstance(checkpoint, Checkpoint) else checkpoint
        masks = [s.mask for s in reals]
        ids = [s.id for s in reals]
        for j in range(1, synthetic_per_real + 1):
            suffix = "-synth" if j == 1 else f"-synth{j}"
            result = synthesize(model, masks, dropout_seed=mix_seed(seed, 7000 + j), ids=ids, suffix=suffix)
            samples.extend(result.samples)
            for skipped_id, reason in result.skipped:
                logger.warning("regime %s: dropped %s (%s)", regime.label, skipped_id, reason)

    composed = DatasetManifest(samples=samples, split="train", seed=train.seed, source_path=train.source_path)
    composed.validate()
    logger.info(
        "regime %s: %d real + %d classical + %d synthetic = %d samples",
        regime.label,
        len(reals),
        sum(1 for s in samples if s.provenance == "classical-augmented"),
        sum(1 for s in samples if s.provenance == "synthetic"),
        len(samples),
    )
    return composed


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

@dataclass
class SegEpochRecord:
    epoch: int
    loss: float
    wall_seconds: float


def train_segmenter(
    train: DatasetManifest,
    config: SegmenterConfig,
    out_dir: Path | str | None = None,
) -> SegmenterModel:
    """Minimize per-pixel binary cross-entropy with momentum SGD.

    Shuffling is seeded per epoch; epochs == 0 returns the initialized model
    untouched; a non-finite loss aborts the run.
    """
    config.validate()
    if len(train) == 0:
        raise ValidationError("training manifest is empty")
    for s in train:
        if s.image.shape[:2] != (config.side, config.side):
            raise ValidationError(f"sample {s.id!r} has side {s.image.shape[:2]}, config wants {config.side}")

    model = build_segmenter(config)
    images = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1), dtype=np.float32)) for s in train]
    )
    targets = torch.stack([torch.from_numpy(s.mask.astype(np.float32))[None] for s in train])
    n = len(train)

    opt = torch.optim.SGD(model.net.parameters(), lr=config.learning_rate, momentum=config.momentum)
    torch.manual_seed(mix_seed(config.seed, 1))

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "segmenter_log.tsv"

    model.net.train()
    for epoch in range(1, config.epochs + 1):
        tic = time.monotonic()
        order = np.random.default_rng(mix_seed(config.seed, 2000 + epoch)).permutation(n)
        total, n_batches = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[lo:lo + config.batch_size].copy())
            pred = model.net(images[idx])
            loss = F.binary_cross_entropy(pred, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = float(loss.detach())
            if not math.isfinite(val):
                raise NumericError(f"segmenter training diverged at epoch {epoch}: loss={val}")
            total += val
            n_batches += 1
        record = SegEpochRecord(epoch=epoch, loss=total / n_batches, wall_seconds=time.monotonic() - tic)
        model.history.append(record)
        if log_path is not None:
            new = not log_path.exists()
            with open(log_path, "a", encoding="utf-8") as fh:
                if new:
                    fh.write("epoch\tloss\twall_seconds\n")
                fh.write(f"{record.epoch}\t{record.loss:.8g}\t{record.wall_seconds:.3f}\n")

    model.trained_epochs = config.epochs
    return model


def predict_probabilities(model: SegmenterModel, image: np.ndarray) -> np.ndarray:
    """Per-pixel lesion probabilities for one HxWx3 image in [-1, 1]."""
    validate_image(image)
    if image.shape[:2] != (model.config.side, model.config.side):
        raise ValidationError(
            f"image side {image.shape[:2]} does not match configured side {model.config.side}"
        )
    model.net.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))[None]
        probs = model.net(x)[0, 0]
    return probs.numpy().astype(np.float32)


def predict_mask(model: SegmenterModel, image: np.ndarray) -> np.ndarray:
    """Thresholded prediction; probability exactly at threshold maps to 1."""
    probs = predict_probabilities(model, image)
    return (probs >= model.config.threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_segmenter(model: SegmenterModel, path: Path | str) -> None:
    """Versioned binary mirror of the checkpoint layout: magic, canonical
    JSON config, named little-endian float32 tensors in declared order."""
    path = Path(path)
    out = io.BytesIO()
    out.write(SEGMENTER_MAGIC)
    out.write(struct.pack("<I", SEGMENTER_VERSION))
    cfg_json = canonical_json(asdict(model.config)).encode("utf-8")
    out.write(struct.pack("<Q", len(cfg_json)))
    out.write(cfg_json)
    out.write(struct.pack("<I", model.trained_epochs))
    named = [(k, v) for k, v in model.net.state_dict().items() if v.is_floating_point()]
    out.write(struct.pack("<I", len(named)))
    for name, tensor in named:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        shape = tuple(tensor.shape)
        out.write(struct.pack("<B", len(shape)))
        out.write(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
        out.write(tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    path.write_bytes(out.getvalue())


def load_segmenter(path: Path | str) -> SegmenterModel:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != SEGMENTER_MAGIC:
        raise DataIOError(f"{path} is not a segmenter model file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off); off += 4
    if version != SEGMENTER_VERSION:
        raise DataIOError(f"unsupported segmenter model version {version} in {path}")
    (n,) = struct.unpack_from("<Q", blob, off); off += 8
    config = SegmenterConfig(**json.loads(blob[off:off + n].decode("utf-8"))).validate()
    off += n
    (trained_epochs,) = struct.unpack_from("<I", blob, off); off += 4
    (n_tensors,) = struct.unpack_from("<I", blob, off); off += 4
    state: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, off); off += 2
        name = blob[off:off + name_len].decode("utf-8"); off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off); off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
        state[name] = torch.from_numpy(arr)
    model = build_segmenter(config)
    model.net.load_state_dict(state, strict=False)
    model.trained_epochs = trained_epochs
    return model
