"""Conditional adversarial translator from binary masks to lesion images.

A U-shaped generator with skip connections maps a mask (its only input) to a
3-channel image in [-1, 1]; a patch-level critic scores (mask, image) pairs
on overlapping receptive fields and averages the per-patch responses. The
adversarial value being fought over is

    v(G, D) = E[log D(x, y)] + E[log(1 - D(x, G(x)))]

which the critic maximizes and the generator minimizes (optionally in the
non-saturating form), plus an L1 reconstruction term on the generator side.

Stochasticity comes exclusively from dropout, which stays active at synthesis
time; a dropout seed makes every generated image reproducible.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointError,
    ConfigurationError,
    NumericError,
    ValidationError,
)
from .ingest import (
    DatasetManifest,
    PairedSample,
    PROVENANCE_SYNTHETIC,
    validate_image,
    validate_mask,
)
from .util import canonical_json, mix_seed

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"M2L1"
CHECKPOINT_VERSION = 1
OPTIMIZER_BLOB_VERSION = 1

LOG_CLAMP_EPS = 1e-7      # probabilities clamped to [eps, 1-eps] before log
WEIGHT_INIT_STD = 0.02
CHANNEL_CAP = 8           # channel ladder: base * min(2^i, CHANNEL_CAP)
MIN_SIDE_FULL_CRITIC = 32  # below this one stride-2 critic stage is dropped

ADVERSARIAL_VARIANTS = ("saturating", "non-saturating")


@dataclass
class TranslatorConfig:
    side: int = 128
    kernel: int = 4
    stride: int = 2
    base_channels: int = 64
    leaky_slope: float = 0.2
    dropout_keep: float = 0.5
    epochs: int = 200
    batch_size: int = 1
    l1_weight: float = 100.0
    adversarial_variant: str = "non-saturating"
    seed: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    dropout_decoder_only: bool = False
    checkpoint_interval: int = 50  # epochs between periodic checkpoint writes

    @property
    def encoder_depth(self) -> int:
        """Convolutions needed to reach a 1x1 bottleneck: log2(side)."""
        return int(math.log2(self.side))

    def validate(self) -> "TranslatorConfig":
        if self.side < 16 or self.side & (self.side - 1):
            raise ConfigurationError(f"side must be a power of two >= 16, got {self.side}")
        if (self.kernel, self.stride) != (4, 2):
            raise ConfigurationError(
                f"only the 4x4/stride-2 geometry is supported, got kernel={self.kernel} stride={self.stride}"
            )
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigurationError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigurationError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")
        if self.l1_weight < 0:
            raise ConfigurationError(f"l1_weight must be >= 0, got {self.l1_weight}")
        if self.adversarial_variant not in ADVERSARIAL_VARIANTS:
            raise ConfigurationError(
                f"adversarial_variant must be one of {ADVERSARIAL_VARIANTS}, got {self.adversarial_variant!r}"
            )
        if self.epochs < 0 or self.batch_size < 1 or self.base_channels < 1:
            raise ConfigurationError("epochs must be >= 0, batch_size and base_channels >= 1")
        if self.checkpoint_interval < 1:
            raise ConfigurationError("checkpoint_interval must be >= 1")
        return self


def encoder_channels(config: TranslatorConfig) -> list[int]:
    """Encoder channel ladder, e.g. 64-128-256-512-512-512-512 at side 128."""
    return [config.base_channels * min(2**i, CHANNEL_CAP) for i in range(config.encoder_depth)]


def _dropout(x: torch.Tensor, keep: float, generator: torch.Generator | None) -> torch.Tensor:
    if keep >= 1.0:
        return x
    mask = torch.rand(x.shape, dtype=x.dtype, device=x.device, generator=generator) < keep
    return x * mask / keep


class Generator(nn.Module):
    """Encoder-decoder with skip connections from each contracting level to
    the symmetric expanding level.

    Every conv block except the first is conv -> batch norm -> dropout ->
    activation (leaky in the encoder, plain in the decoder); the 1x1
    bottleneck carries no batch norm (a single spatial value per channel has
    no batch statistics) and the output head is a bare transposed conv with a
    tanh, bounding outputs to [-1, 1]. Dropout is the noise source and is
    applied on every forward pass, training or not.
    """

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        self.config = config
        depth = config.encoder_depth
        ch = encoder_channels(config)
        k, s, p = config.kernel, config.stride, (config.kernel - config.stride) // 2

        self.enc_convs = nn.ModuleList()
        self.enc_norms = nn.ModuleDict()
        prev = 1
        for i in range(depth):
            self.enc_convs.append(nn.Conv2d(prev, ch[i], k, s, p))
            if 0 < i < depth - 1:
                self.enc_norms[str(i)] = nn.BatchNorm2d(ch[i])
            prev = ch[i]

        self.dec_convs = nn.ModuleList()
        self.dec_norms = nn.ModuleDict()
        for j in range(depth):
            if j == 0:
                cin, cout = ch[depth - 1], ch[depth - 2]
            elif j < depth - 1:
                cin, cout = 2 * ch[depth - 1 - j], ch[depth - 2 - j]
            else:
                cin, cout = 2 * ch[0], 3
            self.dec_convs.append(nn.ConvTranspose2d(cin, cout, k, s, p))
            if j < depth - 1:
                self.dec_norms[str(j)] = nn.BatchNorm2d(cout)

    def forward(
        self,
        x: torch.Tensor,
        generator: torch.Generator | None = None,
        zeroed_skips: tuple[int, ...] = (),
    ) -> torch.Tensor:
        cfg = self.config
        depth = cfg.encoder_depth
        keep = cfg.dropout_keep
        enc_keep = 1.0 if cfg.dropout_decoder_only else keep

        skips = []
        for i, conv in enumerate(self.enc_convs):
            x = conv(x)
            if str(i) in self.enc_norms:
                x = self.enc_norms[str(i)](x)
            if i > 0:
                x = _dropout(x, enc_keep, generator)
            x = F.leaky_relu(x, cfg.leaky_slope)
            skips.append(x)

        for j, conv in enumerate(self.dec_convs):
            x = conv(x)
            if j < depth - 1:
                x = self.dec_norms[str(j)](x)
                x = _dropout(x, keep, generator)
                x = F.relu(x)
                skip = skips[depth - 2 - j]
                if depth - 2 - j in zeroed_skips:
                    skip = torch.zeros_like(skip)
                x = torch.cat([x, skip], dim=1)
        return torch.tanh(x)


def critic_strides(side: int) -> list[int]:
    n_stride2 = 3 if side >= MIN_SIDE_FULL_CRITIC else 2
    return [2] * n_stride2 + [1, 1]


def critic_channels(config: TranslatorConfig, n_layers: int) -> list[int]:
    return [config.base_channels * 2**i for i in range(n_layers - 1)] + [1]


class PatchCritic(nn.Module):
    """Patch-level discriminator over channel-concatenated (mask, image)
    pairs: stride-2 stages then two stride-1 stages, kernel 4, padding 1,
    emitting a logit per overlapping patch. First layer is conv + leaky only;
    the rest are conv -> batch norm -> dropout -> leaky; the last is a bare
    conv to one channel.
    """

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        self.config = config
        strides = critic_strides(config.side)
        ch = critic_channels(config, len(strides))
        k, p = config.kernel, (config.kernel - config.stride) // 2
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleDict()
        prev = 4  # 1 mask channel + 3 image channels
        for i, (c, s) in enumerate(zip(ch, strides)):
            self.convs.append(nn.Conv2d(prev, c, k, s, p))
            if 0 < i < len(ch) - 1:
                self.norms[str(i)] = nn.BatchNorm2d(c)
            prev = c

    def forward(
        self,
        x: torch.Tensor,
        generator: torch.Generator | None = None,
        apply_dropout: bool | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        if apply_dropout is None:
            apply_dropout = self.training
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i == last:
                break
            if str(i) in self.norms:
                x = self.norms[str(i)](x)
            if i > 0 and apply_dropout:
                x = _dropout(x, cfg.dropout_keep, generator)
            x = F.leaky_relu(x, cfg.leaky_slope)
        return x  # logits, shape (B, 1, S, S)


def critic_descriptor(config: TranslatorConfig) -> list[tuple[int, int]]:
    """(kernel, stride) per critic layer, for receptive-field arithmetic."""
    return [(config.kernel, s) for s in critic_strides(config.side)]


def receptive_field(descriptor: list[tuple[int, int]]) -> int:
    """Input pixels influencing one output unit: rf += (k-1)*jump; jump *= s."""
    if not descriptor:
        raise ValidationError("empty architecture descriptor")
    rf, jump = 1, 1
    for kernel, stride in descriptor:
        if stride < 1:
            raise ValidationError(f"stride must be >= 1, got {stride}")
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def score_map_size(side: int, descriptor: list[tuple[int, int]], padding: int = 1) -> int:
    """Output side after the descriptor's conv stack: n -> (n + 2p - k)//s + 1."""
    n = side
    for kernel, stride in descriptor:
        n = (n + 2 * padding - kernel) // stride + 1
        if n < 1:
            raise ConfigurationError(f"critic stack collapses a {side}-pixel input to nothing")
    return n


@dataclass
class TranslatorModel:
    generator: Generator
    discriminator: PatchCritic
    config: TranslatorConfig
    trained_epochs: int = 0


def _init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    # conv weights ~ N(0, 0.02); biases zero; norm scale 1, shift 0
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            m.weight.data.normal_(0.0, WEIGHT_INIT_STD, generator=generator)
            m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()


def build_translator(config: TranslatorConfig) -> TranslatorModel:
    """Construct generator + critic with seeded Gaussian initialization."""
    config.validate()
    desc = critic_descriptor(config)
    smap = score_map_size(config.side, desc)
    gen = Generator(config)
    critic = PatchCritic(config)
    g = torch.Generator().manual_seed(mix_seed(config.seed, 0))
    _init_parameters(gen, g)
    _init_parameters(critic, g)
    sizes = [config.side]
    for kernel, stride in desc:
        sizes.append((sizes[-1] + 2 * ((config.kernel - config.stride) // 2) - kernel) // stride + 1)
    logger.info(
        "patch critic geometry: receptive field %d, score map %dx%d at side %d (layer arithmetic: %s)",
        receptive_field(desc), smap, smap, config.side, "->".join(str(s) for s in sizes),
    )
    if config.side == 128:
        logger.info(
            "score map note: this critic is often quoted as 30x30 at side 128; "
            "the stride arithmetic above yields %dx%d and is what this code produces",
            smap, smap,
        )
    return TranslatorModel(generator=gen, discriminator=critic, config=config)


# ---------------------------------------------------------------------------
# Tensor <-> array plumbing
# ---------------------------------------------------------------------------

def mask_to_input(mask: np.ndarray) -> torch.Tensor:
    """Binary mask -> (1, 1, H, W) float tensor in {-1, +1}."""
    validate_mask(mask)
    return torch.from_numpy(mask.astype(np.float32) * 2.0 - 1.0)[None, None]


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 array in [-1, 1] -> (1, 3, H, W) float tensor."""
    validate_image(image)
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) or (1, 3, H, W) tensor -> HxWx3 float32 array."""
    if t.dim() == 4:
        t = t[0]
    return np.ascontiguousarray(t.detach().cpu().numpy().transpose(1, 2, 0), dtype=np.float32)


@dataclass
class PatchScoreMap:
    """Per-patch real/fake probabilities plus their arithmetic mean."""

    scores: np.ndarray  # S x S float32 in (0, 1)
    mean: float


def generator_forward(model: TranslatorModel, mask: np.ndarray, dropout_seed: int) -> np.ndarray:
    """One synthesis pass: batch-norm running statistics, seeded dropout."""
    validate_mask(mask)
    if mask.shape != (model.config.side, model.config.side):
        raise ValidationError(f"mask shape {mask.shape} does not match configured side {model.config.side}")
    model.generator.eval()
    gen = torch.Generator().manual_seed(dropout_seed)
    with torch.no_grad():
        out = model.generator(mask_to_input(mask), generator=gen)
    img = tensor_to_image(out)
    return np.clip(img, -1.0, 1.0)


def discriminator_forward(model: TranslatorModel, mask: np.ndarray, image: np.ndarray) -> PatchScoreMap:
    """Inference-mode critic scores for a (mask, image) pair."""
    validate_mask(mask)
    validate_image(image)
    side = model.config.side
    if mask.shape != (side, side) or image.shape[:2] != (side, side):
        raise ValidationError(
            f"mask {mask.shape} / image {image.shape[:2]} do not match configured side {side}"
        )
    model.discriminator.eval()
    with torch.no_grad():
        logits = model.discriminator(
            torch.cat([mask_to_input(mask), image_to_tensor(image)], dim=1),
            apply_dropout=False,
        )
        probs = torch.sigmoid(logits)[0, 0]
    scores = probs.numpy().astype(np.float32)
    return PatchScoreMap(scores=scores, mean=float(probs.double().mean().item()))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

@dataclass
class TranslatorLoss:
    cgan_term: torch.Tensor    # adversarial value v(G, D), means over patches and batch
    d_objective: torch.Tensor  # -cgan_term: what the critic's optimizer descends
    g_objective: torch.Tensor  # adversarial part (per variant) + l1_weight * l1_term
    l1_term: torch.Tensor      # mean |fake - real|

    def floats(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


def _coerce(value, name: str) -> torch.Tensor:
    if isinstance(value, PatchScoreMap):
        value = value.scores
    if isinstance(value, np.ndarray):
        value = torch.from_numpy(np.ascontiguousarray(value, dtype=np.float64))
    if not isinstance(value, torch.Tensor):
        raise ValidationError(f"{name} must be an array, tensor, or score map")
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite values in {name}")
    return value


def translator_loss(real_image, fake_image, d_real, d_fake, config: TranslatorConfig) -> TranslatorLoss:
    """Evaluate the adversarial objective and its two optimization views.

    d_real / d_fake are patch probability maps (the critic's sigmoid outputs
    on the real and generated pair). Expectations are realized as means over
    the patch map and batch; log arguments are clamped to [1e-7, 1 - 1e-7].
    """
    real_t = _coerce(real_image, "real_image")
    fake_t = _coerce(fake_image, "fake_image")
    dr = _coerce(d_real, "d_real").clamp(LOG_CLAMP_EPS, 1.0 - LOG_CLAMP_EPS)
    df = _coerce(d_fake, "d_fake").clamp(LOG_CLAMP_EPS, 1.0 - LOG_CLAMP_EPS)

    cgan = torch.log(dr).mean() + torch.log(1.0 - df).mean()
    l1 = (fake_t - real_t).abs().mean()
    if config.adversarial_variant == "saturating":
        g_adv = torch.log(1.0 - df).mean()
    else:
        g_adv = -torch.log(df).mean()
    return TranslatorLoss(
        cgan_term=cgan,
        d_objective=-cgan,
        g_objective=g_adv + config.l1_weight * l1,
        l1_term=l1,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Serializable training snapshot; round-trips bitwise through files."""

    config: TranslatorConfig
    generator_state: dict[str, torch.Tensor]
    discriminator_state: dict[str, torch.Tensor]
    optimizer_blob: bytes
    epoch: int
    rng_state: bytes
    format_version: int = CHECKPOINT_VERSION

    def to_model(self) -> TranslatorModel:
        model = build_translator(self.config)
        model.generator.load_state_dict(self.generator_state, strict=False)
        model.discriminator.load_state_dict(self.discriminator_state, strict=False)
        model.trained_epochs = self.epoch
        return model


def _float_state(module: nn.Module) -> dict[str, torch.Tensor]:
    # num_batches_tracked buffers are int64 bookkeeping the momentum-based
    # running stats never read; everything that matters is floating point
    return {
        k: v.detach().clone().to(torch.float32)
        for k, v in module.state_dict().items()
        if v.is_floating_point()
    }


def checkpoint_from_model(
    model: TranslatorModel,
    epoch: int = 0,
    optimizer_g: torch.optim.Optimizer | None = None,
    optimizer_d: torch.optim.Optimizer | None = None,
) -> Checkpoint:
    blob = b""
    if optimizer_g is not None and optimizer_d is not None:
        blob = _encode_optimizers(
            (optimizer_g, list(model.generator.parameters())),
            (optimizer_d, list(model.discriminator.parameters())),
        )
    return Checkpoint(
        config=model.config,
        generator_state=_float_state(model.generator),
        discriminator_state=_float_state(model.discriminator),
        optimizer_blob=blob,
        epoch=epoch,
        rng_state=torch.get_rng_state().numpy().tobytes(),
    )


def _encode_optimizers(*pairs: tuple[torch.optim.Optimizer, list[torch.Tensor]]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<II", OPTIMIZER_BLOB_VERSION, len(pairs)))
    for opt, params in pairs:
        out.write(struct.pack("<I", len(params)))
        for p in params:
            state = opt.state.get(p)
            if not state:
                out.write(b"\x00")
                continue
            out.write(b"\x01")
            step = state["step"]
            out.write(struct.pack("<d", float(step.item() if torch.is_tensor(step) else step)))
            for key in ("exp_avg", "exp_avg_sq"):
                data = state[key].detach().to(torch.float32).numpy().astype("<f4").tobytes()
                out.write(struct.pack("<Q", len(data)))
                out.write(data)
    return out.getvalue()


def _restore_optimizers(blob: bytes, *pairs: tuple[torch.optim.Optimizer, list[torch.Tensor]]) -> None:
    if not blob:
        return
    buf = io.BytesIO(blob)
    version, n_groups = struct.unpack("<II", buf.read(8))
    if version != OPTIMIZER_BLOB_VERSION or n_groups != len(pairs):
        raise CheckpointError(f"unsupported optimizer state (version {version}, {n_groups} groups)")
    for opt, params in pairs:
        (n_params,) = struct.unpack("<I", buf.read(4))
        if n_params != len(params):
            raise CheckpointError("optimizer state does not match the model's parameter list")
        for p in params:
            flag = buf.read(1)
            if flag == b"\x00":
                continue
            (step,) = struct.unpack("<d", buf.read(8))
            tensors = {}
            for key in ("exp_avg", "exp_avg_sq"):
                (nbytes,) = struct.unpack("<Q", buf.read(8))
                arr = np.frombuffer(buf.read(nbytes), dtype="<f4").reshape(tuple(p.shape)).copy()
                tensors[key] = torch.from_numpy(arr)
            opt.state[p] = {"step": torch.tensor(step, dtype=torch.float32), **tensors}


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    """Versioned binary: magic, config as canonical JSON, then named tensors
    in declared order as little-endian float32."""
    path = Path(path)
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", ckpt.format_version))
    cfg_json = canonical_json(asdict(ckpt.config)).encode("utf-8")
    out.write(struct.pack("<Q", len(cfg_json)))
    out.write(cfg_json)
    out.write(struct.pack("<I", ckpt.epoch))
    out.write(struct.pack("<Q", len(ckpt.rng_state)))
    out.write(ckpt.rng_state)
    out.write(struct.pack("<Q", len(ckpt.optimizer_blob)))
    out.write(ckpt.optimizer_blob)
    named = [(f"G.{k}", v) for k, v in ckpt.generator_state.items()]
    named += [(f"D.{k}", v) for k, v in ckpt.discriminator_state.items()]
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


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a translator checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off); off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    (n,) = struct.unpack_from("<Q", blob, off); off += 8
    try:
        config = TranslatorConfig(**json.loads(blob[off:off + n].decode("utf-8")))
    except TypeError as exc:
        raise CheckpointError(f"checkpoint config does not match this version: {exc}") from exc
    off += n
    (epoch,) = struct.unpack_from("<I", blob, off); off += 4
    (n,) = struct.unpack_from("<Q", blob, off); off += 8
    rng_state = blob[off:off + n]; off += n
    (n,) = struct.unpack_from("<Q", blob, off); off += 8
    optimizer_blob = blob[off:off + n]; off += n
    (n_tensors,) = struct.unpack_from("<I", blob, off); off += 4
    gen_state: dict[str, torch.Tensor] = {}
    disc_state: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, off); off += 2
        name = blob[off:off + name_len].decode("utf-8"); off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off); off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
        target = gen_state if name.startswith("G.") else disc_state
        target[name[2:]] = torch.from_numpy(arr)
    return Checkpoint(
        config=config.validate(),
        generator_state=gen_state,
        discriminator_state=disc_state,
        optimizer_blob=optimizer_blob,
        epoch=epoch,
        rng_state=rng_state,
        format_version=version,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    d_objective: float
    g_objective: float
    l1_term: float
    wall_seconds: float


TRAIN_LOG_HEADER = "epoch\td_objective\tg_objective\tl1_term\twall_seconds"


def _append_log(path: Path | None, record: EpochRecord) -> None:
    if path is None:
        return
    new = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(TRAIN_LOG_HEADER + "\n")
        fh.write(
            f"{record.epoch}\t{record.d_objective:.8g}\t{record.g_objective:.8g}"
            f"\t{record.l1_term:.8g}\t{record.wall_seconds:.3f}\n"
        )


def train_translator(
    train: DatasetManifest,
    config: TranslatorConfig,
    out_dir: Path | str | None = None,
    resume: Checkpoint | None = None,
    ckpt_name: str = "translator.ckpt",
) -> Checkpoint:
    """Alternating optimization: one critic step then one generator step per
    batch, adaptive-moment optimizer on both sides, fully seeded.

    Writes translator.ckpt and training_log.tsv under out_dir when given;
    periodic checkpoints every config.checkpoint_interval epochs protect long
    runs. A non-finite loss aborts with the last good checkpoint retained.
    """
    config.validate()
    if len(train) == 0:
        raise ValidationError("training manifest is empty")
    for s in train:
        if s.mask.sum() == 0:
            raise ValidationError(f"sample {s.id!r} has an empty mask; the translator is never trained on those")
        if s.image.shape[:2] != (config.side, config.side):
            raise ValidationError(f"sample {s.id!r} has side {s.image.shape[:2]}, config wants {config.side}")

    if resume is not None:
        model = resume.to_model()
        start_epoch = resume.epoch
    else:
        model = build_translator(config)
        start_epoch = 0

    masks = torch.stack([mask_to_input(s.mask)[0] for s in train])
    images = torch.stack([image_to_tensor(s.image)[0] for s in train])
    n = len(train)

    opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=config.learning_rate,
                             betas=(config.beta1, config.beta2))
    if resume is not None:
        _restore_optimizers(
            resume.optimizer_blob,
            (opt_g, list(model.generator.parameters())),
            (opt_d, list(model.discriminator.parameters())),
        )
        torch.set_rng_state(torch.frombuffer(bytearray(resume.rng_state), dtype=torch.uint8).clone())
    else:
        torch.manual_seed(mix_seed(config.seed, 1))

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / ckpt_name
        log_path = out_dir / "training_log.tsv"

    def snapshot(epoch: int) -> Checkpoint:
        return checkpoint_from_model(model, epoch=epoch, optimizer_g=opt_g, optimizer_d=opt_d)

    last_good = snapshot(start_epoch)
    if ckpt_path is not None and config.epochs == start_epoch:
        save_checkpoint(last_good, ckpt_path)

    model.generator.train()
    model.discriminator.train()
    for epoch in range(start_epoch + 1, config.epochs + 1):
        tic = time.monotonic()
        order = np.random.default_rng(mix_seed(config.seed, 1000 + epoch)).permutation(n)
        sums = {"d": 0.0, "g": 0.0, "l1": 0.0}
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[lo:lo + config.batch_size].copy())
            x, y = masks[idx], images[idx]

            fake = model.generator(x)

            d_real = torch.sigmoid(model.discriminator(torch.cat([x, y], dim=1)))
            d_fake = torch.sigmoid(model.discriminator(torch.cat([x, fake.detach()], dim=1)))
            d_loss = translator_loss(y, fake.detach(), d_real, d_fake, config)
            opt_d.zero_grad()
            d_loss.d_objective.backward()
            opt_d.step()

            d_fake_for_g = torch.sigmoid(model.discriminator(torch.cat([x, fake], dim=1)))
            g_loss = translator_loss(y, fake, d_real.detach(), d_fake_for_g, config)
            opt_g.zero_grad()
            g_loss.g_objective.backward()
            opt_g.step()

            d_val = float(d_loss.d_objective.detach())
            g_val = float(g_loss.g_objective.detach())
            l1_val = float(g_loss.l1_term.detach())
            if not (math.isfinite(d_val) and math.isfinite(g_val)):
                if ckpt_path is not None:
                    save_checkpoint(last_good, ckpt_path)
                raise NumericError(
                    f"training diverged at epoch {epoch}: d_objective={d_val}, g_objective={g_val}; "
                    f"last good checkpoint is from epoch {last_good.epoch}"
                )
            sums["d"] += d_val
            sums["g"] += g_val
            sums["l1"] += l1_val
            n_batches += 1

        record = EpochRecord(
            epoch=epoch,
            d_objective=sums["d"] / n_batches,
            g_objective=sums["g"] / n_batches,
            l1_term=sums["l1"] / n_batches,
            wall_seconds=time.monotonic() - tic,
        )
        _append_log(log_path, record)
        last_good = snapshot(epoch)
        if ckpt_path is not None and (epoch % config.checkpoint_interval == 0 or epoch == config.epochs):
            save_checkpoint(last_good, ckpt_path)

    model.trained_epochs = config.epochs
    if ckpt_path is not None and not ckpt_path.exists():
        save_checkpoint(last_good, ckpt_path)
    return last_good


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

@dataclass
class SynthesisResult:
    samples: list[PairedSample] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (id, reason)


def synthesize(
    source: Checkpoint | TranslatorModel,
    masks: list[np.ndarray],
    dropout_seed: int,
    ids: list[str] | None = None,
    suffix: str = "-synth",
) -> SynthesisResult:
    """Generate one paired sample per mask; the input mask doubles as the
    output's annotation. Empty masks are skipped with a per-item reason and
    the batch continues.
    """
    model = source.to_model() if isinstance(source, Checkpoint) else source
    if not masks:
        raise ValidationError("no masks to synthesize from")
    if ids is not None and len(ids) != len(masks):
        raise ValidationError(f"{len(ids)} ids for {len(masks)} masks")
    result = SynthesisResult()
    for i, mask in enumerate(masks):
        base = ids[i] if ids is not None else f"mask{i:05d}"
        out_id = f"{base}{suffix}"
        if mask.sum() == 0:
            result.skipped.append((out_id, "empty mask"))
            logger.warning("skipping %s: empty mask", out_id)
            continue
        image = generator_forward(model, mask, dropout_seed=mix_seed(dropout_seed, i))
        result.samples.append(
            PairedSample(id=out_id, image=image, mask=mask.copy(), provenance=PROVENANCE_SYNTHETIC).validate()
        )
    return result
