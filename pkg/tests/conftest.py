"""Shared fixtures: synthetic paired datasets and a smoke-trained translator.

The disk fixtures follow the ingest layout (images/ + masks/<id>_segmentation
.png). Lesion pixels are darker and redder than the surrounding skin-like
texture so that both networks have real signal to learn at desk scale.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from lesionforge.ingest import DatasetManifest, PairedSample
from lesionforge.translator import TranslatorConfig, train_translator


def circle_mask(side: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


def textured_pair(rng: np.random.Generator, side: int, sample_id: str) -> PairedSample:
    """One mask/image pair whose lesion region is darker than the background."""
    m = circle_mask(
        side,
        int(rng.integers(side // 4, 3 * side // 4)),
        int(rng.integers(side // 4, 3 * side // 4)),
        int(rng.integers(max(2, side // 8), side // 4)),
    )
    if m.sum() == 0:
        m[side // 2, side // 2] = 1
    img = rng.normal(0.3, 0.08, (side, side, 3))
    img[m.astype(bool)] -= 0.55
    return PairedSample(
        id=sample_id, image=np.clip(img, -1.0, 1.0).astype(np.float32), mask=m
    ).validate()


def memory_dataset(n: int, side: int, seed: int = 0, split: str = "train") -> DatasetManifest:
    rng = np.random.default_rng(seed)
    samples = [textured_pair(rng, side, f"{split}{i:03d}") for i in range(n)]
    return DatasetManifest(samples=samples, split=split, seed=seed, source_path="memory").validate()


def build_fixture_tree(root: Path, n_train: int, n_test: int, side: int, seed: int = 0) -> Path:
    """Write a train/ + test/ ISIC-layout dataset of circle lesions to disk."""
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        images = root / split / "images"
        masks = root / split / "masks"
        images.mkdir(parents=True, exist_ok=True)
        masks.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            m = circle_mask(
                side,
                int(rng.integers(side // 4, 3 * side // 4)),
                int(rng.integers(side // 4, 3 * side // 4)),
                int(rng.integers(max(2, side // 8), side // 4)),
            )
            if m.sum() == 0:
                m[side // 2, side // 2] = 1
            base = rng.integers(130, 170)
            img = np.clip(rng.normal(base, 12, (side, side, 3)), 0, 255)
            img[m.astype(bool)] = np.clip(img[m.astype(bool)] - 70, 0, 255)
            img[..., 2] *= 0.85
            Image.fromarray(img.astype(np.uint8)).save(images / f"{split}{i:03d}.png")
            Image.fromarray(m * 255).save(masks / f"{split}{i:03d}_segmentation.png")
    return root


@pytest.fixture(scope="session")
def tiny_tree(tmp_path_factory) -> Path:
    """Small on-disk dataset for ingest/CLI tests: side 32, 6 train + 3 test."""
    return build_fixture_tree(tmp_path_factory.mktemp("tiny"), 6, 3, 32, seed=2)


@pytest.fixture(scope="session")
def desk_tree(tmp_path_factory) -> Path:
    """Criterion-scale dataset: side 64, 40 train + 10 test pairs."""
    return build_fixture_tree(tmp_path_factory.mktemp("desk"), 40, 10, 64, seed=7)


@pytest.fixture(scope="session")
def smoke_translator(tmp_path_factory):
    """Translator trained 200 steps (4 pairs x 50 epochs, batch 1) at side 64.

    Shared by the overfit smoke and the mask-confinement probe; returns
    (checkpoint, training log rows, train manifest).
    """
    train = memory_dataset(4, 64, seed=11)
    out_dir = tmp_path_factory.mktemp("smoke_gan")
    config = TranslatorConfig(
        side=64, base_channels=16, epochs=50, batch_size=1, seed=21, checkpoint_interval=50
    )
    ckpt = train_translator(train, config, out_dir=out_dir)
    log_lines = (out_dir / "training_log.tsv").read_text(encoding="utf-8").strip().splitlines()
    rows = [line.split("\t") for line in log_lines[1:]]
    return ckpt, rows, train


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for name, module in sys.modules.items():
        if name.rsplit(".", 1)[-1] != "test_acceptance":
            continue
        results = getattr(module, "RESULTS", [])
        if results:
            terminalreporter.section("acceptance criteria")
            for label, status in results:
                terminalreporter.write_line(f"{label}: {status}")
        break
