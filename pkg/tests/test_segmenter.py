"""Segmenter tests: network geometry, regime composition, training, model files."""

import struct

import numpy as np
import pytest
import torch

from conftest import memory_dataset
from lesionforge.errors import ConfigurationError, DataIOError, ValidationError
from lesionforge.evaluator import Regime, confusion_metrics
from lesionforge.segmenter import (
    DEFAULT_CLASSICAL_OPS,
    SegmenterConfig,
    build_segmenter,
    compose_regime_dataset,
    load_segmenter,
    predict_mask,
    predict_probabilities,
    save_segmenter,
    train_segmenter,
)
from lesionforge.translator import TranslatorConfig, train_translator
from lesionforge.util import read_tsv


def seg_config(**kw):
    base = dict(side=32, base_channels=8, depth=3, batch_size=4,
                learning_rate=0.1, epochs=2, seed=13)
    base.update(kw)
    return SegmenterConfig(**base)


@pytest.fixture(scope="module")
def tiny_translator():
    train = memory_dataset(3, 32, seed=5)
    cfg = TranslatorConfig(side=32, base_channels=4, epochs=1, batch_size=2, seed=9)
    return train_translator(train, cfg)


# ---------------------------------------------------------------------------
# Configuration and construction
# ---------------------------------------------------------------------------

class TestConfig:
    def test_defaults_validate(self):
        assert SegmenterConfig().validate().side == 128

    def test_side_depth_divisibility(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            SegmenterConfig(side=24, depth=4).validate()
        with pytest.raises(ConfigurationError, match="divisible"):
            SegmenterConfig(side=8, depth=4).validate()
        SegmenterConfig(side=24, depth=3).validate()

    def test_range_checks(self):
        with pytest.raises(ConfigurationError, match="threshold"):
            SegmenterConfig(threshold=1.5).validate()
        with pytest.raises(ConfigurationError, match="depth"):
            SegmenterConfig(depth=0).validate()
        with pytest.raises(ConfigurationError, match="learning_rate"):
            SegmenterConfig(learning_rate=0.0).validate()
        with pytest.raises(ConfigurationError, match="momentum"):
            SegmenterConfig(momentum=1.0).validate()


class TestNetwork:
    def test_forward_shape_and_range(self):
        model = build_segmenter(seg_config())
        x = torch.randn(2, 3, 32, 32)
        model.net.eval()
        with torch.no_grad():
            y = model.net(x)
        assert y.shape == (2, 1, 32, 32)
        assert float(y.min()) > 0.0 and float(y.max()) < 1.0

    def test_parameter_count_frozen(self):
        model = build_segmenter(SegmenterConfig(side=16, base_channels=2, depth=1))
        assert sum(p.numel() for p in model.net.parameters()) == 499

    def test_channel_ladder_doubles_per_level(self):
        model = build_segmenter(seg_config(base_channels=4, depth=3))
        downs = [b.block[0].out_channels for b in model.net.down]
        assert downs == [4, 8, 16]
        assert model.net.bottleneck.block[0].out_channels == 32

    def test_init_deterministic_and_seed_sensitive(self):
        a = build_segmenter(seg_config(seed=1))
        b = build_segmenter(seg_config(seed=1))
        c = build_segmenter(seg_config(seed=2))
        for (ka, va), (_, vb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
            assert torch.equal(va, vb), ka
        assert not torch.equal(
            a.net.down[0].block[0].weight, c.net.down[0].block[0].weight)

    def test_norm_init(self):
        model = build_segmenter(seg_config())
        for m in model.net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                assert torch.all(m.weight == 1.0)
                assert torch.all(m.bias == 0.0)


# ---------------------------------------------------------------------------
# Prediction and thresholding
# ---------------------------------------------------------------------------

def _zero_head(model):
    with torch.no_grad():
        model.net.head.weight.zero_()
        model.net.head.bias.zero_()
    return model


class TestPrediction:
    def test_zero_logits_give_exact_half_probabilities(self):
        model = _zero_head(build_segmenter(seg_config()))
        image = memory_dataset(1, 32).samples[0].image
        probs = predict_probabilities(model, image)
        assert probs.shape == (32, 32)
        assert np.all(probs == 0.5)

    def test_threshold_is_inclusive(self):
        # probabilities exactly at the 0.5 threshold count as foreground
        model = _zero_head(build_segmenter(seg_config(threshold=0.5)))
        image = memory_dataset(1, 32).samples[0].image
        assert np.all(predict_mask(model, image) == 1)

    def test_above_half_threshold_excludes_half(self):
        model = _zero_head(build_segmenter(seg_config(threshold=0.6)))
        image = memory_dataset(1, 32).samples[0].image
        assert np.all(predict_mask(model, image) == 0)

    def test_shape_mismatch_rejected(self):
        model = build_segmenter(seg_config())
        image = memory_dataset(1, 16).samples[0].image
        with pytest.raises(ValidationError, match="configured side"):
            predict_probabilities(model, image)


# ---------------------------------------------------------------------------
# Regime composition
# ---------------------------------------------------------------------------

class TestCompose:
    def test_no_aug_is_reals_only(self):
        train = memory_dataset(4, 32, seed=3)
        composed = compose_regime_dataset(train, Regime.NO_AUG)
        assert len(composed) == 4
        assert composed.ids() == train.ids()
        assert all(s.provenance == "real" for s in composed)

    def test_classic_adds_one_copy_per_op(self):
        train = memory_dataset(4, 32, seed=3)
        composed = compose_regime_dataset(train, Regime.CLASSIC, seed=7,
                                          classical_ops=("rotate90", "flip-horizontal", "random"))
        assert len(composed) == 4 * (1 + 3)
        reals = [s for s in composed if s.provenance == "real"]
        classical = [s for s in composed if s.provenance == "classical-augmented"]
        assert len(reals) == 4 and len(classical) == 12
        assert composed.ids()[:4] == train.ids()  # reals lead
        assert all("-aug" in s.id for s in classical)

    def test_synth_regime_requires_checkpoint(self):
        train = memory_dataset(3, 32, seed=3)
        with pytest.raises(ConfigurationError, match="checkpoint"):
            compose_regime_dataset(train, Regime.SYNTH)
        with pytest.raises(ConfigurationError, match="checkpoint"):
            compose_regime_dataset(train, Regime.ALL)

    def test_synth_counts_and_ids(self, tiny_translator):
        train = memory_dataset(3, 32, seed=3)
        composed = compose_regime_dataset(train, Regime.SYNTH, checkpoint=tiny_translator, seed=7)
        assert len(composed) == 6
        synth = [s for s in composed if s.provenance == "synthetic"]
        assert [s.id for s in synth] == [f"{i}-synth" for i in train.ids()]
        # each synthetic pair reuses its source mask verbatim
        by_id = {s.id: s for s in composed}
        for real in train:
            assert np.array_equal(by_id[f"{real.id}-synth"].mask, real.mask)

    def test_multiple_synthetic_copies_use_numbered_suffixes(self, tiny_translator):
        train = memory_dataset(2, 32, seed=3)
        composed = compose_regime_dataset(
            train, Regime.SYNTH, checkpoint=tiny_translator, seed=7, synthetic_per_real=3)
        synth_ids = [s.id for s in composed if s.provenance == "synthetic"]
        assert synth_ids == [
            "train000-synth", "train001-synth",
            "train000-synth2", "train001-synth2",
            "train000-synth3", "train001-synth3",
        ]
        by_id = {s.id: s for s in composed}
        assert not np.array_equal(
            by_id["train000-synth"].image, by_id["train000-synth2"].image)

    def test_all_regime_composition_arithmetic(self, tiny_translator):
        train = memory_dataset(3, 32, seed=3)
        composed = compose_regime_dataset(
            train, Regime.ALL, checkpoint=tiny_translator, seed=7,
            classical_ops=("rotate180",), synthetic_per_real=2)
        assert len(composed) == 3 * (1 + 1 + 2)
        tally = {}
        for s in composed:
            tally[s.provenance] = tally.get(s.provenance, 0) + 1
        assert tally == {"real": 3, "classical-augmented": 3, "synthetic": 6}

    def test_composition_is_seeded(self, tiny_translator):
        train = memory_dataset(3, 32, seed=3)
        a = compose_regime_dataset(train, Regime.ALL, checkpoint=tiny_translator, seed=7)
        b = compose_regime_dataset(train, Regime.ALL, checkpoint=tiny_translator, seed=7)
        c = compose_regime_dataset(train, Regime.ALL, checkpoint=tiny_translator, seed=8)
        for sa, sb in zip(a, b):
            assert sa.id == sb.id
            assert np.array_equal(sa.image, sb.image)
        diff = any(
            sa.id == sc.id and not np.array_equal(sa.image, sc.image)
            for sa, sc in zip(a, c))
        assert diff

    def test_split_guard(self):
        test = memory_dataset(3, 32, seed=3, split="test")
        with pytest.raises(ValidationError, match="train split"):
            compose_regime_dataset(test, Regime.NO_AUG)

    def test_empty_and_bad_counts(self):
        from lesionforge.ingest import DatasetManifest

        with pytest.raises(ValidationError, match="empty"):
            compose_regime_dataset(DatasetManifest(split="train"), Regime.NO_AUG)
        train = memory_dataset(2, 32, seed=3)
        with pytest.raises(ConfigurationError, match="synthetic_per_real"):
            compose_regime_dataset(train, Regime.NO_AUG, synthetic_per_real=0)

    def test_default_ops_are_two_random_draws(self):
        assert DEFAULT_CLASSICAL_OPS == ("random", "random")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TestTraining:
    def test_overfits_small_set(self):
        train = memory_dataset(8, 32, seed=13)
        model = train_segmenter(train, seg_config(epochs=30))
        dices = []
        for s in train:
            rec = confusion_metrics(predict_mask(model, s.image), s.mask, id=s.id)
            dices.append(rec.dice)
        assert float(np.mean(dices)) > 0.9

    def test_loss_decreases_and_history_logged(self, tmp_path):
        train = memory_dataset(4, 32, seed=13)
        model = train_segmenter(train, seg_config(epochs=5), out_dir=tmp_path)
        assert [r.epoch for r in model.history] == [1, 2, 3, 4, 5]
        assert model.history[-1].loss < model.history[0].loss
        header, rows, _ = read_tsv(tmp_path / "segmenter_log.tsv")
        assert header == ["epoch", "loss", "wall_seconds"]
        assert len(rows) == 5

    def test_training_is_seeded(self):
        train = memory_dataset(3, 32, seed=13)
        a = train_segmenter(train, seg_config(epochs=2))
        b = train_segmenter(train, seg_config(epochs=2))
        for (k, va), (_, vb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
            if va.is_floating_point():
                assert torch.equal(va, vb), k

    def test_zero_epochs_returns_initialized_model(self):
        train = memory_dataset(2, 32, seed=13)
        trained = train_segmenter(train, seg_config(epochs=0))
        fresh = build_segmenter(seg_config(epochs=0))
        for (k, va), (_, vb) in zip(trained.net.state_dict().items(), fresh.net.state_dict().items()):
            assert torch.equal(va, vb), k
        assert trained.trained_epochs == 0
        assert trained.history == []

    def test_input_validation(self):
        from lesionforge.ingest import DatasetManifest

        with pytest.raises(ValidationError, match="empty"):
            train_segmenter(DatasetManifest(split="train"), seg_config())
        with pytest.raises(ValidationError, match="config wants"):
            train_segmenter(memory_dataset(2, 16, seed=1), seg_config(side=32))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

class TestModelFile:
    def test_round_trip_bitwise_and_prediction_equal(self, tmp_path):
        train = memory_dataset(3, 32, seed=13)
        model = train_segmenter(train, seg_config(epochs=2))
        path = tmp_path / "seg.bin"
        save_segmenter(model, path)
        loaded = load_segmenter(path)
        assert loaded.config == model.config
        assert loaded.trained_epochs == model.trained_epochs
        for (k, va), (_, vb) in zip(model.net.state_dict().items(), loaded.net.state_dict().items()):
            if va.is_floating_point():
                assert torch.equal(va, vb), k
        image = train.samples[0].image
        assert np.array_equal(predict_probabilities(model, image),
                              predict_probabilities(loaded, image))

    def test_double_save_byte_identical(self, tmp_path):
        model = build_segmenter(seg_config())
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_segmenter(model, p1)
        save_segmenter(load_segmenter(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_and_version(self, tmp_path):
        model = build_segmenter(seg_config())
        path = tmp_path / "seg.bin"
        save_segmenter(model, path)
        bogus = tmp_path / "bogus.bin"
        bogus.write_bytes(b"WHAT" + path.read_bytes()[4:])
        with pytest.raises(DataIOError, match="bad magic"):
            load_segmenter(bogus)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 42)
        vers = tmp_path / "vers.bin"
        vers.write_bytes(bytes(blob))
        with pytest.raises(DataIOError, match="version"):
            load_segmenter(vers)
