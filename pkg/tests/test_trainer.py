#!/usr/bin/env python3
"""
Tests for the training loop, schedules, augmentation and embedding cache
"""

import json
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import torch

from modules.bt_core import LossWeights, bt_loss_from_raw
from modules.checks import check_cache_equivalence
from modules.geometry import AlignedPair
from modules.synthdata import SyntheticPairs
from modules.trainer import (LAST_CHECKPOINT, METRICS_LOG, BTSegTrainer, EmbeddingCache, bt_loss_cached,
                             fit, lr_schedule, pad_pair, paired_augment, prepare_pairs, resize_pair)
from utils.config import SceneSpec, TrainConfig
from utils.errors import ConfigError, DatasetIOError, NumericAbort

SCENE = SceneSpec(image_size=(32, 32), max_shift_px=2, seed=3)


def tiny_config(**overrides):
    values = dict(total_steps=6, effective_batch=4, micro_batch=2, warmup_steps=0, stopgrad_steps=3,
                  crop_size=(32, 32), min_rect_side=16, stage_channels=(8, 8), stage_strides=(4, 8),
                  decoder_hidden=8, checkpoint_every=3)
    values.update(overrides)
    return TrainConfig(**values)


def labelled_pair(h=6, w=8):
    labels = np.arange(h * w).reshape(h, w)
    source = np.stack([labels, labels + 1000, labels + 2000]).astype(np.float64)
    return AlignedPair(source, source + 0.5, labels, labels / labels.max())


class TestLearningRateSchedule(unittest.TestCase):

    def test_warmup_then_decay(self):
        self.assertEqual(lr_schedule(0, 1.0, 10, 100), 0.0)
        self.assertAlmostEqual(lr_schedule(5, 1.0, 10, 100), 0.5)
        self.assertAlmostEqual(lr_schedule(10, 1.0, 10, 100), 1.0)
        self.assertAlmostEqual(lr_schedule(55, 1.0, 10, 100), 0.5)
        self.assertEqual(lr_schedule(100, 1.0, 10, 100), 0.0)

    def test_no_warmup_starts_at_base(self):
        self.assertEqual(lr_schedule(0, 2e-3, 0, 10), 2e-3)

    def test_out_of_range_step(self):
        with self.assertRaises(ValueError):
            lr_schedule(101, 1.0, 10, 100)

    def test_groups_follow_their_own_base(self):
        trainer = BTSegTrainer(tiny_config(warmup_steps=2, total_steps=10), SCENE)
        lrs = trainer.set_learning_rates(1)
        self.assertAlmostEqual(lrs["encoder"], 1.6e-3 / 2)
        self.assertAlmostEqual(lrs["projector"], 1.6e-2 / 2)


class TestAugmentation(unittest.TestCase):

    def test_identity_settings(self):
        pair = labelled_pair()
        out = paired_augment(pair, np.random.default_rng(0), (6, 8), flip_prob=0.0)
        np.testing.assert_array_equal(out.source, pair.source)
        np.testing.assert_array_equal(out.labels, pair.labels)

    def test_crop_and_flip_stay_registered(self):
        pair = labelled_pair()
        for seed in range(10):
            out = paired_augment(pair, np.random.default_rng(seed), (4, 5), flip_prob=0.5)
            self.assertEqual(out.shape, (4, 5))
            np.testing.assert_array_equal(out.source[0], out.labels)
            np.testing.assert_array_equal(out.target[0], out.labels + 0.5)
            np.testing.assert_allclose(out.confidence, out.labels / pair.labels.max())

    def test_always_flip_mirrors(self):
        pair = labelled_pair()
        out = paired_augment(pair, np.random.default_rng(0), (6, 8), flip_prob=1.0)
        np.testing.assert_array_equal(out.labels, pair.labels[:, ::-1])

    def test_crop_larger_than_pair(self):
        with self.assertRaises(ValueError):
            paired_augment(labelled_pair(), np.random.default_rng(0), (7, 8), 0.5)

    def test_padding_uses_ignore_labels(self):
        out = pad_pair(labelled_pair(), (8, 8), ignore_index=255)
        self.assertEqual(out.shape, (8, 8))
        self.assertTrue((out.labels[6:] == 255).all())
        self.assertFalse(out.confidence[6:].any())
        self.assertFalse(out.source[:, 6:].any())

    def test_resize_keeps_labels_nearest(self):
        out = resize_pair(labelled_pair(4, 4), (8, 8))
        self.assertEqual(out.shape, (8, 8))
        self.assertTrue(set(np.unique(out.labels)) <= set(range(16)))


class TestEmbeddingCache(unittest.TestCase):

    def test_full_cache_equals_monolithic_loss(self):
        self.assertTrue(check_cache_equivalence(seed=0).passed)

    def test_live_rows_get_gradient(self):
        g = torch.Generator().manual_seed(0)
        z_s = torch.randn(8, 4, generator=g, dtype=torch.float64)
        z_t = torch.randn(8, 4, generator=g, dtype=torch.float64)
        cache = EmbeddingCache(8)
        cache.push(z_s[:6], z_t[:6])
        live_s = z_s[6:].clone().requires_grad_(True)
        loss = bt_loss_cached(cache, LossWeights.for_dim(4), live=(live_s, z_t[6:]))
        expected = bt_loss_from_raw(z_s, z_t, LossWeights.for_dim(4))
        self.assertAlmostEqual(float(loss), float(expected), places=10)
        loss.backward()
        self.assertTrue(live_s.grad.any())

    def test_fifo_keeps_newest_rows(self):
        cache = EmbeddingCache(4)
        for k in range(3):
            cache.push(torch.full((2, 3), float(k)), torch.full((2, 3), float(k)))
        self.assertEqual(len(cache), 4)
        z_s, _ = cache.stacked()
        self.assertEqual(z_s[:, 0].tolist(), [1.0, 1.0, 2.0, 2.0])

    def test_underfilled_and_unbalanced(self):
        cache = EmbeddingCache(4)
        cache.push(torch.zeros(2, 3), torch.zeros(2, 3))
        self.assertFalse(cache.can_complete(1))
        with self.assertRaises(ValueError):
            cache.stacked()
        cache.source.append(torch.zeros(3))
        with self.assertRaises(ValueError):
            cache.stacked(live=(torch.zeros(2, 3), torch.zeros(2, 3)))

    def test_state_round_trip(self):
        cache = EmbeddingCache(4)
        cache.push(torch.ones(3, 2), torch.zeros(3, 2))
        other = EmbeddingCache(4)
        other.load_state_dict(cache.state_dict())
        self.assertEqual(len(other), 3)
        self.assertTrue(torch.equal(other.stacked(live=(torch.ones(1, 2), torch.ones(1, 2)))[0],
                                    torch.ones(4, 2)))


class TestPreparePairs(unittest.TestCase):

    def test_pairs_reach_crop_size(self):
        pairs, stats = prepare_pairs(SyntheticPairs(SCENE, range(4)), tiny_config())
        self.assertEqual(stats, {"kept": 4, "rejected": 0})
        for pair in pairs:
            self.assertEqual(pair.shape, (32, 32))

    def test_everything_filtered(self):
        with self.assertRaises(ConfigError):
            prepare_pairs(SyntheticPairs(SCENE, range(2)), tiny_config(min_rect_side=40))

    def test_resize_after_crop_is_default(self):
        self.assertTrue(TrainConfig().resize_after_crop)
        pairs, _ = prepare_pairs(SyntheticPairs(SCENE, range(2)), tiny_config())
        for pair in pairs:
            self.assertEqual(pair.shape, (32, 32))
            self.assertNotIn(255, np.unique(pair.labels))

    def test_padding_without_resize(self):
        pairs, _ = prepare_pairs(SyntheticPairs(SCENE, range(2)), tiny_config(resize_after_crop=False))
        for pair in pairs:
            self.assertIn(255, np.unique(pair.labels))


class TestTrainStep(unittest.TestCase):

    def setUp(self):
        self.dataset = SyntheticPairs(SCENE, range(8))

    def one_step(self, config):
        trainer = BTSegTrainer(config, SCENE)
        pairs, _ = prepare_pairs(self.dataset, config)
        batch = trainer.augment_batch(pairs, trainer.sample_indices(0, len(pairs)), 0)
        losses = trainer.train_step(batch, 0)
        return trainer, losses

    def test_stop_gradient_window_shields_encoder(self):
        with_bt, losses = self.one_step(tiny_config(alpha=0.1))
        without_bt, _ = self.one_step(tiny_config(alpha=0.0))
        self.assertIsNotNone(losses["l_bt"])
        for a, b in zip(with_bt.model.encoder.parameters(), without_bt.model.encoder.parameters()):
            self.assertTrue(torch.equal(a, b))
        for a, b in zip(with_bt.model.decoder.parameters(), without_bt.model.decoder.parameters()):
            self.assertTrue(torch.equal(a, b))
        self.assertTrue(any(not torch.equal(a, b) for a, b in
                            zip(with_bt.model.projector.parameters(), without_bt.model.projector.parameters())))

    def test_zero_alpha_matches_disabled_regularizer(self):
        zero_alpha, losses = self.one_step(tiny_config(alpha=0.0))
        disabled, _ = self.one_step(tiny_config(use_bt=False))
        self.assertIsNone(losses["l_bt"])
        a, b = zero_alpha.model.state_dict(), disabled.model.state_dict()
        self.assertEqual(list(a), list(b))
        for name in a:
            self.assertTrue(torch.equal(a[name], b[name]), name)

    def test_per_path_masks_use_target_predictions(self):
        calls = {}
        for source in ("source", "per_path"):
            config = tiny_config(pooling="segm", segm_guidance_delay=0, mask_source=source)
            trainer = BTSegTrainer(config, SCENE)
            count = []
            trainer.model.decoder.register_forward_hook(lambda *_: count.append(1))
            pairs, _ = prepare_pairs(self.dataset, config)
            losses = trainer.train_step(trainer.augment_batch(pairs, trainer.sample_indices(0, len(pairs)), 0), 0)
            self.assertIsNotNone(losses["l_bt"])
            self.assertTrue(np.isfinite(losses["l_bt"]))
            calls[source] = len(count)
        accum = tiny_config().accumulation_steps
        self.assertEqual(calls["source"], accum)
        self.assertEqual(calls["per_path"], 2 * accum)

    def test_bt_reaches_encoder_after_window(self):
        with_bt, _ = self.one_step(tiny_config(alpha=0.1, stopgrad_steps=0))
        without_bt, _ = self.one_step(tiny_config(alpha=0.0, stopgrad_steps=0))
        differs = any(not torch.equal(a, b) for a, b in
                      zip(with_bt.model.encoder.parameters(), without_bt.model.encoder.parameters()))
        self.assertTrue(differs)

    def test_zero_gradient_without_decay_leaves_projector(self):
        config = tiny_config(use_bt=False, weight_decay=0.0)
        trainer = BTSegTrainer(config, SCENE)
        before = [p.clone() for p in trainer.model.projector.parameters()]
        pairs, _ = prepare_pairs(self.dataset, config)
        trainer.train_step(trainer.augment_batch(pairs, trainer.sample_indices(0, len(pairs)), 0), 0)
        for a, b in zip(before, trainer.model.projector.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_sampler_covers_each_epoch(self):
        trainer = BTSegTrainer(tiny_config(), SCENE)
        seen = trainer.sample_indices(0, 8) + trainer.sample_indices(1, 8)
        self.assertEqual(sorted(seen), list(range(8)))
        self.assertEqual(len(trainer.sample_indices(2, 8)), 4)

    def test_nan_aborts_with_dump(self):
        with tempfile.TemporaryDirectory() as tmp:
            trainer = BTSegTrainer(tiny_config(), SCENE, out_dir=tmp)
            with torch.no_grad():
                next(trainer.model.decoder.parameters()).fill_(float("nan"))
            pairs, _ = prepare_pairs(self.dataset, trainer.config)
            batch = trainer.augment_batch(pairs, trainer.sample_indices(0, len(pairs)), 0)
            with self.assertRaises(NumericAbort) as ctx:
                trainer.train_step(batch, 0)
            dump = json.loads(Path(ctx.exception.dump_path).read_text())
            self.assertEqual(dump["step"], 0)
            self.assertIn("parameter_norms", dump)


class TestFit(unittest.TestCase):

    def test_log_and_checkpoints(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = fit(SyntheticPairs(SCENE, range(8)), tiny_config(), out_dir=tmp)
            records = [json.loads(line) for line in (Path(tmp) / METRICS_LOG).read_text().splitlines()]
            self.assertEqual([r["step"] for r in records], list(range(6)))
            self.assertEqual(set(records[0]), {"step", "l_ce", "l_bt", "lr_enc", "lr_dec", "lr_proj",
                                               "fingerprint"})
            self.assertTrue((Path(tmp) / LAST_CHECKPOINT).exists())
            self.assertTrue((Path(tmp) / "checkpoint_000003.pt").exists())
            self.assertEqual(len(result.log), 6)

    def test_zero_steps_returns_initial_model(self):
        config = tiny_config(total_steps=0)
        result = fit(SyntheticPairs(SCENE, range(4)), config)
        fresh = BTSegTrainer(config, SCENE).model
        self.assertEqual(result.log, [])
        for a, b in zip(result.model.parameters(), fresh.parameters()):
            self.assertTrue(torch.equal(a, b))

    def test_resume_matches_uninterrupted_run(self):
        dataset = SyntheticPairs(SCENE, range(8))
        with tempfile.TemporaryDirectory() as full, tempfile.TemporaryDirectory() as resumed:
            reference = fit(dataset, tiny_config(), out_dir=full)
            shutil.copy(Path(full) / "checkpoint_000003.pt", Path(resumed) / LAST_CHECKPOINT)
            shutil.copy(Path(full) / METRICS_LOG, Path(resumed) / METRICS_LOG)
            continued = fit(dataset, tiny_config(), out_dir=resumed, resume=True)
            self.assertEqual(continued.log, reference.log)
            for a, b in zip(continued.model.state_dict().values(), reference.model.state_dict().values()):
                self.assertTrue(torch.equal(a, b))

    def test_resume_without_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetIOError):
                fit(SyntheticPairs(SCENE, range(4)), tiny_config(), out_dir=tmp, resume=True)

    def test_training_lowers_cross_entropy(self):
        config = tiny_config(total_steps=50, warmup_steps=5, stopgrad_steps=10, checkpoint_every=50)
        result = fit(SyntheticPairs(SCENE, range(8)), config)
        self.assertLess(np.mean([r["l_ce"] for r in result.log[-5:]]), result.log[0]["l_ce"])


if __name__ == "__main__":
    unittest.main()
