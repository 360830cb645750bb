#!/usr/bin/env python3
"""
Tests for the encoder, decoder, projector and checkpoints
"""

import sys
import tempfile
import unittest
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import torch

from modules.bt_core import LossWeights, bt_loss_from_raw
from modules.checks import check_end_to_end_gradient, central_difference, relative_error
from modules.model import (BTSegNet, DecoderSpec, Encoder, EncoderSpec, Projector, ProjectorSpec,
                           fuse_multiscale, load_checkpoint, save_checkpoint, stop_gradient_boundary)
from modules.pooling import average_pool
from utils.config import TrainConfig
from utils.errors import DatasetIOError


def small_net(seed=0):
    return BTSegNet(EncoderSpec((16, 32), (4, 8)), DecoderSpec(6, upsample=4),
                    ProjectorSpec.halving(48), seed=seed)


def batch(seed, b=2, size=32):
    return torch.rand(b, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestShapes(unittest.TestCase):

    def test_encoder_output_shape(self):
        net = small_net()
        y = net.encoder(torch.rand(2, 3, 64, 64, dtype=torch.float64))
        self.assertEqual(tuple(y.shape), (2, 48, 16, 16))

    def test_decoder_restores_input_size(self):
        net = small_net()
        logits = net.decoder(torch.rand(2, 48, 16, 16, dtype=torch.float64))
        self.assertEqual(tuple(logits.shape), (2, 6, 64, 64))
        self.assertTrue(torch.isfinite(logits).all())

    def test_projector_shape(self):
        proj = Projector(ProjectorSpec((48, 24, 12))).double()
        self.assertEqual(tuple(proj(torch.rand(4, 48, dtype=torch.float64)).shape), (4, 12))

    def test_encode_pool_project(self):
        net = small_net()
        z = net.projector(average_pool(net.encoder(batch(0, b=4))))
        self.assertEqual(tuple(z.shape), (4, 12))

    def test_indivisible_input_rejected(self):
        with self.assertRaises(ValueError):
            small_net().encoder(torch.rand(1, 3, 20, 20, dtype=torch.float64))

    def test_invalid_strides_rejected(self):
        with self.assertRaises(ValueError):
            EncoderSpec((8, 8), (3, 6))


class TestFuseMultiscale(unittest.TestCase):

    def test_single_stage_identity(self):
        s = torch.rand(1, 4, 8, 8)
        self.assertIs(fuse_multiscale([s]), s)

    def test_concatenates_on_finest_grid(self):
        out = fuse_multiscale([torch.rand(2, 8, 16, 16), torch.rand(2, 8, 8, 8)])
        self.assertEqual(tuple(out.shape), (2, 16, 16, 16))

    def test_constant_coarse_stage_stays_constant(self):
        coarse = torch.full((1, 2, 4, 4), 3.0, dtype=torch.float64)
        out = fuse_multiscale([torch.zeros(1, 2, 8, 8, dtype=torch.float64), coarse])
        self.assertTrue(torch.allclose(out[:, 2:], torch.full((1, 2, 8, 8), 3.0, dtype=torch.float64)))


class TestBehaviour(unittest.TestCase):

    def test_zero_parameters_zero_input(self):
        encoder = Encoder(EncoderSpec((4, 4), (2, 4))).double()
        for p in encoder.parameters():
            torch.nn.init.zeros_(p)
        out = encoder(torch.zeros(1, 3, 8, 8, dtype=torch.float64))
        self.assertFalse(out.any())

    def test_seeded_construction_is_deterministic(self):
        x = batch(1)
        a, b = small_net(seed=3), small_net(seed=3)
        self.assertTrue(torch.equal(a.segment(x), b.segment(x)))
        self.assertFalse(torch.equal(a.segment(x), small_net(seed=4).segment(x)))

    def test_construction_leaves_global_rng_alone(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        small_net(seed=9)
        self.assertTrue(torch.equal(torch.rand(3), expected))

    def test_identical_rows_stay_identical(self):
        proj = Projector(ProjectorSpec((8, 4, 2))).double()
        out = proj(torch.ones(4, 8, dtype=torch.float64))
        self.assertTrue(torch.allclose(out, out[:1].expand(4, -1)))

    def test_projector_needs_batch_in_training(self):
        proj = Projector(ProjectorSpec((8, 4, 2))).double()
        with self.assertRaises(ValueError):
            proj(torch.ones(1, 8, dtype=torch.float64))
        proj.eval()
        self.assertEqual(tuple(proj(torch.ones(1, 8, dtype=torch.float64)).shape), (1, 2))

    def test_projector_gradient(self):
        proj = Projector(ProjectorSpec((6, 4, 3))).double()
        x = torch.randn(5, 6, generator=torch.Generator().manual_seed(0), dtype=torch.float64,
                        requires_grad=True)
        (analytic,) = torch.autograd.grad(proj(x).pow(2).sum(), x)
        numeric = central_difference(lambda: proj(x).pow(2).sum(), x, range(x.numel()), 1e-6)
        self.assertLess(relative_error(analytic.reshape(-1).numpy(), numeric), 1e-4)

    def test_projector_parameter_count(self):
        for dims in ((48, 24, 12), (64, 32, 16), (2048, 1024, 256)):
            proj = Projector(ProjectorSpec(dims))
            count = sum(p.numel() for p in proj.parameters())
            self.assertEqual(count, Projector.expected_parameter_count(dims))
        d = 48
        self.assertEqual(Projector.expected_parameter_count((d, d // 2, d // 4)),
                         d * d // 2 + d // 2 * d // 4 + 2 * (d // 2) + d // 4)

    def test_from_config_uses_halving_projector(self):
        net = BTSegNet.from_config(TrainConfig(), num_classes=6)
        self.assertEqual(net.projector_spec.layer_dims, (48, 24, 12))
        self.assertEqual(next(net.parameters()).dtype, torch.float64)
        self.assertEqual(set(net.param_groups()), {"encoder", "decoder", "projector"})


class TestStopGradient(unittest.TestCase):

    def bt_encoder_grad(self, enabled):
        net = small_net()
        y_s = net.encoder(batch(0, b=4))
        y_t = net.encoder(batch(1, b=4))
        z_s = net.projector(average_pool(stop_gradient_boundary(y_s, enabled)))
        z_t = net.projector(average_pool(stop_gradient_boundary(y_t, enabled)))
        loss = bt_loss_from_raw(z_s, z_t, LossWeights.for_dim(12))
        net.zero_grad()
        loss.backward()
        return [p.grad for p in net.encoder.parameters()], [p.grad for p in net.projector.parameters()]

    def test_enabled_blocks_encoder(self):
        encoder_grads, projector_grads = self.bt_encoder_grad(True)
        self.assertTrue(all(g is None or not g.any() for g in encoder_grads))
        self.assertTrue(any(g is not None and g.any() for g in projector_grads))

    def test_disabled_reaches_encoder(self):
        encoder_grads, _ = self.bt_encoder_grad(False)
        self.assertTrue(any(g is not None and g.any() for g in encoder_grads))

    def test_end_to_end_gradient(self):
        for result in check_end_to_end_gradient(seed=0):
            self.assertTrue(result.passed, result)


class TestCheckpoint(unittest.TestCase):

    def test_round_trip_is_bit_exact(self):
        net = small_net(seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "ckpt.pt", net, step=7, extra={"fingerprint": "abc"})
            loaded, payload = load_checkpoint(path)
        self.assertEqual(payload["step"], 7)
        self.assertEqual(payload["fingerprint"], "abc")
        for (name, a), (_, b) in zip(net.state_dict().items(), loaded.state_dict().items()):
            self.assertTrue(torch.equal(a, b), name)

    def test_missing_checkpoint(self):
        with self.assertRaises(DatasetIOError):
            load_checkpoint("/nonexistent/ckpt.pt")


if __name__ == "__main__":
    unittest.main()
