#!/usr/bin/env python3
"""
Test suite for the fusion decoder: dropout, stage geometry, determinism, the
live graph path, and a joint finite-difference check through decoder, graph
attention and CNN parameters.
"""
import contextlib
import io
import unittest

import numpy as np

from support import SEEDS, bn_cancelled, every_group_report, tiny_settings

from airway_graph_net.errors import ConfigError, ShapeError
from airway_graph_net.graph_builder import GraphConfig, build_graph
from airway_graph_net.inference_stream import (
    InferenceConfig,
    InferenceStream,
    dropout,
    dropout_backward,
    inference_forward,
)
from airway_graph_net.model import AgnModel
from airway_graph_net.tensor_core import check_gradient


def decoder_inputs(size, delta, channels, in_features, seed):
    rng = np.random.default_rng(seed)
    graph = build_graph(rng.random(size), GraphConfig(delta=delta))
    refined = rng.normal(size=(graph.vertices.count, in_features))
    sides = [rng.normal(size=(1, channels, size[0] >> k, size[1] >> k)) for k in (3, 2, 1, 0)]
    return graph, refined, sides


class TestDropout(unittest.TestCase):
    def test_01_identity_cases(self):
        """TEST 01: p = 0 is the identity in both modes; eval mode is the identity for any p"""
        x = np.random.default_rng(0).normal(size=(3, 4))
        rng = np.random.default_rng(1)
        for training in (True, False):
            out, mask = dropout(x, 0.0, training, rng)
            self.assertIs(out, x)
            self.assertIsNone(mask)
        out, mask = dropout(x, 0.7, False, rng)
        self.assertIs(out, x)
        np.testing.assert_array_equal(dropout_backward(np.ones_like(x), mask), np.ones_like(x))

    def test_02_survivor_statistics(self):
        """TEST 02: p = 0.5 over 1e5 elements keeps ~half and preserves the mean"""
        x = np.random.default_rng(3).uniform(1.0, 2.0, size=100000)
        out, mask = dropout(x, 0.5, True, np.random.default_rng(1))
        survivors = np.count_nonzero(out) / x.size
        self.assertLess(abs(survivors - 0.5), 0.01)
        self.assertLess(abs(out.mean() - x.mean()) / x.mean(), 0.02)
        kept = mask > 0
        np.testing.assert_allclose(out[kept], 2.0 * x[kept])

    def test_03_backward_uses_the_same_mask(self):
        """TEST 03: The gradient is masked and scaled exactly like the forward values"""
        x = np.ones(1000)
        out, mask = dropout(x, 0.3, True, np.random.default_rng(2))
        np.testing.assert_array_equal(dropout_backward(np.ones_like(x), mask), out)

    def test_04_invalid_probability(self):
        """TEST 04: p >= 1 or p < 0 is rejected"""
        for p in (1.0, 1.5, -0.1):
            with self.assertRaises(ConfigError):
                dropout(np.ones(3), p, True, np.random.default_rng(0))


class TestDecoderGeometry(unittest.TestCase):
    def test_05_stage_factors(self):
        """TEST 05: delta 4 doubles four times; delta 3 keeps one stage at 1/8 and doubles three times"""
        self.assertEqual(InferenceConfig(delta=4).stage_factors, [2, 2, 2, 2])
        self.assertEqual(InferenceConfig(delta=3).stage_factors, [1, 2, 2, 2])
        for delta in (3, 4, 5):
            self.assertEqual(int(np.prod(InferenceConfig(delta=delta).stage_factors)), 2 ** delta)

    def test_06_output_shape_and_range(self):
        """TEST 06: delta 4 on 32x32 recovers the full 32x32 map with values strictly inside (0, 1)"""
        graph, refined, sides = decoder_inputs((32, 32), 4, 2, 6, 0)
        self.assertEqual(graph.vertices.grid_dims, (2, 2))
        stream = InferenceStream(6, InferenceConfig(stage_channels=2, delta=4), np.random.default_rng(0))
        prob = inference_forward(refined, graph, sides, stream, training=False)
        self.assertEqual(prob.shape, (32, 32))
        self.assertTrue(np.all(prob > 0) and np.all(prob < 1))

    def test_07_full_scale_concat_width(self):
        """TEST 07: 16 stage channels give a 32-channel tensor before the final convolution"""
        stream = InferenceStream(64, InferenceConfig(stage_channels=16), np.random.default_rng(0))
        self.assertEqual(stream.concat_channels, 32)
        self.assertEqual(stream.store["infer.final"].weights.shape, (1, 32, 1, 1))
        self.assertEqual(stream.store["infer.stage1.conv"].weights.shape, (16, 64, 3, 3))

    def test_08_eval_mode_is_deterministic(self):
        """TEST 08: Two eval-mode calls are bitwise equal even with dropout configured"""
        graph, refined, sides = decoder_inputs((16, 16), 3, 2, 4, 1)
        stream = InferenceStream(4, InferenceConfig(stage_channels=2, dropout_p=0.4), np.random.default_rng(1))
        first = stream.forward(refined, graph, sides, training=False)
        second = stream.forward(refined, graph, sides, training=False)
        np.testing.assert_array_equal(first, second)

    def test_09_graph_path_is_live(self):
        """TEST 09: Zeroing the refined rows changes the output"""
        graph, refined, sides = decoder_inputs((16, 16), 3, 2, 4, 2)
        stream = InferenceStream(4, InferenceConfig(stage_channels=2, dropout_p=0.0), np.random.default_rng(2))
        baseline = stream.forward(refined, graph, sides, training=False)
        zeroed = stream.forward(np.zeros_like(refined), graph, sides, training=False)
        self.assertGreater(np.max(np.abs(baseline - zeroed)), 0.0)

    def test_10_misaligned_side(self):
        """TEST 10: A side tensor at the wrong scale is rejected naming both shapes"""
        graph, refined, sides = decoder_inputs((16, 16), 3, 2, 4, 3)
        sides[2] = np.zeros((1, 2, 4, 4))
        stream = InferenceStream(4, InferenceConfig(stage_channels=2), np.random.default_rng(3))
        with self.assertRaises(ShapeError) as ctx:
            stream.forward(refined, graph, sides, training=False)
        self.assertIn("(1, 2, 4, 4)", str(ctx.exception))
        self.assertIn("(1, 2, 8, 8)", str(ctx.exception))
        with self.assertRaises(ShapeError):
            stream.forward(refined, graph, sides[:3], training=False)

    def test_11_training_dropout_needs_generator(self):
        """TEST 11: Training with dropout but no generator is rejected; with one it is reproducible"""
        graph, refined, sides = decoder_inputs((16, 16), 3, 2, 4, 4)
        stream = InferenceStream(4, InferenceConfig(stage_channels=2, dropout_p=0.3), np.random.default_rng(4))
        with self.assertRaises(ConfigError):
            stream.forward(refined, graph, sides, training=True)
        a = stream.forward(refined, graph, sides, training=True, rng=np.random.default_rng(9))
        b = stream.forward(refined, graph, sides, training=True, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_12_invalid_config(self):
        """TEST 12: delta below the coarsest side scale is rejected"""
        with self.assertRaises(ConfigError):
            InferenceStream(4, InferenceConfig(delta=2))


def joint_case(seed, dropout_p=0.2):
    """Tiny joint model with dropout on; each evaluation replays the same dropout masks."""
    model = AgnModel(tiny_settings(dropout_p=dropout_p, seed=seed), "joint", dtype=np.float64)
    x = np.random.default_rng(seed + 100).normal(size=(1, 1, 16, 16))
    with contextlib.redirect_stderr(io.StringIO()):
        out = model.forward_joint(x, training=True, rng=np.random.default_rng(seed + 300))
    graph = out.graph
    weights = np.random.default_rng(seed + 200).normal(size=out.prob.shape)
    model.store.zero_grad()
    dx = model.backward_joint(weights)
    grads = {name: t.grad.copy() for name, t in model.store.named_tensors()}

    def closure(_):
        prob = model.forward_joint(x, graph=graph, training=True, rng=np.random.default_rng(seed + 300)).prob
        return float(np.sum(prob * weights))

    return model, x, dx, grads, closure


class TestJointGradients(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = AgnModel(tiny_settings(), "joint", dtype=np.float64)
        x = np.random.default_rng(11).normal(size=(1, 1, 16, 16))
        with contextlib.redirect_stderr(io.StringIO()):
            out = cls.model.forward_joint(x, training=True)
        cls.model.store.zero_grad()
        cls.model.backward_joint(np.random.default_rng(12).normal(size=out.prob.shape))
        cls.grads = {name: t.grad.copy() for name, t in cls.model.store.named_tensors()}

    def test_13_every_parameter_group_with_dropout(self):
        """TEST 13: Every decoder, attention and CNN group passes a joint finite-difference check, dropout on, five seeds"""
        for seed in SEEDS:
            model, _, _, grads, closure = joint_case(seed)
            checked = 0
            for name, report in every_group_report(closure, model.store, grads, seed, model.kink_signature):
                self.assertTrue(report.passed, (seed, name, report))
                checked += 1
            self.assertGreater(checked, 0)

    def test_14_input_gradient(self):
        """TEST 14: d(loss)/d(input slice) through all three streams matches finite differences, five seeds"""
        for seed in SEEDS:
            model, x, dx, _, closure = joint_case(seed)
            report = check_gradient(closure, x, dx, samples=100, seed=seed, kink_check=model.kink_signature)
            self.assertTrue(report.passed, (seed, report))

    def test_15_graph_parameters_receive_gradient(self):
        """TEST 15: Attention and decoder tensors all get nonzero gradient"""
        for name, grad in self.grads.items():
            if name.startswith(("gat.", "infer.final", "infer.stage")) and not bn_cancelled(name):
                self.assertTrue(np.any(grad != 0), name)

    def test_16_dropout_masks_replay_exactly(self):
        """TEST 16: The same dropout generator seed gives bitwise-equal training passes"""
        _, x, _, _, closure = joint_case(0, dropout_p=0.5)
        self.assertEqual(closure(x), closure(x))


if __name__ == "__main__":
    unittest.main(verbosity=2)
