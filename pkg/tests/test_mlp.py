import os
import tempfile
import unittest

import joblib
import numpy as np

from src.exceptions import CheckpointError, ConfigError, ParameterError
from src.kac_core import KacParams, Schedule, SeedSpec
from src.mlp import MLPModel, NULL_LABEL, Optimizer, OptimizerConfig, learning_rate, load_checkpoint, save_checkpoint


class TestModel(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = MLPModel(dim=2, n_classes=3, hidden=(8, 8), seed=SeedSpec(4))
        cls.tmp = tempfile.TemporaryDirectory()
        cls.path = os.path.join(cls.tmp.name, 'model.joblib')
        save_checkpoint(cls.model, cls.path, KacParams(2.0, 1.0, 2), Schedule.linear(), extra={'note': 'test'})

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_model_loaded_properly(self):
        loaded, meta = load_checkpoint(self.path)
        self.assertIsNotNone(loaded)
        self.assertEqual(loaded.fingerprint(), self.model.fingerprint())
        self.assertEqual(meta['kac'], {'a': 2.0, 'c': 1.0, 'd': 2})
        self.assertEqual(meta['extra'], {'note': 'test'})

    def test_model_signature(self):
        x = np.zeros((5, 2))
        inputs = self.model.encode(0.5, x, [0, 1, 2, NULL_LABEL, 0])
        self.assertEqual(inputs.shape, (5, self.model.input_dim))
        np.testing.assert_array_equal(inputs[3, -4:], [0, 0, 0, 1])
        out = self.model.forward(0.5, x)
        self.assertEqual(out.shape, (5, 2))

    def test_label_out_of_range(self):
        with self.assertRaises(ParameterError):
            self.model.encode(0.5, np.zeros((1, 2)), [4])

    def test_tampered_checkpoint_is_rejected(self):
        payload = joblib.load(self.path)
        W, b = payload['layers'][0]
        payload['layers'][0] = (W + 1.0, b)
        bad = os.path.join(self.tmp.name, 'tampered.joblib')
        joblib.dump(payload, bad)
        with self.assertRaises(CheckpointError):
            load_checkpoint(bad)

    def test_missing_checkpoint(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint(os.path.join(self.tmp.name, 'missing.joblib'))

    def test_flat_round_trip(self):
        copy = self.model.copy()
        copy.set_flat(copy.flat() * 2.0)
        np.testing.assert_allclose(copy.flat(), self.model.flat() * 2.0)
        self.assertNotEqual(copy.fingerprint(), self.model.fingerprint())
        with self.assertRaises(ParameterError):
            copy.set_flat(np.zeros(3))


class TestGradients(unittest.TestCase):

    def test_backward_matches_finite_differences(self):
        model = MLPModel(dim=1, n_classes=2, hidden=(6, 5), seed=SeedSpec(1))
        rng = SeedSpec(2).generator()
        inputs = model.encode(rng.uniform(size=7), rng.normal(size=(7, 1)), rng.integers(-1, 2, size=7))
        weights = rng.normal(size=(7, 1))
        out, activations = model.forward_cached(inputs)
        grads = model.backward(activations, weights)
        analytic = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
        base = model.flat()
        h = 1e-6
        for i in rng.choice(base.size, size=15, replace=False):
            perturbed = model.copy()
            shifted = base.copy()
            shifted[i] += h
            perturbed.set_flat(shifted)
            plus = float(np.sum(weights * perturbed.forward_cached(inputs)[0]))
            shifted[i] -= 2 * h
            perturbed.set_flat(shifted)
            minus = float(np.sum(weights * perturbed.forward_cached(inputs)[0]))
            self.assertAlmostEqual(analytic[i], (plus - minus) / (2 * h), places=6)


class TestOptimizer(unittest.TestCase):

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            OptimizerConfig(optimizer='rmsprop')
        with self.assertRaises(ConfigError):
            OptimizerConfig(label_drop=1.5)

    def test_warmup_flat_cosine(self):
        cfg = OptimizerConfig(step_size=1.0, iterations=1000, lr_schedule='warmup_flat_cosine')
        self.assertAlmostEqual(learning_rate(cfg, 0), 1.0 / 20)
        self.assertEqual(learning_rate(cfg, 500), 1.0)
        self.assertLess(learning_rate(cfg, 999), 1e-3)
        self.assertEqual(learning_rate(OptimizerConfig(step_size=0.1), 999), 0.1)

    def test_sgd_step(self):
        model = MLPModel(dim=1, hidden=(3,), seed=SeedSpec(0))
        before = model.copy()
        grads = [(np.ones_like(W), np.ones_like(b)) for W, b in model.layers]
        Optimizer(model, OptimizerConfig(step_size=0.1)).step(model, grads)
        np.testing.assert_allclose(model.flat(), before.flat() - 0.1)

    def test_gradient_clipping(self):
        model = MLPModel(dim=1, hidden=(3,), seed=SeedSpec(0))
        before = model.flat()
        grads = [(np.full_like(W, 100.0), np.full_like(b, 100.0)) for W, b in model.layers]
        Optimizer(model, OptimizerConfig(step_size=1.0, grad_clip=1.0)).step(model, grads)
        self.assertAlmostEqual(float(np.linalg.norm(model.flat() - before)), 1.0, places=10)

    def test_ema_result_lags_the_model(self):
        model = MLPModel(dim=1, hidden=(3,), seed=SeedSpec(0))
        before = model.flat()
        optimizer = Optimizer(model, OptimizerConfig(step_size=0.1, ema_decay=0.9))
        optimizer.step(model, [(np.ones_like(W), np.ones_like(b)) for W, b in model.layers])
        np.testing.assert_allclose(optimizer.result(model).flat(), before - 0.01)


if __name__ == '__main__':
    unittest.main()
