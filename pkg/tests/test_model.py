import os
import tempfile
import unittest

import numpy as np

from baryshield.defense.attacks import AttackConfig, attack_fgsm, attack_pgd, run_attack
from baryshield.defense.model import (
    SGD,
    MlpModel,
    batch_grad_input,
    forward,
    grad_input,
    load_checkpoint,
    save_checkpoint,
)
from baryshield.utils.compatibility import ConfigurationError, DatasetError, InputError


def numeric_gradient(f, x, index, h=1e-6):
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


class TestMlpModel(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Small three-layer model and a batch of 6x6 images"""
        cls.model = MlpModel((36, 12, 8, 3), seed=4)
        rng = np.random.default_rng(5)
        cls.images = rng.uniform(0, 1, (5, 6, 6))
        cls.labels = rng.integers(0, 3, 5)

    def test_zero_model_uniform(self):
        """Zero weights give the uniform distribution"""
        probs, features = forward(MlpModel.zeros((4, 3, 2)), np.ones((2, 2)))
        np.testing.assert_allclose(probs, [0.5, 0.5])
        np.testing.assert_array_equal(features, np.zeros(3))

    def test_probabilities(self):
        """Softmax rows sum to one and features have the penultimate width"""
        probs, features = self.model.predict(self.images)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-12)
        self.assertEqual(features.shape, (5, 8))
        self.assertEqual(self.model.feature_dim, 8)

    def test_hand_built(self):
        """A 2-class linear model picks the brighter half"""
        w = np.zeros((4, 2))
        w[:2, 0] = 10.0
        w[2:, 1] = 10.0
        model = MlpModel((4, 2), [w], [np.zeros(2)])
        probs, _ = model.predict(np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]))
        np.testing.assert_array_equal(np.argmax(probs, axis=1), [0, 1])
        self.assertGreater(probs[0, 0], 0.99)

    def test_input_gradient(self):
        """Input gradient matches central differences"""
        x = self.images.copy()
        _, _, g = self.model.loss_and_grads(x, self.labels)
        g = g.reshape(x.shape)
        rng = np.random.default_rng(6)
        for flat in rng.choice(x.size, 100, replace=False):
            index = np.unravel_index(flat, x.shape)
            numeric = numeric_gradient(lambda: self.model.loss_and_grads(x, self.labels)[0], x, index)
            self.assertLessEqual(abs(numeric - g[index]), 1e-5 * max(abs(numeric), 1e-3))

    def test_parameter_gradient(self):
        """Parameter gradients match central differences"""
        model = self.model.copy()
        _, grads, _ = model.loss_and_grads(self.images, self.labels)
        rng = np.random.default_rng(7)
        params = model.parameters()
        for _ in range(100):
            k = int(rng.integers(len(params)))
            index = tuple(int(rng.integers(s)) for s in params[k].shape)
            numeric = numeric_gradient(lambda: model.loss_and_grads(self.images, self.labels)[0], params[k], index)
            self.assertLessEqual(abs(numeric - grads[k][index]), 1e-5 * max(abs(numeric), 1e-3))

    def test_saturated_logits(self):
        """Huge logits keep the loss and gradients finite"""
        model = MlpModel((2, 2), [np.array([[1e4, -1e4], [0.0, 0.0]])], [np.zeros(2)])
        loss, grads, g = model.loss_and_grads(np.array([[1.0, 0.0]]), [1])
        self.assertTrue(np.isfinite(loss))
        self.assertAlmostEqual(loss, 2e4, delta=1e-6)
        self.assertTrue(all(np.all(np.isfinite(x)) for x in grads + [g]))

    def test_saturated_true_label(self):
        """A confidently correct prediction has a vanishing input gradient"""
        model = MlpModel((2, 3, 2), [np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                                     np.array([[100.0, 0.0], [0.0, 0.0], [0.0, 100.0]])],
                         [np.zeros(3), np.zeros(2)])
        x = np.array([1.0, 0.5])
        np.testing.assert_allclose(model.logits(x)[0], [100.0, 0.0])
        g = grad_input(model, x, 0)
        self.assertTrue(np.all(np.isfinite(g)))
        self.assertLessEqual(np.linalg.norm(g), 1e-6)
        self.assertGreater(np.linalg.norm(grad_input(model, x, 1)), 1.0)

    def test_linear_closed_form(self):
        """Single layer: input gradient is W (p - onehot)"""
        rng = np.random.default_rng(8)
        w = rng.standard_normal((5, 3))
        model = MlpModel((5, 3), [w], [rng.standard_normal(3)])
        x = rng.uniform(0, 1, 5)
        probs, _ = forward(model, x)
        np.testing.assert_allclose(grad_input(model, x, 2), w @ (probs - np.eye(3)[2]), atol=1e-12)

    def test_batch_gradient_per_sample(self):
        """Batch input gradients equal the single-image gradients"""
        batch = batch_grad_input(self.model, self.images, self.labels)
        for i in range(5):
            np.testing.assert_allclose(batch[i], grad_input(self.model, self.images[i], self.labels[i]), atol=1e-12)

    def test_label_checks(self):
        """Labels must match the batch and the class count"""
        with self.assertRaises(InputError):
            self.model.loss_and_grads(self.images, [0, 1])
        with self.assertRaises(InputError):
            self.model.loss_and_grads(self.images, [0, 1, 2, 3, 0])
        with self.assertRaises(InputError):
            self.model.predict(np.ones((2, 5, 5)))

    def test_checkpoint_round_trip(self):
        """Checkpoints restore every parameter bit for bit"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ckpt")
            save_checkpoint(self.model, path)
            loaded = load_checkpoint(path)
        self.assertEqual(loaded.sizes, self.model.sizes)
        self.assertEqual(loaded.seed, 4)
        for a, b in zip(loaded.parameters(), self.model.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_bad_checkpoint(self):
        """Foreign or truncated files are rejected"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.ckpt")
            with open(path, "wb") as f:
                f.write(b"not a checkpoint\n")
            with self.assertRaises(DatasetError):
                load_checkpoint(path)
            save_checkpoint(self.model, path)
            with open(path, "rb") as f:
                data = f.read()
            with open(path, "wb") as f:
                f.write(data[:-8])
            with self.assertRaises(DatasetError):
                load_checkpoint(path)
            with self.assertRaises(DatasetError):
                load_checkpoint(os.path.join(tmp, "missing.ckpt"))

    def test_sgd_first_step(self):
        """First SGD step moves parameters by lr * g"""
        model = self.model.copy()
        before = [p.copy() for p in model.parameters()]
        _, grads, _ = model.loss_and_grads(self.images, self.labels)
        norm = SGD(model, lr=0.1, momentum=0.9).step(grads)
        expected = 0.1 * np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        self.assertAlmostEqual(norm, expected, places=12)
        for p, b, g in zip(model.parameters(), before, grads):
            np.testing.assert_allclose(p, b - 0.1 * g, atol=1e-15)


class TestAttacks(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Linear model and images away from the [0, 1] box edges"""
        rng = np.random.default_rng(9)
        cls.model = MlpModel((16, 3), [rng.standard_normal((16, 3))], [np.zeros(3)])
        cls.images = rng.uniform(0.2, 0.8, (6, 4, 4))
        cls.labels = rng.integers(0, 3, 6)

    def test_zero_epsilon(self):
        """eps = 0 leaves images unchanged"""
        for cfg in (AttackConfig.fgsm(0.0), AttackConfig.pgd(0.0, 10)):
            np.testing.assert_array_equal(run_attack(self.model, self.images, self.labels, cfg), self.images)

    def test_budget(self):
        """Adversarial images stay in the eps-ball and in [0, 1]"""
        images = np.random.default_rng(10).uniform(0, 1, (6, 4, 4))
        for cfg in (AttackConfig.fgsm(0.1), AttackConfig.pgd(0.1, 20)):
            adv = run_attack(self.model, images, self.labels, cfg, np.random.default_rng(0))
            self.assertLessEqual(np.abs(adv - images).max(), 0.1 + 1e-12)
            self.assertGreaterEqual(adv.min(), 0.0)
            self.assertLessEqual(adv.max(), 1.0)

    def test_fgsm_raises_loss(self):
        """FGSM increases the loss of a linear model"""
        clean, _, _ = self.model.loss_and_grads(self.images, self.labels)
        adv = attack_fgsm(self.model, self.images, self.labels, AttackConfig.fgsm(0.05))
        attacked, _, _ = self.model.loss_and_grads(adv, self.labels)
        self.assertGreater(attacked, clean)

    def test_single_step_pgd_is_fgsm(self):
        """One full-size PGD step without random start equals FGSM"""
        cfg = AttackConfig(epsilon=0.05, steps=1, step_size=0.05, random_start=False)
        np.testing.assert_array_equal(
            attack_pgd(self.model, self.images, self.labels, cfg),
            attack_fgsm(self.model, self.images, self.labels, cfg),
        )

    def test_pgd_deterministic(self):
        """The same generator seed gives the same attack"""
        cfg = AttackConfig.pgd(0.05, 10)
        a = attack_pgd(self.model, self.images, self.labels, cfg, np.random.default_rng(3))
        b = attack_pgd(self.model, self.images, self.labels, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_names(self):
        """Streams are named after the attack"""
        self.assertEqual(AttackConfig.fgsm().name, "fgsm")
        self.assertEqual(AttackConfig.pgd(steps=20).name, "pgd20")
        self.assertAlmostEqual(AttackConfig.pgd(0.08).step_size, 0.02)

    def test_invalid(self):
        """Out-of-range settings are rejected"""
        with self.assertRaises(ConfigurationError):
            AttackConfig(epsilon=1.0)
        with self.assertRaises(ConfigurationError):
            AttackConfig(steps=0)
        with self.assertRaises(ConfigurationError):
            AttackConfig(epsilon=0.1, steps=2, step_size=0.01)


if __name__ == '__main__':
    unittest.main()
