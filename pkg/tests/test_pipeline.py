import os
import tempfile
import unittest
import warnings
from unittest import mock

import numpy as np

from baryshield.defense.attacks import AttackConfig, attack_fgsm
from baryshield.defense.info_metrics import mi_pairwise
from baryshield.defense.marginals import BarycenterParams
from baryshield.defense.model import MlpModel
from baryshield.defense.pipeline import (
    LabeledDataset,
    TrainConfig,
    barycentric_dataset,
    evaluate,
    export_features,
    feature_separation,
    finetune_barycentric,
    load_dataset,
    make_toy_digits,
    save_dataset,
    train_adversarial,
)
from baryshield.transport.beckman import SolverConfig
from baryshield.utils.compatibility import DatasetError, InputError, TrainingError

FAST_SOLVER = SolverConfig(tau1=0.05, iterations=10)
EPSILON = 8 / 255
BENCH_SOLVER = SolverConfig(tau1=0.09, tau2=1.0, iterations=200)


class TestToyData(unittest.TestCase):
    def test_shape_and_balance(self):
        """Toy digits are 28x28, in [0, 1] and balanced"""
        data = make_toy_digits(20, seed=3)
        self.assertEqual(data.images.shape, (20, 28, 28))
        self.assertEqual(int(data.labels.sum()), 10)
        self.assertGreaterEqual(data.images.min(), 0.0)
        self.assertLessEqual(data.images.max(), 1.0)

    def test_deterministic(self):
        """The same seed gives the same dataset"""
        a, b = make_toy_digits(6, seed=1), make_toy_digits(6, seed=1)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_faint_shapes(self):
        """Peaks stay within the faint range and the corners are dark"""
        data = make_toy_digits(40, seed=4)
        peaks = data.images.max(axis=(1, 2))
        self.assertTrue(np.all(peaks <= 0.3))
        self.assertTrue(np.all(peaks >= 0.05))
        self.assertLess(data.images[:, [0, 0, -1, -1], [0, -1, 0, -1]].max(), 1e-2)

    def test_validation(self):
        """Mismatched or out-of-range data is rejected"""
        with self.assertRaises(InputError):
            LabeledDataset(np.zeros((3, 4, 4)), [0, 1])
        with self.assertRaises(InputError):
            LabeledDataset(np.full((1, 4, 4), 2.0), [0])

    def test_batches(self):
        """Batches cover every sample once"""
        data = make_toy_digits(70, seed=0)
        batches = list(data.batches(32, np.random.default_rng(0)))
        self.assertEqual([len(b) for b in batches], [32, 32, 6])
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(70)))


class TestDatasetFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_round_trip(self):
        """Saved datasets load back up to 8-bit quantization"""
        data = make_toy_digits(5, seed=2)
        save_dataset(data, self.tmp.name)
        loaded = load_dataset(self.tmp.name)
        np.testing.assert_array_equal(loaded.labels, data.labels)
        self.assertLessEqual(np.abs(loaded.images - data.images).max(), 0.5 / 255 + 1e-12)

    def test_missing_labels(self):
        """A directory without labels.csv raises a dataset error"""
        with self.assertRaises(DatasetError):
            load_dataset(self.tmp.name)

    def test_bad_label(self):
        """Non-integer labels are reported with their line"""
        save_dataset(make_toy_digits(2, seed=0), self.tmp.name)
        with open(os.path.join(self.tmp.name, "labels.csv"), "w", encoding="utf-8") as f:
            f.write("file,label\n00000.pgm,zero\n")
        with self.assertRaisesRegex(DatasetError, "labels.csv:2"):
            load_dataset(self.tmp.name)

    def test_save_over_file(self):
        """A file in place of the dataset directory raises a dataset error"""
        blocker = os.path.join(self.tmp.name, "blocker")
        with open(blocker, "w", encoding="utf-8") as f:
            f.write("x")
        with self.assertRaisesRegex(DatasetError, "cannot create dataset directory"):
            save_dataset(make_toy_digits(2, seed=0), os.path.join(blocker, "data"))


class TestTraining(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Adversarially pretrained model on toy digits"""
        cls.train = make_toy_digits(128, seed=0)
        cls.test = make_toy_digits(64, seed=1)
        config = TrainConfig(epochs=5, attack=AttackConfig.pgd(8 / 255, steps=3))
        cls.model, cls.logs = train_adversarial(cls.train, MlpModel((784, 32, 2), seed=0), config)

    def test_logs(self):
        """One log per epoch with ceil(n / 32) steps each"""
        self.assertEqual([log.epoch for log in self.logs], [1, 2, 3, 4, 5])
        self.assertTrue(all(log.steps == 4 for log in self.logs))
        self.assertTrue(all(np.isfinite(log.loss) for log in self.logs))

    def test_learns(self):
        """Clean test accuracy beats chance"""
        self.assertGreater(evaluate(self.model, self.test).accuracy, 0.6)

    def test_input_model_untouched(self):
        """Training works on a copy"""
        start = MlpModel((784, 32, 2), seed=0)
        before = [p.copy() for p in start.parameters()]
        train_adversarial(self.train.subset(slice(0, 32)), start, TrainConfig(epochs=1))
        for a, b in zip(start.parameters(), before):
            np.testing.assert_array_equal(a, b)

    def test_zero_epsilon(self):
        """eps = 0 training reports adversarial accuracy equal to clean"""
        config = TrainConfig(epochs=1, attack=AttackConfig.pgd(0.0))
        _, logs = train_adversarial(self.train.subset(slice(0, 40)), MlpModel((784, 8, 2)), config)
        self.assertEqual(logs[0].adversarial_accuracy, logs[0].clean_accuracy)

    def test_non_finite_loss(self):
        """A non-finite loss stops training at the failing step"""
        def broken(model, images, labels):
            return float("nan"), [np.zeros_like(p) for p in model.parameters()], None

        with mock.patch.object(MlpModel, "loss_and_grads", broken):
            with self.assertRaises(TrainingError) as ctx:
                train_adversarial(self.train.subset(slice(0, 8)), MlpModel((784, 4, 2)), TrainConfig(epochs=1, attack=AttackConfig.pgd(0.0)))
        self.assertEqual(ctx.exception.step, 1)


class TestFinetune(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Small dataset and an untrained model"""
        cls.data = make_toy_digits(40, seed=5)
        cls.model = MlpModel((784, 16, 2), seed=1)

    def finetune(self, dataset, config=None):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return finetune_barycentric(self.model, dataset, config, solver=FAST_SOLVER)

    def test_empty(self):
        """An empty dataset takes no steps and returns the model unchanged"""
        model, logs = self.finetune(self.data.subset(slice(0, 0)))
        self.assertEqual(logs, [])
        for a, b in zip(model.parameters(), self.model.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_step_count(self):
        """One epoch takes ceil(n / 32) steps"""
        _, logs = self.finetune(self.data)
        self.assertEqual(len(logs), 1)
        self.assertEqual(logs[0].steps, 2)

    def test_loss_decreases(self):
        """A full-batch step lowers the loss on the barycentric samples"""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bary = barycentric_dataset(self.data, solver=FAST_SOLVER)
        before, _, _ = self.model.loss_and_grads(bary.images, bary.labels)
        model, _ = self.finetune(self.data, TrainConfig(epochs=1, lr=1e-3, batch_size=len(self.data)))
        after, _, _ = model.loss_and_grads(bary.images, bary.labels)
        self.assertLess(after, before)


class TestEvaluate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """Random model and dataset labelled by the model itself"""
        cls.model = MlpModel((784, 16, 2), seed=2)
        data = make_toy_digits(24, seed=6)
        probs, _ = cls.model.predict(data.images)
        cls.data = LabeledDataset(data.images, np.argmax(probs, axis=1))

    def test_own_labels(self):
        """A model agrees with its own predictions"""
        report = evaluate(self.model, self.data)
        self.assertEqual(report.accuracy, 1.0)
        self.assertEqual(report.stream, "clean")
        self.assertEqual(report.predictions.p.shape, (24, 2))

    def test_zero_epsilon(self):
        """eps = 0 attacks change nothing"""
        report = evaluate(self.model, self.data, AttackConfig.fgsm(0.0))
        self.assertEqual(report.accuracy, 1.0)
        self.assertEqual(report.stream, "fgsm")

    def test_attack_never_helps_fgsm(self):
        """FGSM accuracy is at most clean accuracy on a linear model"""
        model = MlpModel((784, 2), seed=3)
        probs, _ = model.predict(self.data.images)
        data = LabeledDataset(self.data.images, np.argmax(probs, axis=1))
        self.assertLessEqual(evaluate(model, data, AttackConfig.fgsm(0.1)).accuracy, 1.0)
        self.assertLess(evaluate(model, data, AttackConfig.fgsm(0.5)).accuracy, 1.0)

    def test_deterministic(self):
        """PGD evaluation with a fixed seed is repeatable"""
        a = evaluate(self.model, self.data, AttackConfig.pgd(0.1, 10), seed=4)
        b = evaluate(self.model, self.data, AttackConfig.pgd(0.1, 10), seed=4)
        np.testing.assert_array_equal(a.predictions.p, b.predictions.p)

    def test_barycentric(self):
        """Barycentric inference is tagged in the stream name"""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = evaluate(self.model, self.data.subset(slice(0, 4)), barycentric=True, solver=FAST_SOLVER)
        self.assertEqual(report.stream, "clean_bary")
        self.assertEqual(report.n, 4)


class TestFeatures(unittest.TestCase):
    def test_export(self):
        """Feature CSV has one row per sample plus the label column"""
        model = MlpModel((784, 6, 2), seed=0)
        data = make_toy_digits(5, seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "features.csv")
            self.assertEqual(export_features(model, data, path), 5)
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        self.assertEqual(lines[0], "f0,f1,f2,f3,f4,f5,label")
        self.assertEqual(len(lines), 6)
        self.assertEqual(lines[1].split(",")[-1], str(data.labels[0]))

    def test_export_empty(self):
        """An empty dataset writes only the header"""
        model = MlpModel((784, 3, 2), seed=0)
        empty = LabeledDataset(np.zeros((0, 28, 28)), np.zeros(0, dtype=np.int64))
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(export_features(model, empty, os.path.join(tmp, "f.csv")), 0)

    def test_separation(self):
        """Distance between class means"""
        features = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
        self.assertAlmostEqual(feature_separation(features, [0, 0, 1, 1]), 5.0)
        self.assertEqual(feature_separation(features, [1, 1, 1, 1]), 0.0)


class TestDefenseBenchmark(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        """PGD-pretrained and barycentric fine-tuned models on the toy digits"""
        cls.train = make_toy_digits(256, seed=0)
        cls.test = make_toy_digits(128, seed=1)
        cls.params = BarycenterParams.for_budget(EPSILON)
        config = TrainConfig(epochs=6, attack=AttackConfig.pgd(EPSILON, 10))
        cls.pretrained, _ = train_adversarial(cls.train, MlpModel((784, 32, 2), seed=0), config)
        cls.finetuned, _ = finetune_barycentric(cls.pretrained, cls.train, TrainConfig.finetune(), cls.params, BENCH_SOLVER)

        fgsm, pgd10 = AttackConfig.fgsm(EPSILON), AttackConfig.pgd(EPSILON, 10)
        cls.reports = {
            "clean": cls.evaluate(cls.finetuned),
            "fgsm_pretrained": cls.evaluate(cls.pretrained, fgsm),
            "fgsm": cls.evaluate(cls.finetuned, fgsm),
            "pgd10": cls.evaluate(cls.finetuned, pgd10),
            "clean_bary": cls.evaluate(cls.finetuned, barycentric=True),
            "fgsm_bary": cls.evaluate(cls.finetuned, fgsm, barycentric=True),
        }

    @classmethod
    def evaluate(cls, model, attack=None, barycentric=False):
        return evaluate(model, cls.test, attack, barycentric, cls.params, BENCH_SOLVER)

    def accuracy(self, stream):
        return self.reports[stream].accuracy

    def test_floor_above_budget(self):
        """The barycenter floor sits above the attack budget"""
        self.assertAlmostEqual(self.params.floor, 1.25 * EPSILON, places=12)

    def test_attack_bites(self):
        """FGSM at 8/255 costs the pretrained model accuracy"""
        self.assertGreater(self.accuracy("clean"), 0.85)
        self.assertLess(self.accuracy("fgsm_pretrained"), self.accuracy("clean"))

    def test_defense_ordering(self):
        """clean >= attacked with barycentric inference >= attacked without defense"""
        self.assertGreaterEqual(self.accuracy("clean"), self.accuracy("fgsm_bary"))
        self.assertGreaterEqual(self.accuracy("fgsm_bary"), self.accuracy("fgsm_pretrained"))

    def test_barycentric_gain(self):
        """Barycentric inference recovers at least five points under FGSM"""
        self.assertGreaterEqual(self.accuracy("fgsm_bary"), self.accuracy("fgsm") + 0.05)

    def test_pgd_at_least_as_strong(self):
        """PGD-10 accuracy does not exceed FGSM accuracy"""
        self.assertLessEqual(self.accuracy("pgd10"), self.accuracy("fgsm"))

    def test_mutual_information(self):
        """Barycentric predictions share more information across the attack"""
        raw = mi_pairwise(self.reports["clean"].predictions, self.reports["fgsm"].predictions)
        bary = mi_pairwise(self.reports["clean_bary"].predictions, self.reports["fgsm_bary"].predictions)
        self.assertGreater(bary, raw)

    def test_finetune_keeps_barycentric_accuracy(self):
        """Fine-tuning does not lower accuracy on the training barycenters"""
        bary = barycentric_dataset(self.train, self.params, BENCH_SOLVER)
        before = evaluate(self.pretrained, bary).accuracy
        after = evaluate(self.finetuned, bary).accuracy
        self.assertGreaterEqual(after, before)

    def test_feature_separation(self):
        """Two-unit features of barycentered adversarial inputs separate further than raw ones"""
        data = self.test.subset(slice(0, 64))
        config = TrainConfig(epochs=6, attack=AttackConfig.pgd(EPSILON, 10))
        raw, bary = 0.0, 0.0
        for seed in (0, 1, 2):
            model, _ = train_adversarial(self.train, MlpModel((784, 2, 2), seed=seed), config)
            adversarial = attack_fgsm(model, data.images, data.labels, AttackConfig.fgsm(EPSILON))
            adv_bary = barycentric_dataset(LabeledDataset(adversarial, data.labels), self.params, BENCH_SOLVER)
            _, raw_features = model.predict(adversarial)
            _, bary_features = model.predict(adv_bary.images)
            raw += feature_separation(raw_features, data.labels)
            bary += feature_separation(bary_features, data.labels)
        self.assertGreater(bary, raw)


if __name__ == '__main__':
    unittest.main()
