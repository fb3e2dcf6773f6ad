"""Toy-scale defense pipeline: data, adversarial pretraining, barycentric
fine-tuning, evaluation and feature export."""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from ..transport.beckman import SolverConfig
from ..utils.compatibility import DatasetError, InputError, TrainingError
from ..utils.image_io import read_image, write_image
from .attacks import AttackConfig, run_attack
from .info_metrics import PredictionSet
from .marginals import BarycenterParams, transform_batch
from .model import SGD, MlpModel

logger = logging.getLogger(__name__)

IMAGE_SIZE = 28
LABELS_FILE = "labels.csv"
PEAK_RANGE = (0.1, 0.3)


@dataclass
class LabeledDataset:
    """Grayscale images (n, H, W) in [0, 1] with integer labels"""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 3:
            if self.images.size == 0:
                self.images = self.images.reshape(0, IMAGE_SIZE, IMAGE_SIZE)
            else:
                raise InputError(f"dataset images must be (n, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise InputError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("labels must be nonnegative")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError("dataset images must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        """Index arrays of consecutive minibatches, shuffled when rng is given"""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]


def _ring(rng, yy, xx):
    cy, cx = 13.5 + rng.uniform(-2, 2, size=2)
    a, b = rng.uniform(5.5, 8.0), rng.uniform(7.5, 10.5)
    radius = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
    return np.abs(radius - 1.0) * min(a, b)


def _stroke(rng, yy, xx):
    cy, cx = 13.5 + rng.uniform(-2, 2, size=2)
    slant = rng.uniform(-0.35, 0.35)
    half = rng.uniform(8.0, 11.0)
    uy, ux = np.cos(slant), np.sin(slant)
    along = np.clip((yy - cy) * uy + (xx - cx) * ux, -half, half)
    return np.hypot(yy - (cy + along * uy), xx - (cx + along * ux))


def make_toy_digits(n: int, seed: int = 0, size: int = IMAGE_SIZE) -> LabeledDataset:
    """Synthetic two-class digits: 0 is a ring, 1 is a slanted stroke.

    Shapes are faint (peak intensity 0.1 to 0.3) on a noiseless dark
    background, so an 8/255 budget spread over the background outweighs the
    evidence of the faintest strokes.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size))
    for i, label in enumerate(labels):
        distance = _stroke(rng, yy, xx) if label else _ring(rng, yy, xx)
        thickness = rng.uniform(1.0, 1.8)
        peak = rng.uniform(PEAK_RANGE[0], PEAK_RANGE[1])
        images[i] = peak * np.exp(-((distance / thickness) ** 2))
    return LabeledDataset(images, labels)


def save_dataset(dataset: LabeledDataset, directory: str) -> None:
    """Write NNNNN.pgm files plus labels.csv (file,label)"""
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"{directory}: cannot create dataset directory ({e.strerror})") from e
    rows = ["file,label"]
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        name = f"{i:05d}.pgm"
        write_image(img, os.path.join(directory, name))
        rows.append(f"{name},{int(label)}")
    labels_path = os.path.join(directory, LABELS_FILE)
    try:
        with open(labels_path, "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")
    except OSError as e:
        raise DatasetError(f"{labels_path}: cannot write labels ({e.strerror})") from e
    logger.info("Wrote %d samples to %s", len(dataset), directory)


def load_dataset(directory: str) -> LabeledDataset:
    labels_path = os.path.join(directory, LABELS_FILE)
    try:
        with open(labels_path, "r", encoding="utf-8") as f:
            lines = [line.strip() for line in f if line.strip()]
    except OSError as e:
        raise DatasetError(f"{labels_path}: cannot read labels ({e.strerror})") from e
    if lines and lines[0].lower().startswith("file"):
        lines = lines[1:]

    images, labels = [], []
    for lineno, line in enumerate(lines, start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DatasetError(f"{labels_path}:{lineno}: expected 'file,label'")
        try:
            labels.append(int(parts[1]))
        except ValueError:
            raise DatasetError(f"{labels_path}:{lineno}: label {parts[1]!r} is not an integer") from None
        img = read_image(os.path.join(directory, parts[0]))
        if img.ndim != 2:
            raise DatasetError(f"{parts[0]}: dataset images must be grayscale")
        if images and img.shape != images[0].shape:
            raise DatasetError(f"{parts[0]}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)

    if not images:
        return LabeledDataset(np.zeros((0, IMAGE_SIZE, IMAGE_SIZE)), np.zeros(0, dtype=np.int64))
    logger.debug("Loaded %d samples from %s", len(images), directory)
    return LabeledDataset(np.stack(images), np.array(labels))


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig.pgd)

    @classmethod
    def finetune(cls, seed: int = 0) -> "TrainConfig":
        return cls(epochs=1, lr=1e-4, momentum=0.9, batch_size=32, seed=seed)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    steps: int
    loss: float
    clean_accuracy: float
    adversarial_accuracy: float


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _sgd_epoch(model, optimizer, dataset, config, rng, epoch, step, attack: Optional[AttackConfig]):
    losses, clean_hits, adv_hits = [], 0, 0
    for index in dataset.batches(config.batch_size, rng):
        xb, yb = dataset.images[index], dataset.labels[index]
        clean_probs, _ = model.predict(xb)
        clean_hits += int(np.sum(np.argmax(clean_probs, axis=1) == yb))
        if attack is not None and attack.epsilon > 0:
            xb = run_attack(model, xb, yb, attack, rng)
            adv_probs, _ = model.predict(xb)
            adv_hits += int(np.sum(np.argmax(adv_probs, axis=1) == yb))
        else:
            adv_hits += int(np.sum(np.argmax(clean_probs, axis=1) == yb))

        loss, grads, _ = model.loss_and_grads(xb, yb)
        step += 1
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})", step)
        optimizer.step(grads)
        losses.append(loss)

    n = max(len(dataset), 1)
    log = EpochLog(
        epoch=epoch,
        steps=len(losses),
        loss=float(np.mean(losses)) if losses else 0.0,
        clean_accuracy=clean_hits / n,
        adversarial_accuracy=adv_hits / n,
    )
    return log, step


def train_adversarial(
    dataset: LabeledDataset,
    model: MlpModel,
    config: Optional[TrainConfig] = None,
) -> tuple:
    """PGD adversarial training; returns (model, per-epoch logs)"""
    config = config or TrainConfig()
    model = model.copy()
    optimizer = SGD(model, config.lr, config.momentum)
    rng = np.random.default_rng(config.seed)
    logs: List[EpochLog] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        log, step = _sgd_epoch(model, optimizer, dataset, config, rng, epoch, step, config.attack)
        logs.append(log)
        logger.info(
            "epoch %d: loss %.4f clean %.3f adversarial %.3f",
            epoch, log.loss, log.clean_accuracy, log.adversarial_accuracy,
        )
    return model, logs


def barycentric_dataset(
    dataset: LabeledDataset,
    params: Optional[BarycenterParams] = None,
    solver: Optional[SolverConfig] = None,
    workers: int = 1,
) -> LabeledDataset:
    images = transform_batch(list(dataset.images), params, solver, workers)
    if not images:
        return dataset
    return LabeledDataset(np.stack(images), dataset.labels)


def finetune_barycentric(
    model: MlpModel,
    dataset: LabeledDataset,
    config: Optional[TrainConfig] = None,
    params: Optional[BarycenterParams] = None,
    solver: Optional[SolverConfig] = None,
    workers: int = 1,
) -> tuple:
    """Cross-entropy SGD on barycenters of the clean samples; returns (model, logs)"""
    config = config or TrainConfig.finetune()
    model = model.copy()
    if len(dataset) == 0:
        logger.info("finetune: empty dataset, 0 steps")
        return model, []

    bary = barycentric_dataset(dataset, params, solver, workers)
    optimizer = SGD(model, config.lr, config.momentum)
    rng = np.random.default_rng(config.seed)
    logs: List[EpochLog] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        log, step = _sgd_epoch(model, optimizer, bary, config, rng, epoch, step, None)
        logs.append(log)
        logger.info("finetune epoch %d: %d steps, loss %.4f, accuracy %.3f", epoch, log.steps, log.loss, log.clean_accuracy)
    return model, logs


@dataclass
class EvaluationReport:
    accuracy: float
    predictions: PredictionSet
    n: int
    attack: str = "none"
    barycentric: bool = False

    @property
    def stream(self) -> str:
        return f"{self.attack}{'_bary' if self.barycentric else ''}"


def evaluate(
    model: MlpModel,
    dataset: LabeledDataset,
    attack: Optional[AttackConfig] = None,
    barycentric: bool = False,
    params: Optional[BarycenterParams] = None,
    solver: Optional[SolverConfig] = None,
    seed: int = 0,
    workers: int = 1,
) -> EvaluationReport:
    """Accuracy with an optional attack on the raw image and optional barycentric inference"""
    images = dataset.images
    if attack is not None and len(dataset):
        images = run_attack(model, images, dataset.labels, attack, np.random.default_rng(seed))
    if barycentric and len(dataset):
        images = np.stack(transform_batch(list(images), params, solver, workers))
    probs, _ = model.predict(images)
    report = EvaluationReport(
        accuracy=_accuracy(probs, dataset.labels),
        predictions=PredictionSet(probs),
        n=len(dataset),
        attack=attack.name if attack is not None else "clean",
        barycentric=barycentric,
    )
    logger.info("%s accuracy %.4f on %d samples", report.stream, report.accuracy, report.n)
    return report


def export_features(model: MlpModel, dataset: LabeledDataset, path: str, images=None) -> int:
    """Penultimate features plus label per row; returns the row count"""
    _, features = model.predict(dataset.images if images is None else images)
    labels = dataset.labels.reshape(-1, 1).astype(np.float64)
    data = np.hstack([features, labels]) if len(dataset) else np.zeros((0, model.feature_dim + 1))
    header = ",".join([f"f{j}" for j in range(model.feature_dim)] + ["label"])
    fmt = ["%.17g"] * model.feature_dim + ["%d"]
    try:
        np.savetxt(path, data, delimiter=",", fmt=fmt, header=header, comments="")
    except OSError as e:
        raise DatasetError(f"{path}: cannot write features ({e.strerror})") from e
    return data.shape[0]


def feature_separation(features, labels) -> float:
    """Mean distance between class-conditional feature means"""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    classes = np.unique(labels)
    if classes.size < 2:
        return 0.0
    means = np.stack([features[labels == c].mean(axis=0) for c in classes])
    gaps = [np.linalg.norm(means[i] - means[j]) for i in range(len(means)) for j in range(i + 1, len(means))]
    return float(np.mean(gaps))
