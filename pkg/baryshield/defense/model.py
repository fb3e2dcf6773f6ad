"""Small fully connected classifier with hand-written backpropagation.

Hidden layers use ReLU, the output is a softmax over C classes. The last
hidden activation is exposed as the penultimate feature vector.
"""
import logging
import os
import re
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from ..utils.compatibility import DatasetError, InputError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "baryshield-mlp"
_HEADER = re.compile(rf"^{CHECKPOINT_MAGIC} sizes=([0-9,]+) seed=(-?[0-9]+)$")


@dataclass
class MlpModel:
    sizes: Tuple[int, ...]
    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise InputError(f"layer sizes must list at least input and output widths, got {self.sizes}")
        if not self.weights:
            rng = np.random.default_rng(self.seed)
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                self.weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
                self.biases.append(np.zeros(fan_out))
        self._check_shapes()

    def _check_shapes(self):
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise InputError(f"expected {len(self.sizes) - 1} layers for sizes {self.sizes}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise InputError(f"layer {k} has shapes {w.shape}, {b.shape} for sizes {self.sizes}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {k} has non-finite parameters")

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MlpModel":
        sizes = tuple(sizes)
        weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(sizes, weights, biases)

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    @property
    def feature_dim(self) -> int:
        return self.sizes[-2]

    def parameters(self) -> List[np.ndarray]:
        """Parameters in checkpoint order: W₀, b₀, W₁, b₁, …"""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def copy(self) -> "MlpModel":
        return MlpModel(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)

    def flatten_input(self, images) -> np.ndarray:
        """(n, ...) or a single image -> (n, d) float64"""
        x = np.asarray(images, dtype=np.float64)
        d = self.sizes[0]
        if x.size == d:
            return x.reshape(1, d)
        if x.ndim >= 2 and int(np.prod(x.shape[1:])) == d:
            return x.reshape(x.shape[0], d)
        if x.size == 0:
            return x.reshape(0, d)
        raise InputError(f"input of shape {x.shape} does not match model input width {d}")

    def _forward(self, x: np.ndarray):
        activations = [x]
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = np.maximum(z, 0.0) if k < len(self.weights) - 1 else z
            activations.append(h)
        return activations

    def logits(self, images) -> np.ndarray:
        return self._forward(self.flatten_input(images))[-1]

    def predict(self, images) -> Tuple[np.ndarray, np.ndarray]:
        """Softmax probabilities and penultimate features, one row per sample"""
        activations = self._forward(self.flatten_input(images))
        return softmax(activations[-1], axis=1), activations[-2]

    def loss_and_grads(self, images, labels) -> Tuple[float, List[np.ndarray], np.ndarray]:
        """Mean cross-entropy, its parameter gradients and its input gradient"""
        x = self.flatten_input(images)
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        n = x.shape[0]
        if y.shape[0] != n:
            raise InputError(f"{n} samples but {y.shape[0]} labels")
        if n and (y.min() < 0 or y.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")

        activations = self._forward(x)
        log_p = log_softmax(activations[-1], axis=1)
        loss = float(-log_p[np.arange(n), y].mean()) if n else 0.0

        delta = np.exp(log_p)
        delta[np.arange(n), y] -= 1.0
        delta /= max(n, 1)
        grads: List[np.ndarray] = []
        for k in range(len(self.weights) - 1, -1, -1):
            grads[:0] = [activations[k].T @ delta, delta.sum(axis=0)]
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * (activations[k] > 0)
        return loss, grads, delta


def forward(model: MlpModel, image) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilities and penultimate features for a single image"""
    probs, features = model.predict(np.asarray(image)[np.newaxis])
    return probs[0], features[0]


def grad_input(model: MlpModel, image, label: int) -> np.ndarray:
    """Gradient of the cross-entropy w.r.t. the image, in the image's shape"""
    image = np.asarray(image, dtype=np.float64)
    _, _, g = model.loss_and_grads(image[np.newaxis], [label])
    return g.reshape(image.shape)


def batch_grad_input(model: MlpModel, images, labels) -> np.ndarray:
    """Per-sample input gradients (not averaged over the batch)"""
    images = np.asarray(images, dtype=np.float64)
    _, _, g = model.loss_and_grads(images, labels)
    return (g * images.shape[0]).reshape(images.shape)


class SGD:
    """Minibatch SGD with heavy-ball momentum: v ← μv + g, θ ← θ − lr·v"""

    def __init__(self, model: MlpModel, lr: float, momentum: float = 0.9):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in model.parameters()]

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update in place and return the update norm"""
        total = 0.0
        for param, v, g in zip(self.model.parameters(), self.velocity, grads):
            v *= self.momentum
            v += g
            update = self.lr * v
            param -= update
            total += float(np.sum(update * update))
        return float(np.sqrt(total))


def save_checkpoint(model: MlpModel, path: str) -> None:
    """Text header line, then every parameter as little-endian float64"""
    header = f"{CHECKPOINT_MAGIC} sizes={','.join(map(str, model.sizes))} seed={model.seed}\n"
    flat = np.concatenate([p.ravel() for p in model.parameters()]).astype("<f8")
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(flat.tobytes())
    except OSError as e:
        raise DatasetError(f"{path}: cannot write checkpoint ({e.strerror})") from e
    logger.info("Saved checkpoint %s (%d parameters)", os.fspath(path), flat.size)


def load_checkpoint(path: str) -> MlpModel:
    try:
        with open(path, "rb") as f:
            header = f.readline().decode("ascii", errors="replace").strip()
            payload = f.read()
    except OSError as e:
        raise DatasetError(f"{path}: cannot read checkpoint ({e.strerror})") from e

    match = _HEADER.match(header)
    if not match:
        raise DatasetError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    sizes = tuple(int(s) for s in match.group(1).split(","))
    seed = int(match.group(2))
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(payload) != 8 * expected:
        raise DatasetError(f"{path}: expected {expected} parameters, found {len(payload) // 8}")

    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    weights, biases, offset = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[offset:offset + a * b].reshape(a, b))
        offset += a * b
        biases.append(flat[offset:offset + b].copy())
        offset += b
    return MlpModel(sizes, weights, biases, seed)
