"""ℓ∞ signed-gradient attacks against :class:`MlpModel`."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..utils.compatibility import ConfigurationError
from .model import MlpModel, batch_grad_input

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 8.0 / 255.0


@dataclass
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    steps: int = 10
    step_size: Optional[float] = None
    random_start: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if int(self.steps) < 1:
            raise ConfigurationError(f"attack steps must be at least 1, got {self.steps}")
        self.steps = int(self.steps)
        if self.step_size is None:
            self.step_size = self.epsilon if self.steps == 1 else self.epsilon / 4.0
        if self.step_size < 0:
            raise ConfigurationError(f"step_size must be nonnegative, got {self.step_size}")
        if self.step_size * self.steps < self.epsilon - 1e-12:
            raise ConfigurationError(
                f"step_size*steps = {self.step_size * self.steps:.4g} cannot cover epsilon = {self.epsilon:.4g}"
            )

    @classmethod
    def fgsm(cls, epsilon: float = DEFAULT_EPSILON) -> "AttackConfig":
        return cls(epsilon=epsilon, steps=1, step_size=epsilon, random_start=False)

    @classmethod
    def pgd(cls, epsilon: float = DEFAULT_EPSILON, steps: int = 10) -> "AttackConfig":
        return cls(epsilon=epsilon, steps=steps, step_size=epsilon / 4.0, random_start=True)

    @property
    def is_fgsm(self) -> bool:
        return self.steps == 1 and not self.random_start

    @property
    def name(self) -> str:
        return "fgsm" if self.is_fgsm else f"pgd{self.steps}"


def _project(adv: np.ndarray, images: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(adv, images - epsilon, images + epsilon), 0.0, 1.0)


def attack_fgsm(model: MlpModel, images, labels, cfg: AttackConfig) -> np.ndarray:
    """clip(x + ε·sign(∇ₓ loss), 0, 1) for a batch"""
    images = np.asarray(images, dtype=np.float64)
    grad = batch_grad_input(model, images, labels)
    return np.clip(images + cfg.epsilon * np.sign(grad), 0.0, 1.0)


def attack_pgd(
    model: MlpModel,
    images,
    labels,
    cfg: AttackConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Projected signed-gradient ascent inside the ε-ball and [0, 1]"""
    images = np.asarray(images, dtype=np.float64)
    adv = images.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        adv = _project(adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=images.shape), images, cfg.epsilon)
    for _ in range(cfg.steps):
        grad = batch_grad_input(model, adv, labels)
        adv = _project(adv + cfg.step_size * np.sign(grad), images, cfg.epsilon)
    return adv


def run_attack(
    model: MlpModel,
    images,
    labels,
    cfg: AttackConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """FGSM when the config is single-step without random start, PGD otherwise"""
    if cfg.is_fgsm:
        return attack_fgsm(model, images, labels, cfg)
    return attack_pgd(model, images, labels, cfg, rng)
