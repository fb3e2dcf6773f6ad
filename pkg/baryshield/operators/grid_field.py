"""Discrete 2-D fields on a regular grid and the divergence operator.

Scalar fields are plain ``(height, width)`` float64 arrays; the operators
also accept stacks ``(..., height, width)`` and act on the last two axes. Fluxes are
collocated: every cell carries a 2-vector ``(mx, my)``; ``mx`` differences
along the width axis, ``my`` along the height axis, and any value read
outside the grid is zero (zero-flux boundary).

A single-row grid is treated as a 1-D line: it carries only ``mx``, its
``my`` component is held at zero and ignored by every operator.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from ..utils.compatibility import ConvergenceError, InputError

logger = logging.getLogger(__name__)

ScalarField = np.ndarray
Shape = Tuple[int, int]

POWER_ITERATION_SEED = 1234
POWER_ITERATION_CAP = 10_000


def as_scalar_field(values, name: str = "field") -> ScalarField:
    """Validate and return a finite 2-D float64 array"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"{name} must be a non-empty 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def as_density(values, name: str = "density") -> ScalarField:
    """Validate a nonnegative mass field"""
    arr = as_scalar_field(values, name)
    if np.any(arr < 0):
        raise InputError(f"{name} has negative mass (min {arr.min():.3g})")
    return arr


def mass(density: ScalarField) -> float:
    return float(np.sum(density))


def has_y_flux(shape: Tuple[int, ...]) -> bool:
    return shape[-2] > 1


@dataclass(frozen=True)
class FluxField:
    """Per-cell flux vectors M = (mx, my)"""

    mx: np.ndarray
    my: np.ndarray

    def __post_init__(self):
        if self.mx.shape != self.my.shape or self.mx.ndim < 2:
            raise InputError(f"flux components disagree: {self.mx.shape} vs {self.my.shape}")

    @classmethod
    def zeros(cls, shape: Shape) -> "FluxField":
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mx.shape

    def norms(self) -> np.ndarray:
        """Per-cell Euclidean norm"""
        return np.hypot(self.mx, self.my)

    def norm_21(self) -> float:
        """Sum over cells of the per-cell Euclidean norm"""
        return float(np.sum(self.norms()))

    def inner(self, other: "FluxField") -> float:
        return float(np.vdot(self.mx, other.mx) + np.vdot(self.my, other.my))

    def scaled_add(self, other: "FluxField", scale: float) -> "FluxField":
        return FluxField(self.mx + scale * other.mx, self.my + scale * other.my)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.mx)) and np.all(np.isfinite(self.my)))


def divergence(m: FluxField) -> ScalarField:
    """Backward-difference divergence with zero reads outside the grid"""
    out = m.mx.copy()
    out[..., :, 1:] -= m.mx[..., :, :-1]
    if has_y_flux(m.shape):
        out += m.my
        out[..., 1:, :] -= m.my[..., :-1, :]
    return out


def divergence_adjoint(lam: ScalarField) -> FluxField:
    """Adjoint of :func:`divergence`: clipped forward differences with sign flip"""
    ax = lam.copy()
    ax[..., :, :-1] -= lam[..., :, 1:]
    if has_y_flux(lam.shape):
        ay = lam.copy()
        ay[..., :-1, :] -= lam[..., 1:, :]
    else:
        ay = np.zeros_like(lam)
    return FluxField(ax, ay)


def _apply_laplacian(v: ScalarField) -> ScalarField:
    return divergence(divergence_adjoint(v))


@lru_cache(maxsize=64)
def laplacian_max_eig(height: int, width: int, tol: float = 1e-6) -> float:
    """Largest eigenvalue of D Dᵀ by power iteration.

    The start vector is drawn from a fixed seed, so the estimate is
    deterministic; it never exceeds 8 for the 5-point stencil.
    """
    if height < 1 or width < 1:
        raise InputError(f"grid must be at least 1x1, got {height}x{width}")

    rng = np.random.default_rng(POWER_ITERATION_SEED)
    v = rng.standard_normal((height, width))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for iteration in range(1, POWER_ITERATION_CAP + 1):
        w = _apply_laplacian(v)
        previous, estimate = estimate, float(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(estimate - previous) <= tol * abs(estimate):
            logger.debug("λmax(%dx%d) = %.8f after %d iterations", height, width, estimate, iteration)
            return estimate

    raise ConvergenceError(
        f"power iteration for the {height}x{width} Laplacian did not reach "
        f"relative tolerance {tol:g} in {POWER_ITERATION_CAP} iterations "
        f"(last estimate {estimate:.6f})"
    )
