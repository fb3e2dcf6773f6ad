"""Closed-form shrinkage operators used by the primal updates."""
import numpy as np

from .grid_field import FluxField, ScalarField
from ..utils.compatibility import ConfigurationError


def _check_threshold(t: float):
    if not t > 0:
        raise ConfigurationError(f"shrink threshold must be positive, got {t}")


def shrink_l1(x: ScalarField, t: float) -> ScalarField:
    """Soft threshold: sign(x) * max(|x| - t, 0)"""
    _check_threshold(t)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def shrink_l21(m: FluxField, t: float) -> FluxField:
    """Per-cell vector shrinkage; zero-norm cells map to (0, 0)"""
    _check_threshold(t)
    norms = m.norms()
    scale = np.zeros_like(norms)
    active = norms > t
    scale[active] = (norms[active] - t) / norms[active]
    return FluxField(m.mx * scale, m.my * scale)


def prox_mu_prime(
    mu_prime_prev: ScalarField,
    mu_input: ScalarField,
    lam: ScalarField,
    rho: float,
    tau1: float,
) -> ScalarField:
    """Relaxed-marginal update: max(0, (ρτ₁μ + μ′ − τ₁λ) / (1 + ρτ₁))"""
    rt = rho * tau1
    return np.maximum(0.0, (rt * mu_input + mu_prime_prev - tau1 * lam) / (1.0 + rt))
