"""Brute-force references for validating the primal-dual solver."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..operators.grid_field import FluxField, ScalarField, as_density, divergence, divergence_adjoint
from ..utils.compatibility import InputError
from .beckman import BarycenterProblem

logger = logging.getLogger(__name__)

ORACLE_MAX_CELLS = 64
DEFAULT_STEP_SCALES = (1.0, 0.3, 0.1, 0.03)


def emd_1d(mu1, mu2) -> float:
    """Exact Wasserstein-1 on a line: Σₖ |Σ_{j≤k} (μ₁[j] − μ₂[j])|"""
    a = as_density(mu1, "mu1")
    b = as_density(mu2, "mu2")
    if a.shape != b.shape or a.shape[0] != 1:
        raise InputError(f"emd_1d needs two 1xn densities of equal length, got {a.shape} and {b.shape}")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, abs(a.sum())):
        raise InputError(f"emd_1d needs equal masses, got {a.sum():.12g} and {b.sum():.12g}")
    return float(np.abs(np.cumsum(a[0] - b[0])).sum())


@dataclass
class OracleResult:
    mu: ScalarField
    objective: float
    history: List[float] = field(default_factory=list)


def _objective(mx, my, mu, marginals, alpha, beta) -> float:
    slack = divergence(FluxField(mx, my)) + marginals - mu
    return float(np.hypot(mx, my).sum() + alpha * np.abs(slack).sum() + beta * np.abs(mu).sum())


def _run(problem: BarycenterProblem, mu0: ScalarField, steps: int, scale: float):
    alpha, beta = problem.alpha, problem.beta
    marginals = problem.stacked()
    mx = np.zeros_like(marginals)
    my = np.zeros_like(marginals)
    mu = mu0.copy()

    best = _objective(mx, my, mu, marginals, alpha, beta)
    best_mu = mu.copy()
    history = [best]
    for t in range(1, steps + 1):
        slack_sign = np.sign(divergence(FluxField(mx, my)) + marginals - mu)
        norms = np.hypot(mx, my)
        safe = np.where(norms > 0, norms, 1.0)
        adj = divergence_adjoint(slack_sign)
        gx = np.where(norms > 0, mx / safe, 0.0) + alpha * adj.mx
        gy = np.where(norms > 0, my / safe, 0.0) + alpha * adj.my
        gmu = beta * np.sign(mu) - alpha * slack_sign.sum(axis=0)

        step = scale / np.sqrt(t)
        mx = mx - step * gx
        my = my - step * gy
        mu = mu - step * gmu

        value = _objective(mx, my, mu, marginals, alpha, beta)
        if value < best:
            best, best_mu = value, mu.copy()
        history.append(best)
    return best_mu, best, history


def subgradient_barycenter(
    problem: BarycenterProblem,
    steps: int = 2000,
    step_scales: Optional[Sequence[float]] = None,
) -> OracleResult:
    """Minimize Σ‖Mᵢ‖₂,₁ + αΣ‖div(Mᵢ) + μᵢ − μ‖₁ + β‖μ‖₁ by subgradient descent.

    Each run starts from the cheapest of the mean, each marginal and zero
    (all with zero flux) and steps with c/√t; the best c of ``step_scales``
    (relative to the largest marginal value) wins. Only meant for tiny grids.
    """
    height, width = problem.shape
    if height * width > ORACLE_MAX_CELLS:
        raise InputError(f"oracle grids are limited to {ORACLE_MAX_CELLS} cells, got {height}x{width}")

    marginals = problem.stacked()
    zero_flux = np.zeros_like(marginals)
    candidates = [marginals.mean(axis=0)] + [m for m in marginals] + [np.zeros(problem.shape)]
    mu0 = min(
        candidates,
        key=lambda c: _objective(zero_flux, zero_flux, c, marginals, problem.alpha, problem.beta),
    )

    magnitude = max(float(marginals.max()), 1e-12)
    best: Optional[OracleResult] = None
    for c in step_scales or DEFAULT_STEP_SCALES:
        mu, value, history = _run(problem, mu0, steps, c * magnitude)
        if best is None or value < best.objective:
            best = OracleResult(mu, value, history)
    logger.debug("oracle objective %.6g on %dx%d", best.objective, height, width)
    return best

