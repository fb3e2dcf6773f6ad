"""First-order primal-dual solver for Beckman distances and barycenters.

The barycenter problem couples K marginals μᵢ through a shared density μ::

    min  Σᵢ ‖Mᵢ‖₂,₁ + α Σᵢ ‖rᵢ‖₁ + (ρ/2) Σᵢ ‖μᵢ′ − μᵢ‖² + β ‖μ‖₁
    s.t. div(Mᵢ) + μᵢ′ − μ − rᵢ = 0,   μᵢ′ ≥ 0

and is solved by alternating proximal steps on (Mᵢ, μᵢ′, rᵢ, μ) with an
extrapolated ascent on the multipliers λᵢ. All K blocks are stored as
stacked ``(K, height, width)`` arrays and updated together.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..operators.grid_field import (
    FluxField,
    ScalarField,
    as_density,
    divergence,
    divergence_adjoint,
    laplacian_max_eig,
    mass,
)
from ..operators.prox import prox_mu_prime, shrink_l1, shrink_l21
from ..utils.compatibility import ConfigurationError, DatasetError, DivergenceError, InputError

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-6


@dataclass
class BarycenterProblem:
    """Marginals and weights of one barycenter solve"""

    marginals: Sequence[ScalarField]
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 0.5

    def __post_init__(self):
        if len(self.marginals) < 2:
            raise InputError(f"a barycenter needs at least 2 marginals, got {len(self.marginals)}")
        self.marginals = [as_density(m, f"marginal {i}") for i, m in enumerate(self.marginals)]
        shapes = {m.shape for m in self.marginals}
        if len(shapes) != 1:
            raise InputError(f"marginals must share one grid shape, got {sorted(shapes)}")
        for name in ("alpha", "beta", "rho"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.marginals[0].shape

    @property
    def n_marginals(self) -> int:
        return len(self.marginals)

    def stacked(self) -> np.ndarray:
        return np.stack(self.marginals)


@dataclass
class SolverConfig:
    """Step sizes and stopping rule"""

    tau1: float = 0.1
    tau2: float = 1.0
    iterations: int = 200
    trace_every: int = 0
    enforce_stepsize: bool = False
    tolerance: Optional[float] = None
    return_average: bool = False

    def __post_init__(self):
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ConfigurationError(f"step sizes must be positive, got tau1={self.tau1}, tau2={self.tau2}")
        if int(self.iterations) < 1:
            raise ConfigurationError(f"iterations must be at least 1, got {self.iterations}")
        if int(self.trace_every) < 0:
            raise ConfigurationError(f"trace_every must be nonnegative, got {self.trace_every}")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ConfigurationError(f"tolerance must be positive, got {self.tolerance}")
        self.iterations = int(self.iterations)
        self.trace_every = int(self.trace_every)


@dataclass(frozen=True)
class StepSizeReport:
    lambda_max: float
    product: float
    satisfied: bool
    coupled_product: float


def check_step_sizes(
    config: SolverConfig,
    shape: Tuple[int, int],
    n_marginals: int = 2,
    offset: float = 3.0,
) -> StepSizeReport:
    """Test τ₁τ₂(λmax(DDᵀ) + offset) < 1.

    ``offset`` is 3 for the barycenter constraint map (μ′, μ and r each add
    an identity block) and 0 for the plain distance problem. The coupled
    product also counts the K − 1 extra identity blocks from the shared μ.
    """
    height, width = shape
    lam = laplacian_max_eig(int(height), int(width))
    product = config.tau1 * config.tau2 * (lam + offset)
    coupled = product
    if offset > 0:
        coupled = config.tau1 * config.tau2 * (lam + offset + n_marginals - 1)
    report = StepSizeReport(lam, product, product < 1.0, coupled)

    if not report.satisfied:
        message = (
            f"step sizes tau1={config.tau1:g}, tau2={config.tau2:g} violate the convergence "
            f"condition on a {height}x{width} grid: tau1*tau2*(lambda_max+{offset:g}) = {product:.4f} >= 1"
        )
        if config.enforce_stepsize:
            raise ConfigurationError(message)
        warnings.warn(message, RuntimeWarning, stacklevel=2)
    return report


@dataclass
class SolverState:
    """Primal and dual iterates, stacked over the K marginals"""

    m: FluxField
    mu_prime: np.ndarray
    r: np.ndarray
    mu: ScalarField
    lam: np.ndarray
    residual: np.ndarray

    @classmethod
    def zeros(cls, shape: Tuple[int, int], n_marginals: int) -> "SolverState":
        stacked = (n_marginals,) + tuple(shape)
        return cls(
            m=FluxField.zeros(stacked),
            mu_prime=np.zeros(stacked),
            r=np.zeros(stacked),
            mu=np.zeros(shape),
            lam=np.zeros(stacked),
            residual=np.zeros(stacked),
        )

    def fluxes(self) -> List[FluxField]:
        return [FluxField(mx, my) for mx, my in zip(self.m.mx, self.m.my)]

    def copy(self) -> "SolverState":
        return SolverState(
            FluxField(self.m.mx.copy(), self.m.my.copy()),
            self.mu_prime.copy(),
            self.r.copy(),
            self.mu.copy(),
            self.lam.copy(),
            self.residual.copy(),
        )


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    objective: float
    residual: float
    avg_objective: float
    avg_residual: float


@dataclass
class SolverTrace:
    records: List[TraceRecord] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    step_report: Optional[StepSizeReport] = None
    state: Optional[SolverState] = None
    mu_average: Optional[ScalarField] = None

    def rows(self) -> List[Tuple[int, float, float]]:
        """(iteration, objective, residual) rows for CSV export"""
        return [(r.iteration, r.objective, r.residual) for r in self.records]

    def write_csv(self, path: str) -> None:
        data = np.array(self.rows(), dtype=np.float64).reshape(-1, 3)
        try:
            np.savetxt(
                path,
                data,
                delimiter=",",
                fmt=["%d", "%.17g", "%.17g"],
                header="iteration,objective,residual",
                comments="",
            )
        except OSError as e:
            raise DatasetError(f"{path}: cannot write trace ({e.strerror})") from e


def _objective(m: FluxField, mu: ScalarField, marginals: np.ndarray, alpha: float, beta: float) -> float:
    slack = divergence(m) + marginals - mu
    return m.norm_21() + alpha * float(np.abs(slack).sum()) + beta * float(np.abs(mu).sum())


def objective_value(state: SolverState, problem: BarycenterProblem) -> float:
    """Primal value with the slack eliminated: Σ‖Mᵢ‖ + αΣ‖div Mᵢ + μᵢ − μ‖₁ + β‖μ‖₁"""
    marginals = problem.stacked()
    if state.mu.shape != problem.shape or state.m.shape[0] != problem.n_marginals:
        raise InputError(
            f"state shape {state.m.shape} does not match {problem.n_marginals} marginals of {problem.shape}"
        )
    return _objective(state.m, state.mu, marginals, problem.alpha, problem.beta)


def constraint_residual(residual: np.ndarray) -> float:
    """Σᵢ ‖div(Mᵢ) + μᵢ′ − μ − rᵢ‖₂"""
    return float(np.sqrt((residual ** 2).sum(axis=(-2, -1))).sum())


def _check_finite(iteration: int, *arrays: np.ndarray):
    for arr in arrays:
        if not np.isfinite(arr.sum()):
            raise DivergenceError(f"non-finite iterate after {iteration} sweep(s)", iteration)


def solve_barycenter(
    problem: BarycenterProblem,
    config: Optional[SolverConfig] = None,
    step_report: Optional[StepSizeReport] = None,
) -> Tuple[ScalarField, SolverTrace]:
    """Run the primal-dual sweeps and return (μ, trace).

    Every primal block is updated from the duals of the previous sweep, then
    each λᵢ ascends along the extrapolated residual 2·resᵢᵗ⁺¹ − resᵢᵗ.
    """
    config = config or SolverConfig()
    if step_report is None:
        step_report = check_step_sizes(config, problem.shape, problem.n_marginals)

    tau1, tau2 = config.tau1, config.tau2
    alpha, beta, rho = problem.alpha, problem.beta, problem.rho
    marginals = problem.stacked()
    state = SolverState.zeros(problem.shape, problem.n_marginals)
    trace = SolverTrace(step_report=step_report)

    track_average = config.return_average or config.trace_every > 0
    if track_average:
        sum_mx = np.zeros_like(state.m.mx)
        sum_my = np.zeros_like(state.m.my)
        sum_mu = np.zeros_like(state.mu)
        sum_res = np.zeros_like(state.residual)

    m, mu_prime, r, mu, lam, res_prev = (
        state.m, state.mu_prime, state.r, state.mu, state.lam, state.residual,
    )
    iteration = 0
    for iteration in range(1, config.iterations + 1):
        m = shrink_l21(m.scaled_add(divergence_adjoint(lam), -tau1), tau1)
        mu_prime = prox_mu_prime(mu_prime, marginals, lam, rho, tau1)
        r = shrink_l1(r + tau1 * lam, alpha * tau1)
        mu = shrink_l1(mu + tau1 * lam.sum(axis=0), beta * tau1)

        res = divergence(m) + mu_prime - mu - r
        lam = lam + tau2 * (2.0 * res - res_prev)
        res_prev = res
        _check_finite(iteration, m.mx, m.my, mu_prime, r, mu, lam)

        if track_average:
            sum_mx += m.mx
            sum_my += m.my
            sum_mu += mu
            sum_res += res

        residual_norm = None
        if config.trace_every and iteration % config.trace_every == 0:
            residual_norm = constraint_residual(res)
            avg_m = FluxField(sum_mx / iteration, sum_my / iteration)
            record = TraceRecord(
                iteration=iteration,
                objective=_objective(m, mu, marginals, alpha, beta),
                residual=residual_norm,
                avg_objective=_objective(avg_m, sum_mu / iteration, marginals, alpha, beta),
                avg_residual=constraint_residual(sum_res / iteration),
            )
            trace.records.append(record)
            logger.debug(
                "iter %d objective %.6g residual %.3e avg residual %.3e",
                iteration, record.objective, record.residual, record.avg_residual,
            )

        if config.tolerance is not None:
            if residual_norm is None:
                residual_norm = constraint_residual(res)
            if residual_norm <= config.tolerance:
                trace.converged = True
                break

    trace.iterations = iteration
    trace.state = SolverState(m, mu_prime, r, mu, lam, res_prev)
    if track_average:
        trace.mu_average = sum_mu / iteration
    logger.debug("barycenter solve finished after %d sweeps", iteration)

    if config.return_average:
        return trace.mu_average, trace
    return mu, trace


def solve_distance(
    mu1: ScalarField,
    mu2: ScalarField,
    config: Optional[SolverConfig] = None,
) -> Tuple[float, FluxField, SolverTrace]:
    """Beckman distance min ‖M‖₂,₁ s.t. div(M) + μ₁ − μ₂ = 0"""
    config = config or SolverConfig()
    mu1 = as_density(mu1, "mu1")
    mu2 = as_density(mu2, "mu2")
    if mu1.shape != mu2.shape:
        raise InputError(f"densities differ in shape: {mu1.shape} vs {mu2.shape}")
    m1, m2 = mass(mu1), mass(mu2)
    if abs(m1 - m2) > MASS_TOLERANCE * max(abs(m1), abs(m2), 1e-300):
        raise InputError(f"balanced transport needs equal masses, got {m1:.9g} and {m2:.9g}")

    step_report = check_step_sizes(config, mu1.shape, n_marginals=1, offset=0.0)
    tau1, tau2 = config.tau1, config.tau2
    source = mu1 - mu2
    m = FluxField.zeros(mu1.shape)
    lam = np.zeros(mu1.shape)
    res_prev = np.zeros(mu1.shape)
    trace = SolverTrace(step_report=step_report)

    sum_mx = np.zeros(mu1.shape)
    sum_my = np.zeros(mu1.shape)
    sum_res = np.zeros(mu1.shape)
    iteration = 0
    for iteration in range(1, config.iterations + 1):
        m = shrink_l21(m.scaled_add(divergence_adjoint(lam), -tau1), tau1)
        res = divergence(m) + source
        lam = lam + tau2 * (2.0 * res - res_prev)
        res_prev = res
        _check_finite(iteration, m.mx, m.my, lam)

        sum_mx += m.mx
        sum_my += m.my
        sum_res += res

        residual_norm = None
        if config.trace_every and iteration % config.trace_every == 0:
            residual_norm = float(np.linalg.norm(res))
            avg_m = FluxField(sum_mx / iteration, sum_my / iteration)
            trace.records.append(
                TraceRecord(
                    iteration=iteration,
                    objective=m.norm_21(),
                    residual=residual_norm,
                    avg_objective=avg_m.norm_21(),
                    avg_residual=float(np.linalg.norm(sum_res / iteration)),
                )
            )

        if config.tolerance is not None:
            if residual_norm is None:
                residual_norm = float(np.linalg.norm(res))
            if residual_norm <= config.tolerance:
                trace.converged = True
                break

    trace.iterations = iteration
    if config.return_average:
        m = FluxField(sum_mx / iteration, sum_my / iteration)
    value = m.norm_21()
    logger.debug("distance %.6g after %d sweeps", value, iteration)
    return value, m, trace
