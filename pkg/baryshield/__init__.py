package_info = {
    "name": "BaryShield",
    "version": (1, 0, 0),
    "description": "Beckman barycenters on 2-D grids as a test-time adversarial defense",
    "location": "baryshield command line, or import baryshield",
    "category": "Numerical optimization",
}

__version__ = ".".join(str(v) for v in package_info["version"])

from .operators.grid_field import FluxField, divergence, divergence_adjoint, laplacian_max_eig
from .operators.prox import prox_mu_prime, shrink_l1, shrink_l21
from .transport.beckman import (
    BarycenterProblem,
    SolverConfig,
    SolverTrace,
    check_step_sizes,
    objective_value,
    solve_barycenter,
    solve_distance,
)
from .transport.oracle import emd_1d, subgradient_barycenter
from .defense.marginals import BarycenterParams, barycentric_transform, make_marginals, rotate_bilinear
from .defense.info_metrics import PredictionSet, mi_pairwise, mi_param_output
from .utils.compatibility import (
    BaryShieldError,
    CompatibilityError,
    ConfigurationError,
    DependencyError,
    DivergenceError,
    InputError,
)

__all__ = [
    "package_info",
    "FluxField",
    "divergence",
    "divergence_adjoint",
    "laplacian_max_eig",
    "shrink_l1",
    "shrink_l21",
    "prox_mu_prime",
    "BarycenterProblem",
    "SolverConfig",
    "SolverTrace",
    "check_step_sizes",
    "solve_barycenter",
    "solve_distance",
    "objective_value",
    "emd_1d",
    "subgradient_barycenter",
    "BarycenterParams",
    "rotate_bilinear",
    "make_marginals",
    "barycentric_transform",
    "PredictionSet",
    "mi_param_output",
    "mi_pairwise",
    "BaryShieldError",
    "CompatibilityError",
    "ConfigurationError",
    "DependencyError",
    "DivergenceError",
    "InputError",
]
