"""Rotated marginals and the per-channel barycentric transform.

An image is split into channels; each channel is rotated by +θ and −θ,
the two rotations are normalized to unit mass and their Beckman barycenter
replaces the channel. The solve runs in 8-bit intensity units so the default
α, β and ρ act on pixel-sized quantities, and the result is mapped back to
the channel's original mass (``rescale="mass"``) or read back directly in
image units (``rescale="intensity"``), which suits fully converged solves.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from ..operators.grid_field import ScalarField, as_density, mass
from ..transport.beckman import (
    BarycenterProblem,
    SolverConfig,
    StepSizeReport,
    check_step_sizes,
    solve_barycenter,
)
from ..utils.compatibility import ConfigurationError, InputError
from ..utils.performance import ThreadPoolManager

logger = logging.getLogger(__name__)

RESCALE_MODES = ("mass", "intensity")


@dataclass
class BarycenterParams:
    """Marginal construction and problem weights"""

    theta: float = 4.0
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 0.5
    intensity_scale: float = 255.0
    rescale: str = "mass"

    def __post_init__(self):
        if self.rescale not in RESCALE_MODES:
            raise ConfigurationError(f"rescale must be one of {RESCALE_MODES}, got {self.rescale!r}")
        if not self.intensity_scale > 0:
            raise ConfigurationError(f"intensity_scale must be positive, got {self.intensity_scale}")
        for name in ("alpha", "beta", "rho"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def floor(self) -> float:
        """Intensity a converged two-marginal solve removes from every pixel, β / (2ρ · intensity_scale)"""
        return self.beta / (2.0 * self.rho * self.intensity_scale)

    @classmethod
    def for_budget(cls, epsilon: float, headroom: float = 1.25, **kwargs) -> "BarycenterParams":
        """Params whose floor lies ``headroom`` times above an ℓ∞ budget.

        Additions of at most ε on a dark background then fall below the floor
        and vanish from the barycenter.
        """
        if not epsilon > 0 or not headroom > 0:
            raise ConfigurationError(f"budget sizing needs epsilon > 0 and headroom > 0, got {epsilon}, {headroom}")
        beta, rho = kwargs.get("beta", cls.beta), kwargs.get("rho", cls.rho)
        kwargs.pop("intensity_scale", None)
        return cls(intensity_scale=beta / (2.0 * rho * headroom * epsilon), **kwargs)


def as_image(img, name: str = "image") -> np.ndarray:
    """Validate an (H, W) or (C, H, W) image with values in [0, 1]"""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (2, 3) or 0 in arr.shape:
        raise InputError(f"{name} must be (H, W) or (C, H, W), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(f"{name} values must lie in [0, 1], got [{arr.min():.3g}, {arr.max():.3g}]")
    return arr


def _rotate_channel(channel: ScalarField, degrees: float) -> ScalarField:
    height, width = channel.shape
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    src_x = cx + dx * cos - dy * sin
    src_y = cy + dx * sin + dy * cos
    out = ndimage.map_coordinates(channel, [src_y, src_x], order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def rotate_bilinear(img, degrees: float) -> np.ndarray:
    """Rotate about the image center, counter-clockwise for positive degrees.

    Bilinear interpolation; samples falling outside the source read as 0.
    """
    arr = as_image(img)
    if not abs(degrees) < 90:
        raise ConfigurationError(f"rotation angle must satisfy |degrees| < 90, got {degrees}")
    if degrees == 0:
        return arr.copy()
    if arr.ndim == 2:
        return _rotate_channel(arr, degrees)
    return np.stack([_rotate_channel(c, degrees) for c in arr])


def _normalize(density: ScalarField) -> ScalarField:
    total = mass(density)
    if total <= 0.0:
        return np.full(density.shape, 1.0 / density.size)
    return density / total


def make_marginals(
    channel,
    theta: float = 4.0,
    angles: Optional[Sequence[float]] = None,
) -> List[ScalarField]:
    """Unit-mass rotations of one channel, by ±θ unless ``angles`` is given"""
    channel = as_density(channel, "channel")
    if angles is None:
        angles = (theta, -theta)
    if len(angles) < 2:
        raise ConfigurationError(f"need at least 2 rotation angles, got {list(angles)}")
    # rotation works on [0, 1] images; the scale cancels in the normalization
    peak = channel.max()
    scaled = channel / peak if peak > 0.0 else channel
    return [_normalize(rotate_bilinear(scaled, a) if a else scaled) for a in angles]


def _transform_channel(
    channel: ScalarField,
    params: BarycenterParams,
    config: SolverConfig,
    angles: Optional[Sequence[float]],
    step_report: StepSizeReport,
) -> ScalarField:
    total = mass(channel)
    if total <= 0.0:
        return np.zeros_like(channel)

    marginals = make_marginals(channel, params.theta, angles)
    units = params.intensity_scale * total
    problem = BarycenterProblem(
        [m * units for m in marginals], alpha=params.alpha, beta=params.beta, rho=params.rho,
    )
    mu, _ = solve_barycenter(problem, config, step_report=step_report)
    mu = np.maximum(mu, 0.0)
    if params.rescale == "intensity":
        return np.clip(mu / params.intensity_scale, 0.0, 1.0)
    solved = mu.sum()
    if solved <= 0.0:
        logger.debug("barycenter vanished on a channel of mass %.4g", total)
        return np.zeros_like(channel)
    return np.clip(mu * (total / solved), 0.0, 1.0)


def barycentric_transform(
    img,
    params: Optional[BarycenterParams] = None,
    config: Optional[SolverConfig] = None,
    angles: Optional[Sequence[float]] = None,
    pool: Optional[ThreadPoolManager] = None,
    step_report: Optional[StepSizeReport] = None,
) -> np.ndarray:
    """Replace every channel of ``img`` by the barycenter of its rotations"""
    arr = as_image(img)
    params = params or BarycenterParams()
    config = config or SolverConfig()
    channels = arr[np.newaxis] if arr.ndim == 2 else arr
    n_marginals = 2 if angles is None else len(angles)
    if step_report is None:
        step_report = check_step_sizes(config, channels.shape[1:], n_marginals)

    def run(channel):
        return _transform_channel(channel, params, config, angles, step_report)

    if pool is None:
        out = [run(c) for c in channels]
    else:
        out = pool.map(run, list(channels))
    result = np.stack(out)
    return result[0] if arr.ndim == 2 else result


def transform_batch(
    images: Sequence[np.ndarray],
    params: Optional[BarycenterParams] = None,
    config: Optional[SolverConfig] = None,
    workers: int = 1,
) -> List[np.ndarray]:
    """Barycentric transform of a batch of same-shaped images, in order"""
    if len(images) == 0:
        return []
    params = params or BarycenterParams()
    config = config or SolverConfig()
    first = as_image(images[0])
    step_report = check_step_sizes(config, first.shape[-2:], 2)

    with ThreadPoolManager(workers) as pool:
        return pool.map(
            lambda img: barycentric_transform(img, params, config, step_report=step_report),
            images,
        )
