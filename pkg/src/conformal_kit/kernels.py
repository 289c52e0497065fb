"""
Kernel evaluation, auxiliary-covariate sampling, and bandwidth calibration.

K(x1, x2; h) = K0(||x1 - x2|| / h) with a gaussian or boxcar profile. The
bandwidth rule matches a target effective sample size

    n_eff(h) = n * E[E{K(X1, X2; h) | X1}^2] / E[K(X1, X2; h)^2]

estimated by a leave-one-out plug-in.
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigurationError, DomainError, NumericalError

logger = logging.getLogger(__name__)


class KernelFamily(Enum):
    """Radial kernel profiles."""

    GAUSSIAN = "gaussian"  # exp(-u^2 / 2)
    BOXCAR = "boxcar"  # 1{u <= 1}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and bandwidth h > 0."""

    family: KernelFamily = KernelFamily.GAUSSIAN
    bandwidth: float = 1.0

    def __post_init__(self):
        family = KernelFamily(self.family)
        bandwidth = float(self.bandwidth)
        if not bandwidth > 0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth}")
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "bandwidth", bandwidth)

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        return KernelSpec(self.family, bandwidth)


def _as_rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DomainError("covariates must be a vector or a matrix")
    return arr


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    """Kernel values between every row of a and every row of b."""
    a = _as_rows(a)
    b = _as_rows(b)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    h = spec.bandwidth
    if spec.family is KernelFamily.GAUSSIAN:
        if np.isinf(h):
            return np.ones((a.shape[0], b.shape[0]))
        sq = cdist(a, b, "sqeuclidean")
        return np.exp(-sq / (2.0 * h * h))
    dist = cdist(a, b, "euclidean")
    return (dist <= h).astype(float)


def kernel_eval(spec: KernelSpec, x1, x2) -> float:
    """K0(||x1 - x2|| / h) for a single pair of covariate vectors."""
    x1 = np.ravel(np.asarray(x1, dtype=float))
    x2 = np.ravel(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise DomainError(f"dimension mismatch: {x1.size} vs {x2.size}")
    return float(kernel_matrix(spec, x1, x2)[0, 0])


def sample_auxiliary_covariate(spec: KernelSpec, x_test, rng: np.random.Generator) -> np.ndarray:
    """
    Draw X~ with density proportional to K(., x_test; h).

    Gaussian: x_test + h * Z with Z standard normal. Boxcar: uniform on the
    closed ball of radius h around x_test.
    """
    center = np.ravel(np.asarray(x_test, dtype=float))
    d = center.size
    h = spec.bandwidth
    if spec.family is KernelFamily.GAUSSIAN:
        return center + h * rng.standard_normal(d)
    direction = rng.standard_normal(d)
    norm = np.linalg.norm(direction)
    while norm == 0:
        direction = rng.standard_normal(d)
        norm = np.linalg.norm(direction)
    radius = h * rng.uniform() ** (1.0 / d)
    return center + radius * direction / norm


def estimate_effective_sample_size(spec: KernelSpec, covariates) -> float:
    """
    Plug-in estimate of n_eff(h).

    Args:
        spec: Kernel and bandwidth.
        covariates: (n, d) matrix with n >= 2.

    Returns:
        n * mean_i(m_i^2) / mean_{i != j}(K_ij^2), where m_i is the leave-one-out
        row average of K_ij. Returns 1.0 when every off-diagonal weight vanishes.
    """
    x = _as_rows(covariates)
    n = x.shape[0]
    if n < 2:
        raise DomainError("effective sample size needs at least 2 covariate rows")
    gram = kernel_matrix(spec, x, x)
    diag = np.diag(gram)
    loo_mean = (gram.sum(axis=1) - diag) / (n - 1)
    numerator = np.mean(loo_mean**2)
    denominator = ((gram**2).sum() - np.sum(diag**2)) / (n * (n - 1))
    if denominator <= 0:
        return 1.0
    return float(n * numerator / denominator)


def median_pairwise_distance(covariates) -> float:
    x = _as_rows(covariates)
    if x.shape[0] < 2:
        raise DomainError("need at least 2 covariate rows")
    return float(np.median(pdist(x)))


def bandwidth_for_target_neff(
    target: float,
    covariates,
    family: KernelFamily = KernelFamily.GAUSSIAN,
    tolerance: float = 0.5,
    max_iter: int = 200,
) -> float:
    """
    Bandwidth whose effective sample size is within `tolerance` of `target`.

    Bisection runs on log(h / m) over [log 1e-3, log 1e3], m the median pairwise
    distance, so scaling the covariates scales the result exactly.

    Raises:
        ConfigurationError: target outside (1, n].
        NumericalError: target not bracketed, or no convergence in max_iter steps.
    """
    x = _as_rows(covariates)
    n = x.shape[0]
    if not 1.0 < target <= n:
        raise ConfigurationError(f"target effective sample size must lie in (1, {n}], got {target}")
    scale = median_pairwise_distance(x)
    if scale <= 0:
        raise DomainError("covariates have zero median pairwise distance")

    def neff_at(log_ratio: float) -> float:
        return estimate_effective_sample_size(KernelSpec(family, scale * np.exp(log_ratio)), x)

    lo, hi = np.log(1e-3), np.log(1e3)
    f_lo, f_hi = neff_at(lo), neff_at(hi)
    if abs(f_hi - target) <= tolerance:
        return float(scale * np.exp(hi))
    if abs(f_lo - target) <= tolerance:
        return float(scale * np.exp(lo))
    if f_lo > target or f_hi < target:
        raise NumericalError(
            f"target {target} not bracketed: n_eff ranges over [{f_lo:.3f}, {f_hi:.3f}]"
        )
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = neff_at(mid)
        if abs(f_mid - target) <= tolerance:
            h = float(scale * np.exp(mid))
            logger.debug("bandwidth %.6g gives n_eff %.3f (target %.1f)", h, f_mid, target)
            return h
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    raise NumericalError(f"bandwidth bisection did not reach n_eff {target} in {max_iter} steps")
