"""
Trainable score components.

- Penalized pinball quantile regression on a finite basis, solved by projected
  subgradient steps with Polyak averaging.
- Least-squares mean models for residual scores.
- Nadaraya-Watson conditional CDFs and the quantile models derived from them.
- The BatchGCP group adjustment g(x; a) = a0 + sum_h a_h h(x).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .common import Level
from .errors import (ConfigurationError, ConvergenceError,
                     DegenerateNeighborhoodError, DomainError, NumericalError)
from .kernels import KernelSpec, kernel_matrix

logger = logging.getLogger(__name__)

LevelLike = Union[Level, float]


def _alpha(level: LevelLike) -> float:
    return level.alpha if isinstance(level, Level) else Level(level).alpha


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 1)
    return arr


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intercept:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.ones(x.shape[0])


@dataclass(frozen=True)
class Coordinate:
    index: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x[:, self.index]


@dataclass(frozen=True)
class Threshold:
    """Boolean group indicator 1{x[coordinate] > threshold}."""

    coordinate: int
    threshold: float = 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x[:, self.coordinate] > self.threshold).astype(float)


@dataclass(frozen=True)
class Radial:
    """Gaussian bump exp(-||x - center||^2 / (2 h^2))."""

    center: Tuple[float, ...]
    bandwidth: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        sq = np.sum((x - np.asarray(self.center)) ** 2, axis=1)
        return np.exp(-sq / (2.0 * self.bandwidth**2))


@dataclass(frozen=True)
class NamedFeature:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(x), dtype=float)


@dataclass(frozen=True)
class BasisSpec:
    """Ordered feature maps eta_1..eta_d0, each mapping an (n, d) matrix to n values."""

    functions: Tuple[NamedFeature, ...]

    def __post_init__(self):
        functions = tuple(self.functions)
        if len(functions) < 1:
            raise ConfigurationError("basis needs at least one function")
        names = [f.name for f in functions]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate basis function names: {names}")
        object.__setattr__(self, "functions", functions)

    @property
    def d0(self) -> int:
        return len(self.functions)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(f.name for f in self.functions)

    def features(self, x) -> np.ndarray:
        x = _as_matrix(x)
        return np.column_stack([f(x) for f in self.functions])


def intercept_basis() -> BasisSpec:
    return BasisSpec((NamedFeature("intercept", Intercept()),))


def linear_basis(d: int) -> BasisSpec:
    """Intercept plus the d raw coordinates (d0 = d + 1)."""
    features = [NamedFeature("intercept", Intercept())]
    features += [NamedFeature(f"x{i}", Coordinate(i)) for i in range(d)]
    return BasisSpec(tuple(features))


def feature_basis(named: Sequence[Tuple[str, Callable]], intercept: bool = True) -> BasisSpec:
    """Basis from (name, fn) pairs, optionally prefixed with an intercept."""
    features = [NamedFeature("intercept", Intercept())] if intercept else []
    features += [NamedFeature(name, fn) for name, fn in named]
    return BasisSpec(tuple(features))


def rbf_basis(centers, bandwidth: float) -> BasisSpec:
    """Intercept plus one gaussian bump per center row."""
    centers = _as_matrix(centers)
    features = [NamedFeature("intercept", Intercept())]
    features += [
        NamedFeature(f"rbf{i}", Radial(tuple(float(c) for c in row), float(bandwidth)))
        for i, row in enumerate(centers)
    ]
    return BasisSpec(tuple(features))


def group_basis(groups: Sequence[NamedFeature]) -> BasisSpec:
    return BasisSpec((NamedFeature("intercept", Intercept()),) + tuple(groups))


def sign_groups(d: int, count: int = 2) -> Tuple[NamedFeature, ...]:
    """Indicators 1{x_j > 0} for the first min(d, count) coordinates."""
    return tuple(NamedFeature(f"x{j}>0", Threshold(j, 0.0)) for j in range(min(d, count)))


# ---------------------------------------------------------------------------
# Pinball quantile regression
# ---------------------------------------------------------------------------


def pinball_loss(s1, s2, alpha: LevelLike):
    """
    Pinball loss at level 1 - alpha: (1-alpha)(s1-s2) if s1 > s2, else alpha(s2-s1).

    Vectorized; returns a float for scalar inputs.
    """
    a = _alpha(alpha)
    diff = np.asarray(s1, dtype=float) - np.asarray(s2, dtype=float)
    loss = np.where(diff > 0, (1.0 - a) * diff, -a * diff)
    return float(loss) if loss.ndim == 0 else loss


@dataclass(frozen=True)
class SolverConfig:
    """Projected-subgradient settings; step size is step_scale * range(target) / sqrt(t)."""

    iterations: int = 2000
    step_scale: float = 0.5
    tolerance: float = 1e-3
    strict: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be at least 1")
        if self.step_scale <= 0:
            raise ConfigurationError("step_scale must be positive")
        if self.tolerance <= 0:
            raise ConfigurationError("tolerance must be positive")


@dataclass(frozen=True)
class PinballModel:
    """Fitted f_kappa(x) = eta(x) . kappa with ||kappa|| <= norm_bound."""

    basis: BasisSpec
    kappa: np.ndarray
    lam: float
    norm_bound: float
    level: Level
    objective: float = float("nan")
    converged: bool = True

    def __post_init__(self):
        kappa = np.array(self.kappa, dtype=float).ravel()
        if kappa.size != self.basis.d0:
            raise DomainError(f"kappa has {kappa.size} entries, basis has {self.basis.d0}")
        if np.linalg.norm(kappa) > self.norm_bound * (1 + 1e-12):
            raise DomainError("kappa violates the norm bound")
        kappa.setflags(write=False)
        object.__setattr__(self, "kappa", kappa)

    def predict(self, x) -> np.ndarray:
        return self.basis.features(x) @ self.kappa


def predict_quantile(model: PinballModel, x) -> float:
    """Inner product of the basis features at a single covariate vector with kappa."""
    x = np.ravel(np.asarray(x, dtype=float)).reshape(1, -1)
    return float(model.predict(x)[0])


def _objective(features, target, kappa, alpha, lam) -> float:
    return float(np.mean(pinball_loss(target, features @ kappa, alpha)) + lam * kappa @ kappa)


def _project(kappa: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(kappa)
    if norm > bound:
        return kappa * (bound / norm)
    return kappa


def fit_pinball_qr(
    x,
    target,
    basis: Optional[BasisSpec] = None,
    alpha: LevelLike = 0.1,
    lam: float = 0.0,
    norm_bound: Optional[float] = None,
    config: Optional[SolverConfig] = None,
) -> PinballModel:
    """
    Minimize mean pinball loss at level 1 - alpha plus lam * ||kappa||^2 over ||kappa|| <= B.

    The ridge term is applied as a proximal step, the pinball term as a subgradient
    step of size c / sqrt(t). Intercept columns start at the sample quantile. The
    result is the better of the best iterate and the running average.

    Args:
        x: (n, d) covariates.
        target: n regression targets.
        basis: Feature maps; defaults to intercept plus coordinates.
        alpha: Level; the fitted function estimates the (1 - alpha)-quantile.
        lam: Ridge penalty, >= 0.
        norm_bound: B; defaults to 10 * (1 + max |target|).
        config: Solver settings.

    Returns:
        The fitted PinballModel.
    """
    config = config or SolverConfig()
    level = alpha if isinstance(alpha, Level) else Level(alpha)
    a = level.alpha
    x = _as_matrix(x)
    target = np.ravel(np.asarray(target, dtype=float))
    if target.size == 0:
        raise DomainError("pinball regression needs data")
    if x.shape[0] != target.size:
        raise DomainError("covariates and targets differ in length")
    basis = basis or linear_basis(x.shape[1])
    if target.size < basis.d0:
        raise ConfigurationError(f"need at least d0 = {basis.d0} points, got {target.size}")
    if lam < 0:
        raise ConfigurationError("lam must be nonnegative")
    bound = float(norm_bound) if norm_bound is not None else 10.0 * (1.0 + np.max(np.abs(target)))
    if bound <= 0:
        raise ConfigurationError("norm_bound must be positive")

    features = basis.features(x)
    n = target.size
    tau = 1.0 - a

    kappa = np.zeros(basis.d0)
    ones = np.flatnonzero(np.all(features == 1.0, axis=0))
    if ones.size:
        kappa[ones[0]] = np.quantile(target, tau)
    kappa = _project(kappa, bound)

    spread = float(np.ptp(target))
    step = config.step_scale * (spread if spread > 0 else max(1.0, float(np.max(np.abs(target)))))

    best = kappa.copy()
    best_obj = _objective(features, target, kappa, a, lam)
    average = kappa.copy()
    checkpoint = int(0.9 * config.iterations)
    obj_at_checkpoint = best_obj
    for t in range(1, config.iterations + 1):
        residual = target - features @ kappa
        slope = np.where(residual > 0, -tau, a)
        grad = features.T @ slope / n
        eta = step / np.sqrt(t)
        kappa = _project((kappa - eta * grad) / (1.0 + 2.0 * lam * eta), bound)
        average += (kappa - average) / (t + 1)
        obj = _objective(features, target, kappa, a, lam)
        if not np.isfinite(obj):
            raise NumericalError(f"pinball objective became non-finite at iteration {t}")
        if obj < best_obj:
            best_obj, best = obj, kappa.copy()
        if t == checkpoint:
            obj_at_checkpoint = best_obj

    average = _project(average, bound)
    avg_obj = _objective(features, target, average, a, lam)
    if avg_obj < best_obj:
        best_obj, best = avg_obj, average

    gap = obj_at_checkpoint - best_obj
    converged = gap <= config.tolerance * max(abs(best_obj), 1e-12) or gap <= 1e-12
    if not converged:
        message = (
            f"pinball solver still improving after {config.iterations} iterations "
            f"(last-window gain {gap:.3g}, objective {best_obj:.6g})"
        )
        if config.strict:
            raise ConvergenceError(message, best=best, objective=best_obj)
        logger.warning(message)
    return PinballModel(basis, best, float(lam), bound, level, best_obj, converged)


def default_cc_penalty(d0: int, n: int) -> float:
    """Ridge scale (d0 log n / n)^(2/3)."""
    return float((d0 * np.log(n) / n) ** (2.0 / 3.0))


# ---------------------------------------------------------------------------
# Mean model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanModel:
    """Least-squares fit on a basis."""

    basis: BasisSpec
    coef: np.ndarray

    def predict(self, x) -> np.ndarray:
        return self.basis.features(x) @ self.coef


def fit_mean_model(x, y, basis: Optional[BasisSpec] = None) -> MeanModel:
    x = _as_matrix(x)
    y = np.ravel(np.asarray(y, dtype=float))
    if y.size == 0:
        raise DomainError("mean model needs data")
    basis = basis or linear_basis(x.shape[1])
    coef, *_ = np.linalg.lstsq(basis.features(x), y, rcond=None)
    return MeanModel(basis, coef)


# ---------------------------------------------------------------------------
# Kernel conditional CDF
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalCdf:
    """
    Nadaraya-Watson estimate of the CDF of v given x.

    With fallback=True, a query point whose kernel weights all vanish uses the
    unweighted empirical CDF and logs a warning; otherwise it raises.
    """

    kernel: KernelSpec
    x: np.ndarray
    v: np.ndarray
    fallback: bool = True
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        x = _as_matrix(self.x)
        v = np.ravel(np.asarray(self.v, dtype=float))
        if v.size == 0:
            raise DomainError("conditional CDF needs a nonempty training set")
        if x.shape[0] != v.size:
            raise DomainError("training covariates and values differ in length")
        order = np.argsort(v, kind="stable")
        object.__setattr__(self, "x", x[order])
        object.__setattr__(self, "v", v[order])
        object.__setattr__(self, "_order", order)

    def weights(self, x) -> np.ndarray:
        """Normalized kernel weights over the training points, sorted by v."""
        raw = kernel_matrix(self.kernel, np.ravel(np.asarray(x, dtype=float)), self.x)[0]
        total = raw.sum()
        if total <= 0:
            if not self.fallback:
                raise DegenerateNeighborhoodError("all kernel weights are zero at the query point")
            logger.warning("empty kernel neighbourhood; using the global empirical CDF")
            return np.full(self.v.size, 1.0 / self.v.size)
        return raw / total

    def step(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Jump locations (sorted training values) and the CDF value at each jump."""
        cum = np.cumsum(self.weights(x))
        cum = np.minimum(cum, 1.0)
        cum[-1] = 1.0
        return self.v, cum

    def evaluate(self, v, x) -> np.ndarray:
        values, cum = self.step(x)
        idx = np.searchsorted(values, np.asarray(v, dtype=float), side="right")
        padded = np.concatenate(([0.0], cum))
        return padded[idx]

    def quantile(self, x, p: float) -> float:
        """inf{v : F(v | x) >= p}."""
        values, cum = self.step(x)
        idx = int(np.searchsorted(cum, p, side="left"))
        return float(values[min(idx, values.size - 1)])


def conditional_cdf_eval(cdf: ConditionalCdf, v: float, x) -> float:
    """F(v | x) = sum_j K(x, X_j) 1{v_j <= v} / sum_j K(x, X_j)."""
    return float(cdf.evaluate(v, x))


@dataclass(frozen=True)
class KernelQuantileModel:
    """Conditional quantile at a fixed probability read off a ConditionalCdf."""

    cdf: ConditionalCdf
    probability: float

    def predict(self, x) -> np.ndarray:
        x = _as_matrix(x)
        return np.array([self.cdf.quantile(row, self.probability) for row in x])


# ---------------------------------------------------------------------------
# BatchGCP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupAdjustment:
    """g(x; a) = a0 + sum_h a_h h(x) over finite boolean groups."""

    groups: Tuple[NamedFeature, ...]
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=float).ravel()
        if coefficients.size != len(self.groups) + 1:
            raise DomainError("need one coefficient per group plus an intercept")
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    def predict(self, x) -> np.ndarray:
        return group_basis(self.groups).features(x) @ self.coefficients


def fit_batchgcp(
    x,
    scores,
    groups: Sequence[NamedFeature],
    alpha: LevelLike,
    config: Optional[SolverConfig] = None,
) -> GroupAdjustment:
    """Pinball fit of the group-indicator adjustment; every group must be nonempty."""
    x = _as_matrix(x)
    groups = tuple(groups)
    for group in groups:
        if not np.any(group(x) > 0):
            raise ConfigurationError(f"group {group.name!r} is empty on the data")
    model = fit_pinball_qr(x, scores, group_basis(groups), alpha, lam=0.0, config=config)
    return GroupAdjustment(groups, model.kappa)
