"""
Two-layer hierarchical conformal prediction.

K branches of N observations each; the test pair is the last observation of
the last branch. Each branch gets its own fitted score and the scores of all
KN - 1 observed pairs are pooled with one +inf atom.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np
from joblib import Parallel, delayed

from .calib_core import DEFAULT_RESOLUTION, MIN_RESOLUTION, weighted_quantile
from .common import (CalibrationSet, Level, PredictionRegion,
                     WeightedScoreSample, default_y_domain)
from .errors import ConfigurationError, DomainError
from .estimators import (BasisSpec, ConditionalCdf, SolverConfig,
                         fit_pinball_qr, linear_basis)
from .kernels import KernelFamily, KernelSpec, median_pairwise_distance
from .methods import BoundScore, ScoreKind, ScoreSpec

logger = logging.getLogger(__name__)


class BranchScoreKind(Enum):
    DCP_BRANCH = "dcp_branch"  # |F_k(y | x) - 1/2|
    CQR_BRANCH = "cqr_branch"  # max(y - Q_k(1 - alpha/2 | x), Q_k(alpha/2 | x) - y)


@dataclass(frozen=True)
class HierData:
    """
    Rectangular branch layout: x has shape (K, N, d), y has shape (K, N).

    y[K-1, N-1] belongs to the test pair and is never read.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim == 2:
            x = x[..., None]
        if y.ndim != 2 or x.ndim != 3 or x.shape[:2] != y.shape:
            raise DomainError("hierarchical data must be x (K, N, d) and y (K, N)")
        k, n = y.shape
        if k < 2 or n < 2:
            raise ConfigurationError(f"need at least 2 branches of 2 observations, got K={k}, N={n}")
        observed = y.copy()
        observed[-1, -1] = 0.0
        if not np.all(np.isfinite(observed)):
            raise DomainError("observed responses must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n_branches(self) -> int:
        return int(self.y.shape[0])

    @property
    def branch_size(self) -> int:
        return int(self.y.shape[1])

    @property
    def d(self) -> int:
        return int(self.x.shape[2])

    @property
    def x_test(self) -> np.ndarray:
        return self.x[-1, -1]

    def fit_rows(self, k: int) -> int:
        """Observations of branch k used for fitting; the test branch drops the test pair."""
        return self.branch_size - 1 if k == self.n_branches - 1 else self.branch_size


@dataclass(frozen=True)
class HierConfig:
    """
    Per-branch estimator settings.

    kernel: conditional-CDF kernel for dcp_branch; None picks a gaussian with
        bandwidth equal to the branch's median pairwise covariate distance.
    basis: pinball basis for cqr_branch; None means intercept plus coordinates.
    """

    kernel: Optional[KernelSpec] = None
    basis: Optional[BasisSpec] = None
    lam: float = 0.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_jobs: int = 1


def _branch_kernel(config: HierConfig, x: np.ndarray) -> KernelSpec:
    if config.kernel is not None:
        return config.kernel
    if x.shape[0] < 2:
        return KernelSpec(KernelFamily.GAUSSIAN, np.inf)
    scale = median_pairwise_distance(x)
    return KernelSpec(KernelFamily.GAUSSIAN, scale if scale > 0 else np.inf)


def _fit_branch(x: np.ndarray, y: np.ndarray, kind: BranchScoreKind, alpha: float, config: HierConfig) -> ScoreSpec:
    if kind is BranchScoreKind.DCP_BRANCH:
        return ScoreSpec(ScoreKind.DCP, cdf=ConditionalCdf(_branch_kernel(config, x), x, y))
    basis = config.basis or linear_basis(x.shape[1])
    lower = fit_pinball_qr(x, y, basis, 1.0 - alpha / 2.0, lam=config.lam, config=config.solver)
    upper = fit_pinball_qr(x, y, basis, alpha / 2.0, lam=config.lam, config=config.solver)
    return ScoreSpec(ScoreKind.CQR_TWO_SIDED, lower_quantile=lower, upper_quantile=upper)


def fit_branch_scores(
    data: HierData,
    kind: BranchScoreKind,
    level,
    config: Optional[HierConfig] = None,
) -> List[ScoreSpec]:
    """Fit one score per branch on that branch's observed pairs."""
    kind = BranchScoreKind(kind)
    alpha = level.alpha if isinstance(level, Level) else Level(level).alpha
    config = config or HierConfig()
    smallest = data.branch_size - 1
    if kind is BranchScoreKind.CQR_BRANCH:
        d0 = (config.basis or linear_basis(data.d)).d0
        if smallest < d0:
            raise ConfigurationError(f"cqr_branch needs at least {d0} observations per branch, got {smallest}")
    jobs = (
        delayed(_fit_branch)(data.x[k, : data.fit_rows(k)], data.y[k, : data.fit_rows(k)], kind, alpha, config)
        for k in range(data.n_branches)
    )
    return list(Parallel(n_jobs=config.n_jobs)(jobs))


def hierarchical_region(
    data: HierData,
    kind: BranchScoreKind,
    level,
    y_grid=None,
    config: Optional[HierConfig] = None,
    pooled: bool = True,
    resolution: int = DEFAULT_RESOLUTION,
) -> PredictionRegion:
    """
    Region for the test pair of the last branch.

    Args:
        data: Branch layout.
        kind: dcp_branch or cqr_branch.
        level: Miscoverage level.
        y_grid: Trial responses; when None the test branch's score is inverted
            in closed form.
        config: Branch estimator settings.
        pooled: False calibrates on the test branch's own N - 1 scores only.
        resolution: Grid size for y_grid=None fallbacks.
    """
    level = level if isinstance(level, Level) else Level(level)
    scores = fit_branch_scores(data, kind, level, config)
    calibration = []
    branches = range(data.n_branches) if pooled else [data.n_branches - 1]
    for k in branches:
        rows = data.fit_rows(k)
        calibration.append(scores[k].pretrained(data.x[k, :rows], data.y[k, :rows]))
    calibration = np.concatenate(calibration)
    q = weighted_quantile(WeightedScoreSample.uniform(calibration), level)
    logger.debug("hierarchical threshold %.6g over %d scores", q, calibration.size)

    test_spec = scores[-1]
    last = data.fit_rows(data.n_branches - 1)
    if y_grid is None:
        bound = BoundScore(test_spec, CalibrationSet(data.x[-1, :last], data.y[-1, :last]), calibration)
        region = bound.invert(data.x_test, q)
        if region is not None:
            return region
        if resolution < MIN_RESOLUTION:
            raise ConfigurationError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
        observed = np.delete(data.y.ravel(), data.y.size - 1)
        y_grid = np.linspace(*default_y_domain(observed), resolution)
    grid = np.ravel(np.asarray(y_grid, dtype=float))
    test_scores = test_spec.pretrained(np.tile(data.x_test, (grid.size, 1)), grid)
    return PredictionRegion.from_mask(grid, test_scores <= q)
