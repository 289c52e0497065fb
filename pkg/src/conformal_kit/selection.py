"""
Conditional-coverage-oriented model selection.

Each candidate predictor is scored by how far its coverage residuals

    zeta_j = 1{s_j <= q_s} - (1 - alpha)

are from having zero local mean, measured with a kernel-localized empirical
likelihood statistic at several bandwidths. The selection rules aggregate
those losses (AvgLoss, AvgRankLoss) or ignore them (EffSize, Rand).
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.stats import rankdata

from .calib_core import (DEFAULT_RESOLUTION, build_prediction_region,
                         calibrate, region_grid, weighted_quantile)
from .common import (CalibrationSet, Level, PredictionRegion,
                     WeightedScoreSample, as_covariate)
from .errors import ConfigurationError, SelectionError
from .kernels import (KernelFamily, KernelSpec, bandwidth_for_target_neff,
                      kernel_matrix)
from .methods import PredictorSpec

logger = logging.getLogger(__name__)

CLAMP = 1.0 - 1e-6


class SelectionRule(Enum):
    """Available selection rules."""

    AVG_LOSS = "AvgLoss"  # smallest mean loss over bandwidths
    AVG_RANK_LOSS = "AvgRankLoss"  # smallest mean midrank over bandwidths
    EFF_SIZE = "EffSize"  # smallest mean region length on calibration covariates
    RAND = "Rand"  # uniform draw


@dataclass(frozen=True)
class CandidatePool:
    """Candidate predictors sharing one calibration set."""

    candidates: Tuple[PredictorSpec, ...]
    calibration: CalibrationSet
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        candidates = tuple(self.candidates)
        if not candidates:
            raise ConfigurationError("candidate pool is empty")
        labels = tuple(self.labels) or tuple(c.label for c in candidates)
        if len(labels) != len(candidates):
            raise ConfigurationError("need one label per candidate")
        object.__setattr__(self, "candidates", candidates)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass
class SelectionConfig:
    """Configuration for model selection."""

    rule: SelectionRule = SelectionRule.AVG_LOSS
    targets: Tuple[float, ...] = (30.0, 40.0, 50.0)
    alpha: float = 0.1
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN


@dataclass
class SelectionReport:
    """Per-candidate losses (candidates x bandwidths), ranks, and the choice of every rule."""

    labels: List[str]
    rule: SelectionRule
    targets: List[float]
    bandwidths: List[float]
    losses: np.ndarray
    ranks: np.ndarray
    degenerate_rows: np.ndarray
    mean_lengths: np.ndarray
    choices: Dict[str, int] = field(default_factory=dict)

    @property
    def chosen_index(self) -> int:
        return self.choices[self.rule.value]

    @property
    def chosen(self) -> str:
        return self.labels[self.chosen_index]

    def to_dict(self) -> Dict[str, Any]:
        def clean(arr):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(arr)]

        return {
            "rule": self.rule.value,
            "chosen": self.chosen,
            "labels": list(self.labels),
            "targets": [float(t) for t in self.targets],
            "bandwidths": [float(h) for h in self.bandwidths],
            "losses": clean(self.losses),
            "ranks": clean(self.ranks),
            "degenerate_rows": np.asarray(self.degenerate_rows, dtype=int).tolist(),
            "mean_lengths": clean(self.mean_lengths)[0],
            "choices": {rule: self.labels[idx] for rule, idx in self.choices.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# Empirical-likelihood loss
# ---------------------------------------------------------------------------


def zeta_residual(score, threshold: float, alpha) -> Any:
    """1{score <= threshold} - (1 - alpha): alpha when covered, alpha - 1 otherwise."""
    a = alpha.alpha if isinstance(alpha, Level) else float(alpha)
    values = np.where(np.asarray(score) <= threshold, a, a - 1.0)
    return float(values) if values.ndim == 0 else values


@dataclass(frozen=True)
class ElTerms:
    """Row contributions, multipliers, and degeneracy flags of one EL loss evaluation."""

    contributions: np.ndarray
    multipliers: np.ndarray
    degenerate: np.ndarray

    @property
    def total(self) -> float:
        return float(self.contributions.sum())


def el_constraint(lam: float, a_row: np.ndarray, zeta: np.ndarray, scale: float) -> float:
    """g(lambda) = sum_j a_j zeta_j / (scale + lambda zeta_j)."""
    return float(np.sum(a_row * zeta / (scale + lam * zeta)))


def _row_root(a_row: np.ndarray, zeta: np.ndarray, scale: float) -> float:
    active = a_row > 0
    pos, neg = zeta[active & (zeta > 0)], zeta[active & (zeta < 0)]
    lo = np.max(-scale / pos)
    hi = np.min(-scale / neg)
    width = hi - lo
    return brentq(el_constraint, lo + 1e-12 * width, hi - 1e-12 * width,
                  args=(a_row, zeta, scale), xtol=1e-14, maxiter=500)


def el_terms(a: np.ndarray, zeta: np.ndarray, alpha: float, scale: float) -> ElTerms:
    """
    Evaluate sum_j a_ij log(1 + lambda_i zeta_j / scale) for every row i.

    lambda_i solves sum_j a_ij zeta_j / (scale + lambda_i zeta_j) = 0. Two-valued
    zeta has a closed-form root; other zeta vectors use bracketed root finding.
    Rows whose active zeta are one-signed have no root; their multiplier is
    clamped just inside (-scale / alpha, scale / (1 - alpha)) and the row flagged.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    zeta = np.ravel(np.asarray(zeta, dtype=float))
    positive = a @ (zeta > 0).astype(float)
    negative = a @ (zeta < 0).astype(float)
    degenerate = (positive <= 0) | (negative <= 0)
    upper_bound, lower_bound = scale / (1.0 - alpha), -scale / alpha

    lam = np.zeros(a.shape[0])
    lam[degenerate & (positive > 0)] = CLAMP * upper_bound
    lam[degenerate & (negative > 0)] = CLAMP * lower_bound
    live = ~degenerate
    values = np.unique(zeta[zeta != 0])
    if values.size == 2 and values[0] < 0 < values[1]:
        zn, zp = values
        p, m = positive[live], negative[live]
        lam[live] = -scale * (p * zp + m * zn) / (zp * zn * (p + m))
    else:
        for i in np.flatnonzero(live):
            lam[i] = _row_root(a[i], zeta, scale)

    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log1p(np.outer(lam, zeta) / scale)
    contributions = np.where(a > 0, a * logs, 0.0).sum(axis=1)
    return ElTerms(contributions, lam, degenerate)


def localization_weights(kernel: KernelSpec, covariates) -> np.ndarray:
    """a_ij = K(X_i, X_j) / sum_l K(X_i, X_l)."""
    gram = kernel_matrix(kernel, covariates, covariates)
    return gram / gram.sum(axis=1, keepdims=True)


def _calibration_zeta(candidate: PredictorSpec, calib: CalibrationSet, alpha: float) -> np.ndarray:
    bound = candidate.score.bind(calib)
    q = weighted_quantile(WeightedScoreSample.uniform(bound.calibration_scores), alpha)
    return zeta_residual(bound.calibration_scores, q, alpha)


def localized_el_loss(
    candidate: PredictorSpec,
    calib: CalibrationSet,
    kernel: KernelSpec,
    level=0.1,
    x_test=None,
    y_test: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Localized empirical-likelihood loss of one candidate.

    Uses the calibration points only unless both x_test and y_test are given,
    in which case the test pair joins the localization and the residuals and
    the threshold uses the candidate's own weights at x_test.
    """
    alpha = level.alpha if isinstance(level, Level) else Level(level).alpha
    if x_test is None or y_test is None:
        zeta = _calibration_zeta(candidate, calib, alpha)
        covariates = calib.x
    else:
        x_test = as_covariate(x_test, calib.d)
        result = calibrate(candidate, calib, x_test, alpha, rng=rng)
        test_score = result.bound.test_scores(x_test, [y_test])
        zeta = zeta_residual(np.append(result.bound.calibration_scores, test_score), result.threshold, alpha)
        covariates = np.vstack([calib.x, x_test])
    terms = el_terms(localization_weights(kernel, covariates), zeta, alpha, calib.n + 1.0)
    if terms.degenerate.any():
        logger.warning("%d of %d EL rows clamped for %s", int(terms.degenerate.sum()), terms.degenerate.size, candidate.label)
    return terms.total


# ---------------------------------------------------------------------------
# Selector
# ---------------------------------------------------------------------------


class ModelSelector:
    """
    Selects one candidate from a pool.

    Rules:
    - AvgLoss: mean EL loss across the target-n_eff bandwidths
    - AvgRankLoss: mean midrank of the loss across bandwidths
    - EffSize: mean prediction-region length on the calibration covariates
    - Rand: uniform draw from the rng
    Ties go to the lower index.
    """

    def __init__(self, config: Optional[SelectionConfig] = None):
        self.config = config or SelectionConfig()
        self._validate_config()

    def _validate_config(self):
        self.config.rule = SelectionRule(self.config.rule)
        self.config.kernel_family = KernelFamily(self.config.kernel_family)
        if not 0 < self.config.alpha < 1:
            raise ConfigurationError("alpha must be in (0, 1)")
        if not self.config.targets:
            raise ConfigurationError("need at least one bandwidth target")
        if any(t <= 1 for t in self.config.targets):
            raise ConfigurationError("bandwidth targets must exceed 1")

    def bandwidths(self, covariates) -> List[float]:
        n = np.atleast_2d(covariates).shape[0]
        targets = [min(float(t), float(n)) for t in self.config.targets]
        return [bandwidth_for_target_neff(t, covariates, self.config.kernel_family) for t in targets]

    def losses(self, pool: CandidatePool, bandwidths: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        """(losses, degenerate row counts), each candidates x bandwidths."""
        calib = pool.calibration
        alpha = self.config.alpha
        zetas = [_calibration_zeta(c, calib, alpha) for c in pool.candidates]
        losses = np.zeros((len(pool), len(bandwidths)))
        degenerate = np.zeros((len(pool), len(bandwidths)), dtype=int)
        for b, h in enumerate(bandwidths):
            a = localization_weights(KernelSpec(self.config.kernel_family, h), calib.x)
            for c, zeta in enumerate(zetas):
                terms = el_terms(a, zeta, alpha, calib.n + 1.0)
                losses[c, b] = terms.total
                degenerate[c, b] = int(terms.degenerate.sum())
        return losses, degenerate

    def mean_lengths(self, pool: CandidatePool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        calib = pool.calibration
        lengths = np.zeros(len(pool))
        for c, candidate in enumerate(pool.candidates):
            bound = candidate.score.bind(calib)
            total = 0.0
            for x in calib.x:
                total += build_prediction_region(candidate, calib, x, self.config.alpha, rng=rng, bound=bound).length
            lengths[c] = total / calib.n
        return lengths

    def select(
        self,
        pool: CandidatePool,
        rng: Optional[np.random.Generator] = None,
        bandwidth_covariates=None,
    ) -> SelectionReport:
        rule = self.config.rule
        rng = rng if rng is not None else np.random.default_rng()
        if len(pool) == 1:
            logger.info("single-candidate pool; selecting %s", pool.labels[0])
            empty = np.zeros((1, len(self.config.targets)))
            return SelectionReport(
                list(pool.labels), rule, list(self.config.targets), [], empty, np.ones_like(empty),
                empty.astype(int), np.zeros(1), {r.value: 0 for r in SelectionRule},
            )

        covariates = pool.calibration.x if bandwidth_covariates is None else np.atleast_2d(bandwidth_covariates)
        bandwidths = self.bandwidths(covariates)
        losses, degenerate = self.losses(pool, bandwidths)
        usable = degenerate.max(axis=1) < pool.calibration.n
        if not usable.any():
            raise SelectionError("every candidate has one-signed coverage residuals at some bandwidth")
        masked = np.where(usable[:, None], losses, np.inf)
        ranks = np.column_stack([rankdata(masked[:, b], method="average") for b in range(masked.shape[1])])
        lengths = self.mean_lengths(pool, rng) if rule is SelectionRule.EFF_SIZE else np.full(len(pool), np.nan)

        strategy_map = {
            SelectionRule.AVG_LOSS: lambda: int(np.argmin(masked.mean(axis=1))),
            SelectionRule.AVG_RANK_LOSS: lambda: int(np.argmin(ranks.mean(axis=1))),
            SelectionRule.EFF_SIZE: lambda: int(np.argmin(lengths)),
            SelectionRule.RAND: lambda: int(rng.integers(len(pool))),
        }
        choices = {SelectionRule.AVG_LOSS.value: strategy_map[SelectionRule.AVG_LOSS](),
                   SelectionRule.AVG_RANK_LOSS.value: strategy_map[SelectionRule.AVG_RANK_LOSS]()}
        choices[rule.value] = strategy_map[rule]()
        logger.info("%s selected %s", rule.value, pool.labels[choices[rule.value]])
        return SelectionReport(
            list(pool.labels), rule, list(self.config.targets), bandwidths, losses, ranks,
            degenerate, lengths, choices,
        )


def select(
    pool: CandidatePool,
    rule=SelectionRule.AVG_LOSS,
    targets: Sequence[float] = (30.0, 40.0, 50.0),
    rng: Optional[np.random.Generator] = None,
    level=0.1,
    bandwidth_covariates=None,
    kernel_family: KernelFamily = KernelFamily.GAUSSIAN,
) -> SelectionReport:
    """Run one selection rule on the pool; see ModelSelector."""
    alpha = level.alpha if isinstance(level, Level) else float(level)
    selector = ModelSelector(SelectionConfig(SelectionRule(rule), tuple(targets), alpha, kernel_family))
    return selector.select(pool, rng, bandwidth_covariates)


def efficient_selected_region(
    pool: CandidatePool,
    x_test,
    level,
    rule=SelectionRule.AVG_LOSS,
    rng: Optional[np.random.Generator] = None,
    targets: Sequence[float] = (30.0, 40.0, 50.0),
    bandwidth_covariates=None,
    y_domain=None,
    resolution: int = DEFAULT_RESOLUTION,
) -> PredictionRegion:
    """Select once on the calibration set, then build the chosen candidate's region."""
    report = select(pool, rule, targets, rng, level, bandwidth_covariates)
    chosen = pool.candidates[report.chosen_index]
    return build_prediction_region(chosen, pool.calibration, x_test, level, y_domain, resolution, rng=rng)


def exact_selected_region(
    pool: CandidatePool,
    x_test,
    level,
    rule=SelectionRule.AVG_LOSS,
    rng: Optional[np.random.Generator] = None,
    targets: Sequence[float] = (30.0, 40.0, 50.0),
    bandwidth_covariates=None,
    y_domain=None,
    resolution: int = DEFAULT_RESOLUTION,
) -> PredictionRegion:
    """
    Re-select at every trial response.

    The test pair joins the localization weights; its residual depends on y
    only through whether each candidate covers y, so each candidate needs two
    loss evaluations per bandwidth. EffSize and Rand do not depend on y and
    fall back to the efficient region.
    """
    rule = SelectionRule(rule)
    if rule in (SelectionRule.EFF_SIZE, SelectionRule.RAND) or len(pool) == 1:
        return efficient_selected_region(pool, x_test, level, rule, rng, targets,
                                         bandwidth_covariates, y_domain, resolution)
    alpha = level.alpha if isinstance(level, Level) else Level(level).alpha
    calib = pool.calibration
    x_test = as_covariate(x_test, calib.d)
    selector = ModelSelector(SelectionConfig(rule, tuple(targets), alpha))
    covariates = calib.x if bandwidth_covariates is None else np.atleast_2d(bandwidth_covariates)
    bandwidths = selector.bandwidths(covariates)
    augmented = np.vstack([calib.x, x_test])
    grid = region_grid(calib, y_domain, resolution)

    covers = np.zeros((len(pool), grid.size), dtype=bool)
    # loss_by_cover[c, b, 0] with the test point uncovered, [c, b, 1] covered
    loss_by_cover = np.zeros((len(pool), len(bandwidths), 2))
    for c, candidate in enumerate(pool.candidates):
        result = calibrate(candidate, calib, x_test, alpha, rng=rng)
        covers[c] = result.bound.test_scores(x_test, grid) <= result.threshold
        zeta_cal = zeta_residual(result.bound.calibration_scores, result.threshold, alpha)
        for b, h in enumerate(bandwidths):
            a = localization_weights(KernelSpec(selector.config.kernel_family, h), augmented)
            for covered in (0, 1):
                zeta = np.append(zeta_cal, alpha if covered else alpha - 1.0)
                loss_by_cover[c, b, covered] = el_terms(a, zeta, alpha, calib.n + 1.0).total

    accepted = np.zeros(grid.size, dtype=bool)
    patterns, inverse = np.unique(covers.T, axis=0, return_inverse=True)
    for k, pattern in enumerate(patterns):
        losses = loss_by_cover[np.arange(len(pool)), :, pattern.astype(int)]
        if rule is SelectionRule.AVG_LOSS:
            chosen = int(np.argmin(losses.mean(axis=1)))
        else:
            ranks = np.column_stack([rankdata(losses[:, b], method="average") for b in range(losses.shape[1])])
            chosen = int(np.argmin(ranks.mean(axis=1)))
        accepted[np.ravel(inverse) == k] = pattern[chosen]
    return PredictionRegion.from_mask(grid, accepted)
