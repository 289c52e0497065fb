"""
Weighted conformal quantiles, prediction regions, and conformal p-values.

Every method in the catalogue calibrates through the same object: the
weight-normalized empirical distribution of calibration scores with an atom
of mass w(x_test) at +inf. Its (1 - alpha)-quantile is the generalized
inverse (left-continuous inf), ties pooled.

Tie convention: a trial response y belongs to the region when its score is
<= the quantile. The strict p-value counts calibration scores > the test
score; the inclusive p-value counts >= and adds the +inf atom, and is exactly
dual to the region: inclusive p <= alpha iff y is outside the region.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple, Union

import numpy as np

from .common import (CalibrationSet, Level, PredictionRegion,
                     WeightedScoreSample, as_covariate, default_y_domain)
from .errors import ConfigurationError, DomainError

if TYPE_CHECKING:
    from .methods import BoundScore, PredictorSpec, WeightDraw

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 512
MIN_RESOLUTION = 8


def _level(level: Union[Level, float]) -> Level:
    return level if isinstance(level, Level) else Level(level)


def weighted_quantile(sample: WeightedScoreSample, level: Union[Level, float]) -> float:
    """
    inf{u : sum_{s_i <= u} w_i / (sum w_i + w_inf) >= 1 - alpha}.

    Returns +inf when the finite mass never reaches 1 - alpha.
    """
    alpha = _level(level).alpha
    scores, weights = sample.scores, sample.weights
    if scores.size == 0:
        if sample.infinite_weight <= 0:
            raise DomainError("total mass must be positive")
        return float("inf")
    order = np.argsort(scores, kind="stable")
    cumulative = np.cumsum(weights[order])
    total = cumulative[-1] + sample.infinite_weight
    if total <= 0:
        raise DomainError("total mass must be positive")
    reached = np.flatnonzero(cumulative / total >= 1.0 - alpha)
    if reached.size == 0:
        return float("inf")
    return float(scores[order][reached[0]])


def region_grid(
    calib: CalibrationSet,
    y_domain: Optional[Tuple[float, float]] = None,
    resolution: int = DEFAULT_RESOLUTION,
) -> np.ndarray:
    """Evenly spaced trial responses over y_domain (default: calibration range +- 4 IQR)."""
    if resolution < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    lo, hi = y_domain if y_domain is not None else default_y_domain(calib.y)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ConfigurationError(f"y_domain must be a finite interval, got ({lo}, {hi})")
    return np.linspace(lo, hi, int(resolution))


@dataclass(frozen=True)
class Calibration:
    """Fast-mode calibration of one predictor at one test covariate."""

    bound: "BoundScore"
    draw: "WeightDraw"
    threshold: float

    def sample(self) -> WeightedScoreSample:
        return WeightedScoreSample(self.bound.calibration_scores, self.draw.weights, self.draw.infinite_weight)


def calibrate(
    spec: "PredictorSpec",
    calib: CalibrationSet,
    x_test,
    level: Union[Level, float],
    rng: Optional[np.random.Generator] = None,
    draw: Optional["WeightDraw"] = None,
    bound: Optional["BoundScore"] = None,
) -> Calibration:
    """Bind the score on calib, draw the weights, and compute the threshold."""
    x_test = as_covariate(x_test, calib.d)
    bound = bound if bound is not None else spec.score.bind(calib)
    draw = draw if draw is not None else spec.weight.draw(calib.x, x_test, rng)
    sample = WeightedScoreSample(bound.calibration_scores, draw.weights, draw.infinite_weight)
    return Calibration(bound, draw, weighted_quantile(sample, level))


def build_prediction_region(
    spec: "PredictorSpec",
    calib: CalibrationSet,
    x_test,
    level: Union[Level, float],
    y_domain: Optional[Tuple[float, float]] = None,
    resolution: int = DEFAULT_RESOLUTION,
    rng: Optional[np.random.Generator] = None,
    draw: Optional["WeightDraw"] = None,
    analytic: bool = True,
    bound: Optional["BoundScore"] = None,
) -> PredictionRegion:
    """
    {y : s(x_test, y; Z^y) <= q(Z^y; alpha)}.

    Fast mode inverts the score in closed form when its kind allows it and
    otherwise scans a grid over y_domain. Exact mode rescores the augmented
    data at every grid point.

    Args:
        spec: Predictor from make_predictor.
        calib: Calibration pairs.
        x_test: Test covariate vector.
        level: Miscoverage level.
        y_domain: Grid range; defaults to the calibration range padded by 4 IQR.
        resolution: Grid size, >= 8.
        rng: Stream for randomized weights.
        draw: Pre-drawn weights; overrides rng.
        analytic: Set False to force grid evaluation.
        bound: Pre-bound score for calib, reused across test points.

    Returns:
        The prediction region.
    """
    from .methods import CalibrationMode

    if resolution < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    level = _level(level)
    x_test = as_covariate(x_test, calib.d)
    draw = draw if draw is not None else spec.weight.draw(calib.x, x_test, rng)

    if spec.calibration_mode is CalibrationMode.EXACT:
        grid = region_grid(calib, y_domain, resolution)
        scorer = spec.score.exact_scorer(calib, x_test)
        accepted = np.empty(grid.size, dtype=bool)
        for k, y in enumerate(grid):
            cal_scores, test_score = scorer(float(y))
            q = weighted_quantile(WeightedScoreSample(cal_scores, draw.weights, draw.infinite_weight), level)
            accepted[k] = test_score <= q
        return PredictionRegion.from_mask(grid, accepted)

    result = calibrate(spec, calib, x_test, level, draw=draw, bound=bound)
    if analytic:
        region = result.bound.invert(x_test, result.threshold)
        if region is not None:
            return region
    grid = region_grid(calib, y_domain, resolution)
    return PredictionRegion.from_mask(grid, result.bound.test_scores(x_test, grid) <= result.threshold)


def conformal_p_value(
    spec: "PredictorSpec",
    calib: CalibrationSet,
    x_test,
    y_test: float,
    rng: Optional[np.random.Generator] = None,
    draw: Optional["WeightDraw"] = None,
    inclusive: bool = False,
    bound: Optional["BoundScore"] = None,
) -> float:
    """
    Weighted conformal p-value of (x_test, y_test).

    Strict form: sum_i w_i 1{s_test < s_i} / (sum_i w_i + w_test).
    Inclusive form: (sum_i w_i 1{s_i >= s_test} + w_test) / (sum_i w_i + w_test).
    """
    from .methods import CalibrationMode

    x_test = as_covariate(x_test, calib.d)
    draw = draw if draw is not None else spec.weight.draw(calib.x, x_test, rng)
    if spec.calibration_mode is CalibrationMode.EXACT:
        cal_scores, test_score = spec.score.exact_scorer(calib, x_test)(float(y_test))
    else:
        bound = bound if bound is not None else spec.score.bind(calib)
        cal_scores = bound.calibration_scores
        test_score = float(bound.test_scores(x_test, [y_test])[0])
    weights = np.asarray(draw.weights, dtype=float)
    total = weights.sum() + draw.infinite_weight
    if total <= 0:
        raise DomainError("total mass must be positive")
    if inclusive:
        return float((weights[cal_scores >= test_score].sum() + draw.infinite_weight) / total)
    return float(weights[test_score < cal_scores].sum() / total)
