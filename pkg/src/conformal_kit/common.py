"""
Value types shared across conformal_kit modules.

Level, WeightedScoreSample, PredictionRegion and CalibrationSet are immutable
once built; arrays are copied and frozen in __post_init__.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Level:
    """Miscoverage level alpha; the target coverage is 1 - alpha."""

    alpha: float

    def __post_init__(self):
        if not 0.0 < float(self.alpha) < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def coverage(self) -> float:
        return 1.0 - self.alpha


@dataclass(frozen=True)
class WeightedScoreSample:
    """
    Calibration scores with nonnegative weights plus a point mass at +inf.

    Attributes:
        scores: Finite calibration scores.
        weights: Nonnegative weights, one per score.
        infinite_weight: Mass placed at +inf (the test point's weight).
    """

    scores: np.ndarray
    weights: np.ndarray
    infinite_weight: float = 0.0

    def __post_init__(self):
        scores = _frozen(np.ravel(self.scores))
        weights = _frozen(np.ravel(self.weights))
        if scores.shape != weights.shape:
            raise DomainError(
                f"scores and weights differ in length ({scores.size} vs {weights.size})"
            )
        if not np.all(np.isfinite(scores)):
            raise DomainError("scores must be finite")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise DomainError("weights must be finite and nonnegative")
        infinite_weight = float(self.infinite_weight)
        if infinite_weight < 0 or not np.isfinite(infinite_weight):
            raise DomainError("infinite_weight must be finite and nonnegative")
        if weights.sum() + infinite_weight <= 0:
            raise DomainError("total mass must be positive")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "infinite_weight", infinite_weight)

    @classmethod
    def uniform(cls, scores: Sequence[float]) -> "WeightedScoreSample":
        """Unit weight on every score and on the +inf atom."""
        scores = np.ravel(np.asarray(scores, dtype=float))
        return cls(scores, np.ones_like(scores), 1.0)


class RegionKind(Enum):
    """How a prediction region was obtained."""

    ANALYTIC = "analytic"
    GRID = "grid"


@dataclass(frozen=True)
class PredictionRegion:
    """
    Sorted union of disjoint closed intervals; an empty tuple is the empty set.

    An acceptance set with an open end, such as {v < r} at a score jump, is stored
    as the largest closed float interval inside it: that end moves one ulp inward.
    """

    intervals: Tuple[Tuple[float, float], ...] = ()
    representation: RegionKind = RegionKind.ANALYTIC
    grid_resolution: Optional[int] = None

    def __post_init__(self):
        intervals = tuple((float(a), float(b)) for a, b in self.intervals)
        for a, b in intervals:
            if np.isnan(a) or np.isnan(b) or a > b:
                raise DomainError(f"malformed interval [{a}, {b}]")
        for (_, b0), (a1, _) in zip(intervals, intervals[1:]):
            if not b0 < a1:
                raise DomainError("intervals must be sorted and pairwise disjoint")
        if self.representation is RegionKind.GRID:
            if self.grid_resolution is None or self.grid_resolution < 1:
                raise DomainError("grid regions need a positive grid_resolution")
        object.__setattr__(self, "intervals", intervals)

    @classmethod
    def empty(cls) -> "PredictionRegion":
        return cls(())

    @classmethod
    def whole_line(cls) -> "PredictionRegion":
        return cls(((-np.inf, np.inf),))

    @classmethod
    def interval(cls, lower: float, upper: float) -> "PredictionRegion":
        """Single interval, or the empty region when lower > upper."""
        if lower > upper:
            return cls.empty()
        return cls(((lower, upper),))

    @classmethod
    def from_mask(cls, grid: np.ndarray, mask: np.ndarray) -> "PredictionRegion":
        """Merge runs of accepted grid points into closed intervals."""
        grid = np.asarray(grid, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        if grid.shape != mask.shape:
            raise DomainError("grid and mask differ in shape")
        padded = np.concatenate(([False], mask, [False])).astype(np.int8)
        edges = np.diff(padded)
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1) - 1
        intervals = tuple((grid[a], grid[b]) for a, b in zip(starts, stops))
        return cls(intervals, RegionKind.GRID, int(grid.size))

    @property
    def is_empty(self) -> bool:
        return len(self.intervals) == 0

    @property
    def length(self) -> float:
        """Total Lebesgue measure; +inf for unbounded regions."""
        return float(sum(b - a for a, b in self.intervals))

    def contains(self, y):
        """Membership test, vectorized over y."""
        y = np.asarray(y, dtype=float)
        inside = np.zeros(y.shape, dtype=bool)
        for a, b in self.intervals:
            inside |= (y >= a) & (y <= b)
        return bool(inside) if inside.ndim == 0 else inside

    def to_dict(self) -> Dict[str, Any]:
        return {
            "intervals": [[a, b] for a, b in self.intervals],
            "representation": self.representation.value,
            "grid_resolution": self.grid_resolution,
        }


@dataclass(frozen=True)
class CalibrationSet:
    """Immutable (x, y) calibration pairs; x is stored as an (n, d) matrix."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.ravel(np.asarray(self.y, dtype=float))
        if x.ndim != 2:
            raise DomainError("calibration covariates must be a matrix")
        if x.shape[0] != y.shape[0]:
            raise DomainError(
                f"covariate rows ({x.shape[0]}) and responses ({y.shape[0]}) differ"
            )
        if y.size == 0:
            raise DomainError("calibration set is empty")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def augmented(self, x_new: np.ndarray, y_new: float) -> "CalibrationSet":
        """Calibration set with one extra pair appended."""
        x_new = as_covariate(x_new, self.d)
        return CalibrationSet(np.vstack([self.x, x_new]), np.append(self.y, y_new))

    def permuted(self, order: Sequence[int]) -> "CalibrationSet":
        order = np.asarray(order, dtype=int)
        return CalibrationSet(self.x[order], self.y[order])


def as_covariate(x, d: Optional[int] = None) -> np.ndarray:
    """Return x as a 1-d float vector, checking its dimension against d."""
    vec = np.ravel(np.asarray(x, dtype=float))
    if d is not None and vec.size != d:
        raise DomainError(f"covariate has dimension {vec.size}, expected {d}")
    return vec


def default_y_domain(y: np.ndarray) -> Tuple[float, float]:
    """[min y - 4 IQR, max y + 4 IQR], padded by one unit when the IQR is zero."""
    y = np.asarray(y, dtype=float)
    q25, q75 = np.percentile(y, [25, 75])
    spread = 4.0 * (q75 - q25)
    if spread <= 0:
        spread = 1.0
    return float(y.min() - spread), float(y.max() + spread)
