"""
Conformal method catalogue.

A PredictorSpec pairs a score construction (ScoreSpec) with a weight
construction (WeightSpec). `make_predictor` builds the spec for every named
method; calib_core turns a spec plus calibration data into regions and p-values.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Optional, Tuple

import numpy as np
from scipy.special import ndtri

from .calib_core import weighted_quantile
from .common import (CalibrationSet, Level, PredictionRegion,
                     WeightedScoreSample, as_covariate)
from .errors import ConfigurationError, UnsupportedError
from .estimators import (BasisSpec, ConditionalCdf,
                         MeanModel, NamedFeature, SolverConfig,
                         default_cc_penalty, fit_batchgcp, fit_pinball_qr,
                         linear_basis)
from .kernels import KernelSpec, kernel_matrix, sample_auxiliary_covariate

if TYPE_CHECKING:
    from .simulate import DgpSpec

logger = logging.getLogger(__name__)


class ScoreKind(Enum):
    RESIDUAL = "residual"
    CQR_TWO_SIDED = "cqr_two_sided"
    CQR_ONE_SIDED = "cqr_one_sided"
    DCP = "dcp"
    GLCP_IDENTITY = "glcp_identity"
    LCP_RANK = "lcp_rank"
    CC_CENTERED = "cc_centered"
    BATCHGCP = "batchgcp"
    CUSTOM = "custom"


class WeightKind(Enum):
    UNIFORM = "uniform"
    DENSITY_RATIO = "density_ratio"
    RANDOMIZED_LOCAL = "randomized_local"
    SHIFT_LOCAL = "shift_local"
    LOCAL = "local"  # BaseLCP diagnostic; not marginally valid


class CalibrationMode(Enum):
    FAST = "fast"
    EXACT = "exact"


class Method(Enum):
    """Stable method names."""

    SCP = "scp"
    WCP = "wcp"
    CQR = "cqr"
    CQR_SHIFT = "cqr_shift"
    DCP = "dcp"
    GLCP = "glcp"
    GLCP_SHIFT = "glcp_shift"
    LCP = "lcp"
    LCP_SHIFT = "lcp_shift"
    RLCP = "rlcp"
    GRLCP = "grlcp"
    CC = "cc"
    CC_SHIFT = "cc_shift"
    BATCHGCP = "batchgcp"


SHIFT_METHODS = frozenset(
    {Method.WCP, Method.CQR_SHIFT, Method.GLCP_SHIFT, Method.LCP_SHIFT, Method.GRLCP, Method.CC_SHIFT}
)
KERNEL_METHODS = frozenset({Method.LCP, Method.LCP_SHIFT, Method.RLCP, Method.GRLCP})

_REQUIRED = {
    ScoreKind.RESIDUAL: ("mean_model",),
    ScoreKind.CQR_TWO_SIDED: ("lower_quantile", "upper_quantile"),
    ScoreKind.CQR_ONE_SIDED: ("quantile_model",),
    ScoreKind.DCP: ("cdf",),
    ScoreKind.GLCP_IDENTITY: ("cdf", "mean_model"),
    ScoreKind.LCP_RANK: ("kernel", "mean_model"),
    ScoreKind.CC_CENTERED: ("mean_model", "level"),
    ScoreKind.BATCHGCP: ("mean_model", "level", "groups"),
    ScoreKind.CUSTOM: ("custom",),
}


def _rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def localized_rank(kernel: KernelSpec, x, v, ref_x, ref_v) -> np.ndarray:
    """
    (sum_j K(x, X_j) 1{v_j <= v} + K(x, x)) / (sum_j K(x, X_j) + K(x, x)) per row of x,
    with (X_j, v_j) the reference covariates and base scores.
    """
    to_ref = kernel_matrix(kernel, x, ref_x)
    v = np.ravel(np.asarray(v, dtype=float))
    below = (to_ref * (np.asarray(ref_v)[None, :] <= v[:, None])).sum(axis=1)
    # K(x, x) = K0(0) = 1 for both profiles
    return (below + 1.0) / (to_ref.sum(axis=1) + 1.0)


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreSpec:
    """
    Score construction plus the fitted components its kind needs.

    The base score is v(x, y) = |y - mu(x)| when a mean model is attached and
    v(x, y) = y otherwise. Quantile models are any object with predict(matrix).
    An lcp_rank score with a reference sample ranks v against that sample
    instead of the calibration set, which makes it a pre-trained score.
    """

    kind: ScoreKind
    mean_model: Optional[MeanModel] = None
    quantile_model: Any = None
    lower_quantile: Any = None
    upper_quantile: Any = None
    cdf: Optional[ConditionalCdf] = None
    kernel: Optional[KernelSpec] = None
    basis: Optional[BasisSpec] = None
    lam: Optional[float] = None
    groups: Tuple[NamedFeature, ...] = ()
    level: Optional[Level] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    custom: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    reference: Optional[CalibrationSet] = None

    def __post_init__(self):
        kind = ScoreKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.level is not None and not isinstance(self.level, Level):
            object.__setattr__(self, "level", Level(self.level))
        missing = [name for name in _REQUIRED[kind] if getattr(self, name) is None]
        if kind is ScoreKind.BATCHGCP and not self.groups:
            missing.append("groups")
        if missing:
            raise ConfigurationError(f"{kind.value} score needs {', '.join(missing)}")

    @property
    def supports_exact(self) -> bool:
        if self.kind is ScoreKind.LCP_RANK:
            return self.reference is None
        return self.kind is ScoreKind.CC_CENTERED

    def base(self, x, y) -> np.ndarray:
        """v(x, y), vectorized over matching rows of x and entries of y."""
        y = np.asarray(y, dtype=float)
        if self.mean_model is None:
            return y
        return np.abs(y - self.mean_model.predict(_rows(x)))

    def pretrained(self, x, y) -> np.ndarray:
        """Score values for kinds that do not depend on the calibration data."""
        x = _rows(x)
        y = np.ravel(np.asarray(y, dtype=float))
        kind = self.kind
        if kind is ScoreKind.RESIDUAL:
            return self.base(x, y)
        if kind is ScoreKind.CQR_TWO_SIDED:
            return np.maximum(y - self.upper_quantile.predict(x), self.lower_quantile.predict(x) - y)
        if kind is ScoreKind.CQR_ONE_SIDED:
            return self.base(x, y) - self.quantile_model.predict(x)
        if kind is ScoreKind.DCP:
            return np.array([abs(self.cdf.evaluate(yi, xi) - 0.5) for xi, yi in zip(x, y)])
        if kind is ScoreKind.GLCP_IDENTITY:
            v = self.base(x, y)
            return np.array([self.cdf.evaluate(vi, xi) for xi, vi in zip(x, v)])
        if kind is ScoreKind.CUSTOM:
            return np.ravel(np.asarray(self.custom(x, y), dtype=float))
        if kind is ScoreKind.LCP_RANK and self.reference is not None:
            ref = self.reference
            return localized_rank(self.kernel, x, self.base(x, y), ref.x, self.base(ref.x, ref.y))
        raise UnsupportedError(f"{kind.value} scores depend on the calibration data")

    def bind(self, calib: CalibrationSet) -> "BoundScore":
        """Fit any calibration-dependent part on calib (fast mode)."""
        kind = self.kind
        if kind is ScoreKind.LCP_RANK and self.reference is not None:
            ref = self.reference
            return BoundScore(self, calib, self.pretrained(calib.x, calib.y), base_values=self.base(ref.x, ref.y))
        if kind is ScoreKind.LCP_RANK:
            v = self.base(calib.x, calib.y)
            gram = kernel_matrix(self.kernel, calib.x, calib.x)
            below = v[None, :] <= v[:, None]
            scores = (gram * below).sum(axis=1) / gram.sum(axis=1)
            return BoundScore(self, calib, scores, base_values=v)
        if kind is ScoreKind.CC_CENTERED:
            center = self._fit_cc(calib.x, self.base(calib.x, calib.y))
            return BoundScore(self, calib, self.base(calib.x, calib.y) - center.predict(calib.x), center=center)
        if kind is ScoreKind.BATCHGCP:
            v = self.base(calib.x, calib.y)
            adjustment = fit_batchgcp(calib.x, v, self.groups, self.level, self.solver)
            return BoundScore(self, calib, v - adjustment.predict(calib.x), center=adjustment)
        return BoundScore(self, calib, self.pretrained(calib.x, calib.y))

    def _fit_cc(self, x, v):
        basis = self.basis or linear_basis(x.shape[1])
        lam = self.lam if self.lam is not None else default_cc_penalty(basis.d0, v.size)
        return fit_pinball_qr(x, v, basis, self.level, lam=lam, config=self.solver)

    def exact_scorer(self, calib: CalibrationSet, x_test) -> Callable[[float], Tuple[np.ndarray, float]]:
        """
        Map a trial response y to (calibration scores, test score) computed on
        the augmented data set Z^y.
        """
        x_test = as_covariate(x_test, calib.d)
        if self.kind is ScoreKind.LCP_RANK and self.reference is None:
            v = self.base(calib.x, calib.y)
            gram = kernel_matrix(self.kernel, calib.x, calib.x)
            to_test = kernel_matrix(self.kernel, calib.x, x_test)[:, 0]
            self_weight = kernel_matrix(self.kernel, x_test, x_test)[0, 0]
            below = (gram * (v[None, :] <= v[:, None])).sum(axis=1)
            mass = gram.sum(axis=1) + to_test
            test_mass = to_test.sum() + self_weight

            def lcp_scores(y: float) -> Tuple[np.ndarray, float]:
                v_test = float(self.base(x_test, [y])[0])
                cal = (below + to_test * (v_test <= v)) / mass
                test = (to_test[v <= v_test].sum() + self_weight) / test_mass
                return cal, float(test)

            return lcp_scores
        if self.kind is ScoreKind.CC_CENTERED:
            v = self.base(calib.x, calib.y)
            x_aug = np.vstack([calib.x, x_test])

            def cc_scores(y: float) -> Tuple[np.ndarray, float]:
                v_test = float(self.base(x_test, [y])[0])
                center = self._fit_cc(x_aug, np.append(v, v_test))
                fitted = center.predict(x_aug)
                return v - fitted[:-1], float(v_test - fitted[-1])

            return cc_scores
        bound = self.bind(calib)
        return lambda y: (bound.calibration_scores, float(bound.test_scores(x_test, [y])[0]))


@dataclass(frozen=True)
class BoundScore:
    """A ScoreSpec after fitting on one calibration set."""

    spec: ScoreSpec
    calib: CalibrationSet
    calibration_scores: np.ndarray
    center: Any = None
    base_values: Optional[np.ndarray] = None

    def test_scores(self, x_test, ys) -> np.ndarray:
        """Scores of (x_test, y) for every y in ys."""
        spec = self.spec
        x_test = as_covariate(x_test, self.calib.d)
        ys = np.ravel(np.asarray(ys, dtype=float))
        tiled = np.tile(x_test, (ys.size, 1))
        if spec.kind is ScoreKind.LCP_RANK:
            ref_x, ref_v = self._neighbours()
            to_ref = kernel_matrix(spec.kernel, x_test, ref_x)[0]
            self_weight = kernel_matrix(spec.kernel, x_test, x_test)[0, 0]
            v_test = spec.base(tiled, ys)
            below = (to_ref[None, :] * (ref_v[None, :] <= v_test[:, None])).sum(axis=1)
            return (below + self_weight) / (to_ref.sum() + self_weight)
        if spec.kind in (ScoreKind.CC_CENTERED, ScoreKind.BATCHGCP):
            return spec.base(tiled, ys) - float(self.center.predict(x_test.reshape(1, -1))[0])
        if spec.kind is ScoreKind.DCP:
            return np.abs(spec.cdf.evaluate(ys, x_test) - 0.5)
        if spec.kind is ScoreKind.GLCP_IDENTITY:
            return spec.cdf.evaluate(spec.base(tiled, ys), x_test)
        return spec.pretrained(tiled, ys)

    def invert(self, x_test, threshold: float) -> Optional[PredictionRegion]:
        """
        Closed-form {y : s(x_test, y) <= threshold}, or None when no closed form exists.

        Step-function scores (glcp, lcp, dcp) accept v below a jump but not at it;
        those ends are open and stored one ulp inward.
        """
        spec = self.spec
        kind = spec.kind
        x_test = as_covariate(x_test, self.calib.d)
        row = x_test.reshape(1, -1)
        if np.isinf(threshold):
            return PredictionRegion.whole_line()
        if kind is ScoreKind.RESIDUAL:
            return self._invert_base(row, threshold)
        if kind is ScoreKind.CQR_TWO_SIDED:
            lower = float(spec.lower_quantile.predict(row)[0]) - threshold
            upper = float(spec.upper_quantile.predict(row)[0]) + threshold
            return PredictionRegion.interval(lower, upper)
        if kind is ScoreKind.CQR_ONE_SIDED:
            return self._invert_base(row, float(spec.quantile_model.predict(row)[0]) + threshold)
        if kind in (ScoreKind.CC_CENTERED, ScoreKind.BATCHGCP):
            return self._invert_base(row, float(self.center.predict(row)[0]) + threshold)
        if kind is ScoreKind.DCP:
            return _invert_cdf_band(spec.cdf, x_test, threshold)
        if kind is ScoreKind.GLCP_IDENTITY:
            values, cum = spec.cdf.step(x_test)
            if threshold < 0:
                return PredictionRegion.empty()
            above = np.flatnonzero(cum > threshold)
            if not above.size:
                return PredictionRegion.whole_line()
            return self._invert_base(row, values[above[0]], open_end=True)
        if kind is ScoreKind.LCP_RANK:
            return self._invert_lcp(x_test, threshold)
        return None

    def _neighbours(self) -> Tuple[np.ndarray, np.ndarray]:
        """Covariates and base scores the localized rank is taken against."""
        ref = self.spec.reference
        return (ref.x if ref is not None else self.calib.x), self.base_values

    def _invert_base(self, row: np.ndarray, bound: float, open_end: bool = False) -> PredictionRegion:
        """{y : v(x, y) <= bound}, or {y : v(x, y) < bound} when open_end."""
        if np.isinf(bound):
            return PredictionRegion.whole_line()
        if self.spec.mean_model is None:
            upper = np.nextafter(bound, -np.inf) if open_end else bound
            return PredictionRegion(((-np.inf, upper),))
        if open_end and bound <= 0:
            return PredictionRegion.empty()
        center = float(self.spec.mean_model.predict(row)[0])
        lower, upper = center - bound, center + bound
        if open_end:
            lower, upper = np.nextafter(lower, np.inf), np.nextafter(upper, -np.inf)
        return PredictionRegion.interval(lower, upper)

    def _invert_lcp(self, x_test: np.ndarray, threshold: float) -> PredictionRegion:
        spec = self.spec
        ref_x, ref_v = self._neighbours()
        to_ref = kernel_matrix(spec.kernel, x_test, ref_x)[0]
        self_weight = kernel_matrix(spec.kernel, x_test, x_test)[0, 0]
        total = to_ref.sum() + self_weight
        order = np.argsort(ref_v, kind="stable")
        values = ref_v[order]
        # test score on [values[k-1], values[k]) for k = 0..n
        levels = (np.concatenate(([0.0], np.cumsum(to_ref[order]))) + self_weight) / total
        # ties: the score jumps by the whole tied mass at a repeated value
        last_of_run = np.append(values[1:] != values[:-1], True)
        levels = np.concatenate(([levels[0]], levels[1:][last_of_run]))
        jumps = np.concatenate((values[last_of_run], [np.inf]))
        exceed = np.flatnonzero(levels > threshold)
        if exceed.size and exceed[0] == 0:
            return PredictionRegion.empty()
        if not exceed.size:
            return PredictionRegion.whole_line()
        return self._invert_base(x_test.reshape(1, -1), jumps[exceed[0] - 1], open_end=True)


def _invert_cdf_band(cdf: ConditionalCdf, x_test: np.ndarray, threshold: float) -> PredictionRegion:
    """{y : 1/2 - t <= F(y | x) <= 1/2 + t} for a right-continuous step CDF; open at the upper end."""
    if threshold < 0:
        return PredictionRegion.empty()
    values, cum = cdf.step(x_test)
    low, high = 0.5 - threshold, 0.5 + threshold
    if low <= 0:
        lower = -np.inf
    else:
        reach = np.flatnonzero(cum >= low)
        lower = values[reach[0]]
    above = np.flatnonzero(cum > high)
    upper = np.nextafter(values[above[0]], -np.inf) if above.size else np.inf
    if not lower <= upper:
        return PredictionRegion.empty()
    return PredictionRegion(((lower, upper),))


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightDraw:
    """Calibration weights, the +inf atom weight, and the auxiliary covariate if one was drawn."""

    weights: np.ndarray
    infinite_weight: float
    auxiliary: Optional[np.ndarray] = None


@dataclass(frozen=True)
class WeightSpec:
    kind: WeightKind = WeightKind.UNIFORM
    density_ratio: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kernel: Optional[KernelSpec] = None

    def __post_init__(self):
        kind = WeightKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in (WeightKind.DENSITY_RATIO, WeightKind.SHIFT_LOCAL) and self.density_ratio is None:
            raise ConfigurationError(f"{kind.value} weights need a density ratio")
        if kind in (WeightKind.RANDOMIZED_LOCAL, WeightKind.SHIFT_LOCAL, WeightKind.LOCAL) and self.kernel is None:
            raise ConfigurationError(f"{kind.value} weights need a kernel")

    @property
    def is_random(self) -> bool:
        return self.kind in (WeightKind.RANDOMIZED_LOCAL, WeightKind.SHIFT_LOCAL)

    def draw(self, calib_x, x_test, rng: Optional[np.random.Generator] = None) -> WeightDraw:
        calib_x = _rows(calib_x)
        x_test = as_covariate(x_test, calib_x.shape[1])
        kind = self.kind
        if kind is WeightKind.UNIFORM:
            return WeightDraw(np.ones(calib_x.shape[0]), 1.0)
        if kind is WeightKind.DENSITY_RATIO:
            return WeightDraw(
                np.asarray(self.density_ratio(calib_x), dtype=float),
                float(np.ravel(self.density_ratio(x_test.reshape(1, -1)))[0]),
            )
        if kind is WeightKind.LOCAL:
            return WeightDraw(kernel_matrix(self.kernel, calib_x, x_test)[:, 0], 1.0, x_test.copy())
        if rng is None:
            raise ConfigurationError(f"{kind.value} weights need an rng")
        center = sample_auxiliary_covariate(self.kernel, x_test, rng)
        weights = kernel_matrix(self.kernel, calib_x, center)[:, 0]
        infinite = kernel_matrix(self.kernel, x_test, center)[0, 0]
        if kind is WeightKind.SHIFT_LOCAL:
            weights = weights * np.asarray(self.density_ratio(calib_x), dtype=float)
            infinite = infinite * float(np.ravel(self.density_ratio(x_test.reshape(1, -1)))[0])
        return WeightDraw(weights, float(infinite), center)


@dataclass(frozen=True)
class PredictorSpec:
    score: ScoreSpec
    weight: WeightSpec = field(default_factory=WeightSpec)
    calibration_mode: CalibrationMode = CalibrationMode.FAST
    label: str = ""

    def __post_init__(self):
        mode = CalibrationMode(self.calibration_mode)
        object.__setattr__(self, "calibration_mode", mode)
        if mode is CalibrationMode.EXACT and not self.score.supports_exact:
            raise ConfigurationError(f"{self.score.kind.value} scores have no exact mode")
        if not self.label:
            object.__setattr__(self, "label", self.score.kind.value)


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FittedComponents:
    """
    Everything make_predictor may attach to a score.

    lcp_reference, when set, is the sample lcp ranks base scores against in
    place of the calibration set.
    """

    mean_model: Optional[MeanModel] = None
    quantile_model: Any = None
    lower_quantile: Any = None
    upper_quantile: Any = None
    response_cdf: Optional[ConditionalCdf] = None
    score_cdf: Optional[ConditionalCdf] = None
    groups: Tuple[NamedFeature, ...] = ()
    basis: Optional[BasisSpec] = None
    cc_lambda: Optional[float] = None
    level: Optional[Level] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    pretrained: Optional[ScoreSpec] = None
    lcp_reference: Optional[CalibrationSet] = None


def _pretrained_score(components: FittedComponents) -> ScoreSpec:
    if components.pretrained is not None:
        return components.pretrained
    return ScoreSpec(ScoreKind.RESIDUAL, mean_model=components.mean_model)


def _cqr_score(components: FittedComponents) -> ScoreSpec:
    if components.lower_quantile is not None and components.upper_quantile is not None:
        return ScoreSpec(
            ScoreKind.CQR_TWO_SIDED,
            lower_quantile=components.lower_quantile,
            upper_quantile=components.upper_quantile,
        )
    return ScoreSpec(
        ScoreKind.CQR_ONE_SIDED,
        mean_model=components.mean_model,
        quantile_model=components.quantile_model,
    )


def make_predictor(
    method,
    components: FittedComponents,
    kernel: Optional[KernelSpec] = None,
    density_ratio: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    calibration_mode: CalibrationMode = CalibrationMode.FAST,
    base_lcp: bool = False,
) -> PredictorSpec:
    """
    Build the PredictorSpec for a named method.

    Args:
        method: Method or its stable string name.
        components: Fitted score components.
        kernel: Kernel for lcp, lcp_shift, rlcp and grlcp.
        density_ratio: r_X for the shift methods.
        calibration_mode: FAST, or EXACT for lcp/cc scores.
        base_lcp: rlcp only; centre the weight on x_test (diagnostic, invalid).

    Raises:
        ConfigurationError: unknown method or missing components.
    """
    try:
        method = Method(method)
    except ValueError as exc:
        raise ConfigurationError(f"unknown method {method!r}") from exc
    if method in SHIFT_METHODS and density_ratio is None:
        raise ConfigurationError(f"{method.value} needs a density ratio r_X")
    if method in KERNEL_METHODS and kernel is None:
        raise ConfigurationError(f"{method.value} needs a kernel")

    c = components
    shifted = WeightSpec(WeightKind.DENSITY_RATIO, density_ratio=density_ratio) if density_ratio is not None else None
    uniform = WeightSpec()

    def lcp() -> ScoreSpec:
        return ScoreSpec(ScoreKind.LCP_RANK, mean_model=c.mean_model, kernel=kernel, reference=c.lcp_reference)

    def glcp() -> ScoreSpec:
        return ScoreSpec(ScoreKind.GLCP_IDENTITY, mean_model=c.mean_model, cdf=c.score_cdf)

    def cc() -> ScoreSpec:
        return ScoreSpec(
            ScoreKind.CC_CENTERED,
            mean_model=c.mean_model,
            basis=c.basis,
            lam=c.cc_lambda,
            level=c.level,
            solver=c.solver,
        )

    def rlcp_weight() -> WeightSpec:
        if base_lcp:
            logger.warning("base_lcp weights are centred on the test point and are not marginally valid")
            return WeightSpec(WeightKind.LOCAL, kernel=kernel)
        return WeightSpec(WeightKind.RANDOMIZED_LOCAL, kernel=kernel)

    builders = {
        Method.SCP: lambda: (ScoreSpec(ScoreKind.RESIDUAL, mean_model=c.mean_model), uniform),
        Method.WCP: lambda: (_pretrained_score(c), shifted),
        Method.CQR: lambda: (_cqr_score(c), uniform),
        Method.CQR_SHIFT: lambda: (_cqr_score(c), shifted),
        Method.DCP: lambda: (ScoreSpec(ScoreKind.DCP, cdf=c.response_cdf), uniform),
        Method.GLCP: lambda: (glcp(), uniform),
        Method.GLCP_SHIFT: lambda: (glcp(), shifted),
        Method.LCP: lambda: (lcp(), uniform),
        Method.LCP_SHIFT: lambda: (lcp(), shifted),
        Method.RLCP: lambda: (_pretrained_score(c), rlcp_weight()),
        Method.GRLCP: lambda: (
            _pretrained_score(c),
            WeightSpec(WeightKind.SHIFT_LOCAL, density_ratio=density_ratio, kernel=kernel),
        ),
        Method.CC: lambda: (cc(), uniform),
        Method.CC_SHIFT: lambda: (cc(), shifted),
        Method.BATCHGCP: lambda: (
            ScoreSpec(
                ScoreKind.BATCHGCP,
                mean_model=c.mean_model,
                groups=c.groups,
                level=c.level,
                solver=c.solver,
            ),
            uniform,
        ),
    }
    score, weight = builders[method]()
    mode = CalibrationMode(calibration_mode)
    if mode is CalibrationMode.EXACT and not score.supports_exact:
        logger.info("%s has a data-free score; using fast calibration", method.value)
        mode = CalibrationMode.FAST
    return PredictorSpec(score, weight, mode, method.value)


# ---------------------------------------------------------------------------
# Oracle diagnostic
# ---------------------------------------------------------------------------

# oracle score law does not depend on x for these kinds
_PIVOTAL = frozenset({ScoreKind.CQR_ONE_SIDED, ScoreKind.CQR_TWO_SIDED, ScoreKind.DCP})


def oracle_conditional_quantile_gap(
    spec: PredictorSpec,
    dgp: "DgpSpec",
    t,
    level,
    n_mc: int = 200_000,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    |Q(1-alpha; s* | X = t) - Q(1-alpha; weight-tilted marginal of s*)|.

    s* is the oracle version of the score under the known DGP. Residual scores
    use the closed-form conditional quantile sd(t) * z_{1-alpha/2} and a Monte
    Carlo weighted quantile over calibration-law covariates.
    """
    level = level if isinstance(level, Level) else Level(level)
    kind = spec.score.kind
    if kind in _PIVOTAL:
        return 0.0
    if kind is not ScoreKind.RESIDUAL:
        raise UnsupportedError(f"no closed-form oracle score for {kind.value}")
    rng = rng if rng is not None else np.random.default_rng(0)
    t = as_covariate(t, dgp.d)
    z = ndtri(1.0 - level.alpha / 2.0)
    conditional = float(dgp.noise_sd(t.reshape(1, -1))[0]) * z
    x = dgp.sample_covariates(n_mc, rng)
    oracle_scores = dgp.noise_sd(x) * np.abs(rng.standard_normal(n_mc))
    draw = spec.weight.draw(x, t, rng)
    marginal = weighted_quantile(WeightedScoreSample(oracle_scores, draw.weights, 0.0), level)
    return float(abs(conditional - marginal))
