"""
Synthetic data and the Monte-Carlo experiment drivers.

Regression DGPs share X ~ N(0, I_d) and mu(x) = 2 sum(x) / d with normal noise:

    dgp 1: sd(x) = sum | |x_i| - sqrt(2/pi) | / sqrt(d)
           (aggregate form: | sum (|x_i| - sqrt(2/pi)) | / sqrt(d))
    dgp 2: sd(x) = sum exp(|x_i|) / sqrt(d)
    dgp 3: sd(x) = sqrt(sum |x_i| / d)

Test covariates may follow N(0, sigma^2 I_d). Because Y | X is known,
conditional coverage of any interval region is computed in closed form.

Repetition j draws from child j + 1 of SeedSequence(seed); child 0 draws the
test covariates, which stay fixed across repetitions.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import ndtr

from .calib_core import DEFAULT_RESOLUTION, build_prediction_region, conformal_p_value
from .common import CalibrationSet, Level, PredictionRegion, as_covariate
from .errors import (ConfigurationError, ConformalKitError, DomainError,
                     ExperimentError, UnsupportedError)
from .estimators import (ConditionalCdf, MeanModel, SolverConfig,
                         feature_basis, fit_mean_model, fit_pinball_qr,
                         intercept_basis, linear_basis, sign_groups)
from .graph import (CommunityAssignment, CommunitySource, GraphData,
                    detect_communities, graphcp_region, load_communities,
                    load_graph, misclustering_rate, planted_assignment)
from .hier import BranchScoreKind, HierConfig, HierData, hierarchical_region
from .kernels import KernelFamily, KernelSpec, bandwidth_for_target_neff
from .methods import (KERNEL_METHODS, CalibrationMode,
                      FittedComponents, Method, PredictorSpec, ScoreKind,
                      ScoreSpec, WeightDraw, make_predictor,
                      oracle_conditional_quantile_gap)
from .selection import CandidatePool, ModelSelector, SelectionConfig, SelectionRule

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["method", "rep", "marginal", "cond_miscov", "mean_length"]
CQR_RIDGE = 0.01
DGP1_NOISE_FORMS = ("per_coordinate", "aggregate")
LCP_REFERENCES = ("calibration", "training")


# ---------------------------------------------------------------------------
# Regression DGPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpSpec:
    """
    One of the three heteroscedastic regression models plus sample sizes.

    dgp1_noise picks the dgp 1 noise sd: "per_coordinate" sums the absolute
    deviations, "aggregate" takes the absolute value of their sum, which vanishes
    on the whole hypersurface sum |x_i| = d sqrt(2/pi).
    """

    dgp: int = 1
    d: int = 10
    sigma_x: float = 1.0
    n: int = 500
    n_tr: int = 1000
    n_te: int = 500
    seed: int = 0
    dgp1_noise: str = "per_coordinate"

    def __post_init__(self):
        if self.dgp not in (1, 2, 3):
            raise ConfigurationError(f"dgp must be 1, 2 or 3, got {self.dgp}")
        if self.d < 1:
            raise ConfigurationError("d must be at least 1")
        if min(self.n, self.n_tr, self.n_te) < 1:
            raise ConfigurationError("sample sizes must be at least 1")
        if not self.sigma_x > 0:
            raise ConfigurationError("sigma_x must be positive")
        if self.dgp1_noise not in DGP1_NOISE_FORMS:
            raise ConfigurationError(f"dgp1_noise must be one of {DGP1_NOISE_FORMS}, got {self.dgp1_noise!r}")

    def mean(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 2.0 * x.sum(axis=1) / self.d

    def noise_sd(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ax = np.abs(x)
        if self.dgp == 1:
            centred = ax - np.sqrt(2.0 / np.pi)
            if self.dgp1_noise == "aggregate":
                return np.abs(centred.sum(axis=1)) / np.sqrt(self.d)
            return np.abs(centred).sum(axis=1) / np.sqrt(self.d)
        if self.dgp == 2:
            return np.exp(ax).sum(axis=1) / np.sqrt(self.d)
        return np.sqrt(ax.sum(axis=1) / self.d)

    def sample_covariates(self, n: int, rng: np.random.Generator, test: bool = False) -> np.ndarray:
        scale = self.sigma_x if test else 1.0
        return scale * rng.standard_normal((n, self.d))

    def sample_response(self, x, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.mean(x) + self.noise_sd(x) * rng.standard_normal(x.shape[0])


@dataclass(frozen=True)
class GaussianDensityRatio:
    """r(x) = sigma^-d exp(||x||^2 (1 - sigma^-2) / 2), the N(0, sigma^2 I) / N(0, I) density ratio."""

    sigma: float
    d: int

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sq = np.sum(x * x, axis=1)
        return np.exp(-self.d * np.log(self.sigma) + 0.5 * sq * (1.0 - self.sigma**-2))


def density_ratio(spec: DgpSpec) -> GaussianDensityRatio:
    return GaussianDensityRatio(float(spec.sigma_x), int(spec.d))


@dataclass(frozen=True)
class DgpDraw:
    train: CalibrationSet
    calibration: CalibrationSet
    test_x: np.ndarray

    def split_train(self) -> Tuple[CalibrationSet, CalibrationSet]:
        """Two halves of the training set: mean model first, score estimators second."""
        half = self.train.n // 2
        x, y = self.train.x, self.train.y
        return CalibrationSet(x[:half], y[:half]), CalibrationSet(x[half:], y[half:])


def generate_dgp(spec: DgpSpec, rng: np.random.Generator, test_x: Optional[np.ndarray] = None) -> DgpDraw:
    """Training and calibration sets from N(0, I_d); test covariates reused when given."""
    x_tr = spec.sample_covariates(spec.n_tr, rng)
    y_tr = spec.sample_response(x_tr, rng)
    x_cal = spec.sample_covariates(spec.n, rng)
    y_cal = spec.sample_response(x_cal, rng)
    if test_x is None:
        test_x = spec.sample_covariates(spec.n_te, rng, test=True)
    return DgpDraw(CalibrationSet(x_tr, y_tr), CalibrationSet(x_cal, y_cal), np.asarray(test_x, dtype=float))


def linear_mean_model(d: int) -> MeanModel:
    """The true regression function 2 sum(x) / d as a MeanModel."""
    return MeanModel(linear_basis(d), np.concatenate(([0.0], np.full(d, 2.0 / d))))


def normal_interval_coverage(region: PredictionRegion, mean: float, sd: float) -> float:
    """P(Y in region) for Y ~ N(mean, sd^2)."""
    if sd <= 0:
        return float(region.contains(mean))
    total = 0.0
    for a, b in region.intervals:
        total += ndtr((b - mean) / sd) - ndtr((a - mean) / sd)
    return float(min(max(total, 0.0), 1.0))


def analytic_conditional_coverage(region: PredictionRegion, x, spec: DgpSpec) -> float:
    """P(Y in region | X = x) under the DGP."""
    x = as_covariate(x, spec.d).reshape(1, -1)
    return normal_interval_coverage(region, float(spec.mean(x)[0]), float(spec.noise_sd(x)[0]))


def rate_bandwidth(n: int, d: int, scale: float = 1.0) -> float:
    """h = scale * n^(-1 / (d + 2))."""
    return float(scale * n ** (-1.0 / (d + 2)))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _summary_row(method: str, coverage: np.ndarray, lengths: np.ndarray, alpha: float) -> Dict[str, Any]:
    coverage = np.atleast_2d(coverage)
    return {
        "method": method,
        "rep": "all",
        "marginal": float(coverage.mean()),
        "cond_miscov": float(np.mean(np.abs(coverage.mean(axis=0) - (1.0 - alpha)))),
        "mean_length": float(np.mean(lengths)) if np.size(lengths) else float("nan"),
    }


@dataclass
class MetricsTable:
    """
    Per-repetition metric rows plus the coverage matrices they came from.

    coverage[method] has shape (R, units): conditional coverage of repetition j
    at evaluation unit i (test point, community, ...). The summary averages over
    repetitions first, so cond_miscov = mean_i |mean_j cov_ij - (1 - alpha)|.
    """

    records: pd.DataFrame
    coverage: Dict[str, np.ndarray]
    lengths: Dict[str, np.ndarray]
    level: Level
    auxiliary: pd.DataFrame = field(default_factory=pd.DataFrame)
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(self.records["method"]))

    def summary(self) -> pd.DataFrame:
        rows = []
        for method in self.methods:
            if method in self.coverage:
                rows.append(_summary_row(method, self.coverage[method], self.lengths[method], self.level.alpha))
            else:
                subset = self.records[self.records["method"] == method]
                row = {"method": method, "rep": "all"}
                row.update(subset.drop(columns=["method", "rep"]).mean(numeric_only=True).to_dict())
                rows.append(row)
        frame = pd.DataFrame(rows)
        for column in self.records.columns:
            if column in METRIC_COLUMNS or column in frame.columns:
                continue
            if pd.api.types.is_numeric_dtype(self.records[column]):
                means = self.records.groupby("method", sort=False)[column].mean()
                frame[column] = frame["method"].map(means)
        return frame

    def method_summary(self, method: str) -> Dict[str, Any]:
        summary = self.summary()
        matched = summary[summary["method"] == method]
        if matched.empty:
            raise KeyError(method)
        return matched.iloc[0].to_dict()


def _records_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    if frame.empty:
        return pd.DataFrame(columns=METRIC_COLUMNS)
    ordered = METRIC_COLUMNS + [c for c in frame.columns if c not in METRIC_COLUMNS]
    return frame.reindex(columns=ordered)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageConfig:
    """
    Settings for the regression coverage experiments.

    Attributes:
        dgp, d, n, n_te, sigma: DGP choice, dimension, calibration size, number
            of test covariates, and test covariate scale. |Z_tr| = 2n.
        alpha: Miscoverage level.
        methods: Stable method names.
        reps: Monte-Carlo repetitions.
        seed: Master seed.
        neff_target: Target effective sample size for every kernel bandwidth.
        bandwidth: Fixed bandwidth overriding neff_target.
        kernel_family: gaussian or boxcar.
        calibration_mode: fast or exact (lcp and cc only).
        resolution: Grid size for grid-inverted regions.
        cc_lambda: Ridge for cc; None uses the default scale.
        n_jobs: joblib workers for repetitions.
        dgp1_noise: per_coordinate or aggregate dgp 1 noise sd.
        lcp_reference: calibration ranks lcp scores against the calibration
            set; training ranks them against the second training half.
        resample_test: draw fresh test covariates in every repetition, so the
            marginal column estimates marginal coverage over the test law.
    """

    dgp: int = 1
    d: int = 10
    n: int = 500
    n_te: int = 500
    sigma: float = 1.0
    alpha: float = 0.1
    methods: Tuple[str, ...] = ("scp", "cqr")
    reps: int = 50
    seed: int = 0
    neff_target: float = 40.0
    bandwidth: Optional[float] = None
    kernel_family: str = "gaussian"
    calibration_mode: str = "fast"
    resolution: int = DEFAULT_RESOLUTION
    cc_lambda: Optional[float] = None
    n_jobs: int = 1
    dgp1_noise: str = "per_coordinate"
    lcp_reference: str = "calibration"
    resample_test: bool = False

    def __post_init__(self):
        Level(self.alpha)
        methods = tuple(self.methods)
        if not methods:
            raise ConfigurationError("methods must not be empty")
        for method in methods:
            try:
                Method(method)
            except ValueError as exc:
                raise ConfigurationError(f"unknown method {method!r}") from exc
        object.__setattr__(self, "methods", methods)
        if self.reps < 1:
            raise ConfigurationError("reps must be at least 1")
        KernelFamily(self.kernel_family)
        CalibrationMode(self.calibration_mode)
        if self.lcp_reference not in LCP_REFERENCES:
            raise ConfigurationError(f"lcp_reference must be one of {LCP_REFERENCES}, got {self.lcp_reference!r}")
        self.dgp_spec  # validates the DGP fields

    @property
    def level(self) -> Level:
        return Level(self.alpha)

    @property
    def dgp_spec(self) -> DgpSpec:
        return DgpSpec(self.dgp, self.d, self.sigma, self.n, 2 * self.n, self.n_te, self.seed, self.dgp1_noise)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["methods"] = list(self.methods)
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "CoverageConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(payload)
        if isinstance(values.get("methods"), str):
            values["methods"] = tuple(m.strip() for m in values["methods"].split(",") if m.strip())
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigurationError(f"invalid experiment settings: {exc}") from exc


def _streams(seed: int, reps: int) -> Tuple[np.random.Generator, List[np.random.SeedSequence]]:
    children = np.random.SeedSequence(seed).spawn(reps + 1)
    return np.random.default_rng(children[0]), children[1:]


def _parallel(n_jobs: int, tasks) -> list:
    return list(Parallel(n_jobs=n_jobs)(tasks))


def _guarded(fn, rep: int, *args):
    try:
        return fn(rep, *args)
    except ConfigurationError:
        raise
    except ExperimentError:
        raise
    except (ConformalKitError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise ExperimentError(str(exc), rep) from exc


# ---------------------------------------------------------------------------
# Estimator wiring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RepetitionFit:
    """Everything fitted on the training halves of one repetition."""

    components: FittedComponents
    kernel: Optional[KernelSpec]
    ratio: GaussianDensityRatio


def fit_components(draw: DgpDraw, config: CoverageConfig, methods: Sequence[str]) -> RepetitionFit:
    """
    Fit the method ingredients on the training halves.

    The mean model uses the first half. On the second half: the linear pinball
    model of v = |y - mu(x)| at level 1 - alpha with ridge 0.01 (cqr), the kernel
    CDF of v (glcp) and of y (dcp), and the lcp reference sample when
    config.lcp_reference is "training". Every bandwidth matches neff_target on
    the second half's covariates unless config.bandwidth is set.
    """
    methods = [Method(m) for m in methods]
    alpha = config.alpha
    family = KernelFamily(config.kernel_family)
    first, second = draw.split_train()
    mean_model = fit_mean_model(first.x, first.y)
    v2 = np.abs(second.y - mean_model.predict(second.x))

    needs_kernel = any(m in KERNEL_METHODS or m in (Method.DCP, Method.GLCP, Method.GLCP_SHIFT) for m in methods)
    kernel = None
    if needs_kernel:
        if config.bandwidth is not None:
            kernel = KernelSpec(family, config.bandwidth)
        else:
            target = min(config.neff_target, float(second.n))
            kernel = KernelSpec(family, bandwidth_for_target_neff(target, second.x, family))
        logger.debug("kernel bandwidth %.6g", kernel.bandwidth)

    quantile_model = None
    if any(m in (Method.CQR, Method.CQR_SHIFT) for m in methods):
        quantile_model = fit_pinball_qr(second.x, v2, linear_basis(draw.train.d), alpha, lam=CQR_RIDGE)
    score_cdf = ConditionalCdf(kernel, second.x, v2) if kernel is not None and any(
        m in (Method.GLCP, Method.GLCP_SHIFT) for m in methods) else None
    response_cdf = ConditionalCdf(kernel, second.x, second.y) if Method.DCP in methods else None
    lcp_reference = None
    if config.lcp_reference == "training" and any(m in (Method.LCP, Method.LCP_SHIFT) for m in methods):
        lcp_reference = second

    components = FittedComponents(
        mean_model=mean_model,
        quantile_model=quantile_model,
        response_cdf=response_cdf,
        score_cdf=score_cdf,
        groups=sign_groups(draw.train.d),
        basis=linear_basis(draw.train.d),
        cc_lambda=config.cc_lambda,
        level=config.level,
        solver=SolverConfig(),
        lcp_reference=lcp_reference,
    )
    return RepetitionFit(components, kernel, density_ratio(config.dgp_spec))


def build_predictors(fit: RepetitionFit, config: CoverageConfig, methods: Sequence[str]) -> Dict[str, PredictorSpec]:
    mode = CalibrationMode(config.calibration_mode)
    return {
        m: make_predictor(m, fit.components, kernel=fit.kernel, density_ratio=fit.ratio, calibration_mode=mode)
        for m in methods
    }


# ---------------------------------------------------------------------------
# Coverage experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RepetitionRecord:
    rep: int
    coverage: Dict[str, np.ndarray]
    lengths: Dict[str, np.ndarray]
    auxiliary: List[Dict[str, Any]]
    weight_share: Dict[str, np.ndarray] = field(default_factory=dict)


def max_weight_share(draw: WeightDraw) -> float:
    """Largest normalized weight, the +inf atom included; 1/(n+1) for uniform weights."""
    total = float(draw.weights.sum()) + draw.infinite_weight
    if total <= 0:
        return 1.0
    return float(max(draw.weights.max(initial=0.0), draw.infinite_weight) / total)


def _coverage_repetition(rep: int, config: CoverageConfig, stream: np.random.SeedSequence, test_x: np.ndarray) -> RepetitionRecord:
    logger.info("repetition %d started", rep)
    rng = np.random.default_rng(stream)
    spec = config.dgp_spec
    if config.resample_test:
        test_x = spec.sample_covariates(spec.n_te, rng, test=True)
    draw = generate_dgp(spec, rng, test_x)
    fit = fit_components(draw, config, config.methods)
    predictors = build_predictors(fit, config, config.methods)
    calib = draw.calibration
    coverage, lengths, shares, auxiliary = {}, {}, {}, []
    for method, predictor in predictors.items():
        bound = predictor.score.bind(calib) if predictor.calibration_mode is CalibrationMode.FAST else None
        cov = np.empty(test_x.shape[0])
        size = np.empty(test_x.shape[0])
        share = np.empty(test_x.shape[0])
        for i, x in enumerate(test_x):
            weights = predictor.weight.draw(calib.x, x, rng)
            region = build_prediction_region(
                predictor, calib, x, config.level, resolution=config.resolution, draw=weights, bound=bound
            )
            cov[i] = analytic_conditional_coverage(region, x, spec)
            size[i] = region.length
            share[i] = max_weight_share(weights)
            if weights.auxiliary is not None and predictor.weight.is_random:
                row = {"method": method, "rep": rep, "test_index": i}
                row.update({f"x{j}": float(v) for j, v in enumerate(weights.auxiliary)})
                auxiliary.append(row)
        if np.isinf(size).any():
            logger.debug("%s: %d of %d regions are unbounded in repetition %d",
                         method, int(np.isinf(size).sum()), size.size, rep)
        coverage[method] = cov
        lengths[method] = size
        shares[method] = share
    logger.info("repetition %d finished", rep)
    return RepetitionRecord(rep, coverage, lengths, auxiliary, shares)


def _collect(records: Sequence[RepetitionRecord], methods: Sequence[str], level: Level) -> MetricsTable:
    rows, auxiliary = [], []
    coverage = {m: np.vstack([r.coverage[m] for r in records]) for m in methods}
    lengths = {m: np.vstack([r.lengths[m] for r in records]) for m in methods}
    for record in records:
        for m in methods:
            cov = record.coverage[m]
            size = record.lengths[m]
            finite = size[np.isfinite(size)]
            rows.append({
                "method": m,
                "rep": record.rep,
                "marginal": float(cov.mean()),
                "cond_miscov": float(np.mean(np.abs(cov - level.coverage))),
                "mean_length": float(size.mean()),
                "finite_length": float(finite.mean()) if finite.size else float("nan"),
                "infinite_share": float(np.mean(np.isinf(size))),
                "max_weight_share": float(record.weight_share[m].mean()),
            })
        auxiliary.extend(record.auxiliary)
    return MetricsTable(_records_frame(rows), coverage, lengths, level, pd.DataFrame(auxiliary))


def run_coverage_experiment(config: CoverageConfig) -> MetricsTable:
    """
    R repetitions of fit / calibrate / evaluate on fixed test covariates.

    Raises:
        ExperimentError: a repetition failed; carries the repetition index.
    """
    test_rng, streams = _streams(config.seed, config.reps)
    spec = config.dgp_spec
    test_x = spec.sample_covariates(spec.n_te, test_rng, test=True)
    logger.info("coverage experiment: dgp %d, d=%d, n=%d, sigma=%.3g, %d reps", spec.dgp, spec.d, spec.n, spec.sigma_x, config.reps)
    tasks = (delayed(_guarded)(_coverage_repetition, j, config, streams[j], test_x) for j in range(config.reps))
    records = _parallel(config.n_jobs, tasks)
    return _collect(records, config.methods, config.level)


def run_rate_experiment(config: CoverageConfig, sizes: Sequence[int], scale: float = 1.0) -> MetricsTable:
    """Coverage experiment at each n with h = scale * n^(-1/(d+2)); method labels get an @n suffix."""
    tables = []
    for n in sizes:
        payload = config.to_dict()
        payload.update(n=int(n), bandwidth=rate_bandwidth(int(n), config.d, scale))
        table = run_coverage_experiment(CoverageConfig.from_dict(payload))
        records = table.records.assign(method=table.records["method"] + f"@{n}")
        tables.append((n, table, records))
    records = pd.concat([r for _, _, r in tables], ignore_index=True)
    coverage = {f"{m}@{n}": t.coverage[m] for n, t, _ in tables for m in t.coverage}
    lengths = {f"{m}@{n}": t.lengths[m] for n, t, _ in tables for m in t.lengths}
    return MetricsTable(records, coverage, lengths, config.level)


# ---------------------------------------------------------------------------
# p-values and the mismatch diagnostic
# ---------------------------------------------------------------------------


def _pvalue_repetition(rep: int, config: CoverageConfig, stream: np.random.SeedSequence) -> List[Dict[str, Any]]:
    rng = np.random.default_rng(stream)
    spec = config.dgp_spec
    draw = generate_dgp(spec, rng, test_x=spec.sample_covariates(1, rng, test=True))
    fit = fit_components(draw, config, config.methods)
    x_test = draw.test_x[0]
    y_test = float(spec.sample_response(draw.test_x, rng)[0])
    rows = []
    for method, predictor in build_predictors(fit, config, config.methods).items():
        p = conformal_p_value(predictor, draw.calibration, x_test, y_test, rng=rng)
        rows.append({
            "method": method, "rep": rep, "marginal": float(p > config.alpha),
            "cond_miscov": float("nan"), "mean_length": float("nan"), "p_value": p,
        })
    return rows


def run_pvalue_experiment(config: CoverageConfig) -> MetricsTable:
    """Fresh test pair per repetition; marginal is the fraction of p-values above alpha."""
    _, streams = _streams(config.seed, config.reps)
    tasks = (delayed(_guarded)(_pvalue_repetition, j, config, streams[j]) for j in range(config.reps))
    rows = [row for chunk in _parallel(config.n_jobs, tasks) for row in chunk]
    records = _records_frame(rows)
    rejection = records.groupby("method", sort=False)["p_value"].apply(lambda p: float(np.mean(p <= config.alpha)))
    return MetricsTable(records, {}, {}, config.level, extras={"rejection_rate": rejection.to_dict()})


def run_decompose(config: CoverageConfig, n_points: int = 20, n_mc: int = 20_000) -> MetricsTable:
    """
    Intrinsic conditional-mismatch error per method, averaged over the first
    n_points fixed test covariates, with estimators from one repetition.
    Kinds without a closed-form oracle score report NaN.
    """
    test_rng, streams = _streams(config.seed, 1)
    spec = config.dgp_spec
    test_x = spec.sample_covariates(spec.n_te, test_rng, test=True)[:n_points]
    rng = np.random.default_rng(streams[0])
    draw = generate_dgp(spec, rng, test_x)
    fit = fit_components(draw, config, config.methods)
    rows = []
    for method, predictor in build_predictors(fit, config, config.methods).items():
        try:
            gaps = [oracle_conditional_quantile_gap(predictor, spec, t, config.level, n_mc, rng) for t in test_x]
            mismatch = float(np.mean(gaps))
        except UnsupportedError as exc:
            logger.warning("%s: %s", method, exc)
            mismatch = float("nan")
        rows.append({
            "method": method, "rep": 0, "marginal": float("nan"), "cond_miscov": float("nan"),
            "mean_length": float("nan"), "mismatch": mismatch,
        })
    return MetricsTable(_records_frame(rows), {}, {}, config.level)


# ---------------------------------------------------------------------------
# Model selection experiment
# ---------------------------------------------------------------------------


def _sqrt_mean_abs(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.abs(x), axis=1))


def _squared_norm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=1)


def candidate_bases(d: int):
    """Quantile-model bases for the selection pool; sd_feature is well specified under dgp 3."""
    return {
        "cqr_intercept": intercept_basis(),
        "cqr_linear": linear_basis(d),
        "cqr_sq_norm": feature_basis([("sq_norm", _squared_norm)]),
        "cqr_sd_feature": feature_basis([("sqrt_mean_abs", _sqrt_mean_abs)]),
    }


SELECTION_RULES = tuple(r.value for r in SelectionRule)


def _selection_repetition(rep: int, config: CoverageConfig, stream, test_x: np.ndarray, targets: Tuple[float, ...]) -> List[Dict[str, Any]]:
    rng = np.random.default_rng(stream)
    spec = config.dgp_spec
    draw = generate_dgp(spec, rng, test_x)
    first, second = draw.split_train()
    mean_model = fit_mean_model(first.x, first.y)
    v2 = np.abs(second.y - mean_model.predict(second.x))
    labels, candidates = [], []
    for label, basis in candidate_bases(spec.d).items():
        model = fit_pinball_qr(second.x, v2, basis, config.alpha, lam=CQR_RIDGE)
        score = ScoreSpec(ScoreKind.CQR_ONE_SIDED, mean_model=mean_model, quantile_model=model)
        labels.append(label)
        candidates.append(PredictorSpec(score, label=label))
    pool = CandidatePool(tuple(candidates), draw.calibration, tuple(labels))

    coverage = {}
    for label, candidate in zip(labels, candidates):
        bound = candidate.score.bind(draw.calibration)
        coverage[label] = np.array([
            analytic_conditional_coverage(
                build_prediction_region(candidate, draw.calibration, x, config.level, bound=bound), x, spec)
            for x in test_x
        ])
    selector = ModelSelector(SelectionConfig(SelectionRule.EFF_SIZE, targets, config.alpha))
    report = selector.select(pool, rng)
    choices = dict(report.choices)
    choices[SelectionRule.RAND.value] = int(rng.integers(len(pool)))

    rows = []
    for label in labels:
        cov = coverage[label]
        rows.append({"method": label, "rep": rep, "marginal": float(cov.mean()),
                     "cond_miscov": float(np.mean(np.abs(cov - config.level.coverage))),
                     "mean_length": float("nan"), "chosen": label})
    for rule in SELECTION_RULES:
        label = labels[choices[rule]]
        cov = coverage[label]
        rows.append({"method": rule, "rep": rep, "marginal": float(cov.mean()),
                     "cond_miscov": float(np.mean(np.abs(cov - config.level.coverage))),
                     "mean_length": float("nan"), "chosen": label})
    return rows


def run_selection_experiment(config: CoverageConfig, targets: Sequence[float] = (30.0, 40.0, 50.0)) -> MetricsTable:
    """
    Four CQR candidates differing in quantile-model basis; each rule's choice
    per repetition is recorded in the `chosen` column.
    """
    test_rng, streams = _streams(config.seed, config.reps)
    spec = config.dgp_spec
    test_x = spec.sample_covariates(spec.n_te, test_rng, test=True)
    tasks = (delayed(_guarded)(_selection_repetition, j, config, streams[j], test_x, tuple(targets))
             for j in range(config.reps))
    rows = [row for chunk in _parallel(config.n_jobs, tasks) for row in chunk]
    records = _records_frame(rows)
    frequencies = {
        rule: records[records["method"] == rule]["chosen"].value_counts(normalize=True).to_dict()
        for rule in SELECTION_RULES
    }
    return MetricsTable(records, {}, {}, config.level, extras={"selection_frequency": frequencies})


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SbmSpec:
    """Stochastic block model with per-block noise scale; node responses follow 2 sum(x)/d + tau_b * eps."""

    blocks: Tuple[int, ...] = (120, 120, 120)
    p_in: float = 0.3
    p_out: float = 0.005
    noise_scales: Tuple[float, ...] = ()
    d: int = 1
    seed: int = 0

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.blocks)
        if not blocks or min(blocks) < 1:
            raise ConfigurationError("blocks must be positive sizes")
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ConfigurationError("need 0 <= p_out <= p_in <= 1")
        scales = tuple(float(s) for s in self.noise_scales) or (1.0,) * len(blocks)
        if len(scales) != len(blocks) or min(scales) <= 0:
            raise ConfigurationError("need one positive noise scale per block")
        if self.d < 1:
            raise ConfigurationError("d must be at least 1")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "noise_scales", scales)

    @property
    def n_nodes(self) -> int:
        return int(sum(self.blocks))

    def probabilities(self) -> List[List[float]]:
        k = len(self.blocks)
        return [[self.p_in if a == b else self.p_out for b in range(k)] for a in range(k)]

    def expected_edges(self) -> float:
        sizes = np.asarray(self.blocks, dtype=float)
        within = np.sum(sizes * (sizes - 1) / 2.0) * self.p_in
        between = (sizes.sum() ** 2 - np.sum(sizes**2)) / 2.0 * self.p_out
        return float(within + between)


def generate_sbm_graph(spec: SbmSpec, rng: np.random.Generator) -> Tuple[GraphData, CommunityAssignment]:
    """Graph whose last node is the test node, plus the planted block labels."""
    g = nx.stochastic_block_model(list(spec.blocks), spec.probabilities(), seed=int(rng.integers(2**32)))
    n = spec.n_nodes
    adjacency = nx.to_scipy_sparse_array(g, nodelist=range(n), dtype=bool, format="csr")
    planted = planted_assignment(spec.blocks)
    x = rng.standard_normal((n, spec.d))
    tau = np.asarray(spec.noise_scales)[planted.labels]
    y = 2.0 * x.sum(axis=1) / spec.d + tau * rng.standard_normal(n)
    return GraphData(adjacency, x, y, n - 1), planted


@dataclass(frozen=True)
class GraphExperimentConfig:
    """
    Settings for the graph experiment.

    With edges and nodes set, the graph is read from disk instead of drawn from
    the SBM; its communities come from the communities CSV or, with detect, from
    one label-propagation pass before the repetitions start.
    """

    sbm: SbmSpec = field(default_factory=SbmSpec)
    alpha: float = 0.1
    reps: int = 200
    seed: int = 0
    tests_per_block: int = 5
    detect: bool = False
    min_community: int = 10
    mode: str = "fast"
    resolution: int = DEFAULT_RESOLUTION
    n_jobs: int = 1
    edges: Optional[str] = None
    nodes: Optional[str] = None
    communities: Optional[str] = None

    def __post_init__(self):
        Level(self.alpha)
        CalibrationMode(self.mode)
        if self.reps < 1 or self.tests_per_block < 1:
            raise ConfigurationError("reps and tests_per_block must be at least 1")
        if (self.edges is None) != (self.nodes is None):
            raise ConfigurationError("an imported graph needs both an edge list and a node table")
        if self.edges is not None and self.communities is None and not self.detect:
            raise ConfigurationError("an imported graph needs a communities file or detect")

    @property
    def imported(self) -> bool:
        return self.edges is not None


def _graph_coverage(graph: GraphData, assignment: CommunityAssignment, tests: Dict[int, np.ndarray],
                    score: ScoreSpec, config: GraphExperimentConfig, coverage_of) -> Tuple[Dict, Dict]:
    """Per-community coverage and length of graphcp and pooled stdcp over the chosen test nodes."""
    pooled = CommunityAssignment(np.zeros(graph.n_nodes, dtype=int), CommunitySource.IMPORTED)
    k = len(tests)
    coverage = {"graphcp": np.zeros(k), "stdcp": np.zeros(k)}
    lengths = {"graphcp": np.zeros(k), "stdcp": np.zeros(k)}
    for community, chosen in tests.items():
        for t in chosen:
            test_graph = graph.with_test(int(t))
            for method, labels in (("graphcp", assignment), ("stdcp", pooled)):
                region = graphcp_region(test_graph, labels, score, config.alpha, mode=config.mode,
                                        resolution=config.resolution)
                coverage[method][community] += coverage_of(region, int(t)) / chosen.size
                lengths[method][community] += region.length / chosen.size
    return coverage, lengths


def _graph_repetition(rep: int, config: GraphExperimentConfig, stream) -> Dict[str, Any]:
    rng = np.random.default_rng(stream)
    sbm = config.sbm
    graph, planted = generate_sbm_graph(sbm, rng)
    if config.communities is not None:
        assignment = load_communities(config.communities)
    elif config.detect:
        assignment = detect_communities(graph, rng, config.min_community)
    else:
        assignment = planted
    score = ScoreSpec(ScoreKind.RESIDUAL, mean_model=linear_mean_model(sbm.d))
    tests = {}
    for block in range(len(sbm.blocks)):
        members = planted.members(block)
        tests[block] = rng.choice(members, size=min(config.tests_per_block, members.size), replace=False)

    def analytic(region: PredictionRegion, t: int) -> float:
        mean = 2.0 * graph.covariates[t].sum() / sbm.d
        return normal_interval_coverage(region, mean, sbm.noise_scales[planted.labels[t]])

    coverage, lengths = _graph_coverage(graph, assignment, tests, score, config, analytic)
    rate = misclustering_rate(assignment.labels, planted.labels) if config.detect else 0.0
    return {"rep": rep, "coverage": coverage, "lengths": lengths, "misclustering": rate}


def _imported_repetition(rep: int, config: GraphExperimentConfig, stream, graph: GraphData,
                         assignment: CommunityAssignment) -> Dict[str, Any]:
    """
    Fit the mean model on a random half of every community, then run both
    methods on the subgraph of the other half; coverage is the hit rate of the
    held-out responses.
    """
    rng = np.random.default_rng(stream)
    train = np.zeros(graph.n_nodes, dtype=bool)
    for community in range(assignment.n_communities):
        members = assignment.members(community)
        train[rng.choice(members, size=members.size // 2, replace=False)] = True
    mean_model = fit_mean_model(graph.covariates[train], graph.responses[train])
    keep = np.flatnonzero(~train)
    sub = GraphData(graph.adjacency[keep][:, keep], graph.covariates[keep], graph.responses[keep], 0)
    sub_assignment = CommunityAssignment(assignment.labels[keep], assignment.source)
    tests = {}
    for community in range(sub_assignment.n_communities):
        members = sub_assignment.members(community)
        tests[community] = rng.choice(members, size=min(config.tests_per_block, members.size), replace=False)

    def hit(region: PredictionRegion, t: int) -> float:
        return float(region.contains(sub.responses[t]))

    score = ScoreSpec(ScoreKind.RESIDUAL, mean_model=mean_model)
    coverage, lengths = _graph_coverage(sub, sub_assignment, tests, score, config, hit)
    return {"rep": rep, "coverage": coverage, "lengths": lengths, "misclustering": float("nan")}


def load_graph_source(config: GraphExperimentConfig, rng: np.random.Generator) -> Tuple[GraphData, CommunityAssignment]:
    """
    Read the imported graph and fix its communities.

    Raises:
        DomainError: a node lacks a response, the communities do not cover every
            node, or a community has fewer than 4 nodes.
    """
    graph = load_graph(config.edges, config.nodes, test_index=0)
    if not np.all(np.isfinite(graph.responses)):
        raise DomainError("graph experiments need a response for every node")
    if config.communities is not None:
        assignment = load_communities(config.communities)
    else:
        assignment = detect_communities(graph, rng, config.min_community)
    if assignment.labels.size != graph.n_nodes:
        raise DomainError(f"communities cover {assignment.labels.size} nodes, the graph has {graph.n_nodes}")
    if assignment.sizes.min() < 4:
        raise DomainError("every community needs at least 4 nodes to split into fit and calibration halves")
    logger.info("imported graph: %d nodes, %d communities", graph.n_nodes, assignment.n_communities)
    return graph, assignment


def run_graph_experiment(config: GraphExperimentConfig) -> MetricsTable:
    """
    Per-community coverage of GraphCP against pooled rank calibration (stdcp).

    SBM graphs are scored by analytic coverage given the planted block;
    imported graphs by held-out hit rates.
    """
    level = Level(config.alpha)
    source_rng, streams = _streams(config.seed, config.reps)
    if config.imported:
        graph, assignment = load_graph_source(config, source_rng)
        tasks = (delayed(_guarded)(_imported_repetition, j, config, streams[j], graph, assignment)
                 for j in range(config.reps))
    else:
        tasks = (delayed(_guarded)(_graph_repetition, j, config, streams[j]) for j in range(config.reps))
    results = _parallel(config.n_jobs, tasks)
    rows = []
    for result in results:
        for method in ("graphcp", "stdcp"):
            cov = result["coverage"][method]
            rows.append({"method": method, "rep": result["rep"], "marginal": float(cov.mean()),
                         "cond_miscov": float(np.mean(np.abs(cov - level.coverage))),
                         "mean_length": float(result["lengths"][method].mean()),
                         "misclustering": result["misclustering"]})
    coverage = {m: np.vstack([r["coverage"][m] for r in results]) for m in ("graphcp", "stdcp")}
    lengths = {m: np.vstack([r["lengths"][m] for r in results]) for m in ("graphcp", "stdcp")}
    per_block = {m: coverage[m].mean(axis=0).tolist() for m in coverage}
    return MetricsTable(_records_frame(rows), coverage, lengths, level, extras={"community_coverage": per_block})


# ---------------------------------------------------------------------------
# Hierarchical layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HierSpec:
    """K branches of N draws; y = slope * sum(x)/d + tau_k * eps with tau_k ~ U[tau_low, tau_high]."""

    n_branches: int = 50
    branch_size: int = 20
    d: int = 1
    tau_low: float = 0.5
    tau_high: float = 2.0
    slope: float = 2.0

    def __post_init__(self):
        if self.n_branches < 2 or self.branch_size < 2:
            raise ConfigurationError("need at least 2 branches of 2 observations")
        if not 0 < self.tau_low <= self.tau_high:
            raise ConfigurationError("need 0 < tau_low <= tau_high")

    def mean(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.slope * x.sum(axis=1) / self.d


def generate_hierarchical(spec: HierSpec, rng: np.random.Generator) -> Tuple[HierData, np.ndarray]:
    """Branch layout and the branch noise scales."""
    k, n, d = spec.n_branches, spec.branch_size, spec.d
    tau = rng.uniform(spec.tau_low, spec.tau_high, size=k)
    x = rng.standard_normal((k, n, d))
    y = spec.slope * x.sum(axis=2) / d + tau[:, None] * rng.standard_normal((k, n))
    return HierData(x, y), tau


@dataclass(frozen=True)
class HierExperimentConfig:
    hier: HierSpec = field(default_factory=HierSpec)
    kind: str = "dcp_branch"
    alpha: float = 0.1
    reps: int = 300
    seed: int = 0
    compare_own_branch: bool = False
    kernel_bandwidth: Optional[float] = None
    n_jobs: int = 1

    def __post_init__(self):
        Level(self.alpha)
        BranchScoreKind(self.kind)
        if self.reps < 1:
            raise ConfigurationError("reps must be at least 1")


def _hier_repetition(rep: int, config: HierExperimentConfig, stream) -> Dict[str, Tuple[float, float]]:
    rng = np.random.default_rng(stream)
    data, tau = generate_hierarchical(config.hier, rng)
    kernel = KernelSpec(KernelFamily.GAUSSIAN, config.kernel_bandwidth) if config.kernel_bandwidth else None
    hier_config = HierConfig(kernel=kernel)
    mean = float(config.hier.mean(data.x_test)[0])
    variants = {"hier_pooled": True}
    if config.compare_own_branch:
        variants["hier_own"] = False
    out = {}
    for method, pooled in variants.items():
        region = hierarchical_region(data, config.kind, config.alpha, config=hier_config, pooled=pooled)
        out[method] = (normal_interval_coverage(region, mean, float(tau[-1])), region.length)
    return out


def run_hier_experiment(config: HierExperimentConfig) -> MetricsTable:
    """
    Branch-conditional coverage of the test pair given (tau_K, x), one
    evaluation per repetition.
    """
    level = Level(config.alpha)
    _, streams = _streams(config.seed, config.reps)
    tasks = (delayed(_guarded)(_hier_repetition, j, config, streams[j]) for j in range(config.reps))
    results = _parallel(config.n_jobs, tasks)
    methods = list(results[0])
    rows = [
        {"method": m, "rep": j, "marginal": cov, "cond_miscov": abs(cov - level.coverage), "mean_length": size}
        for j, result in enumerate(results) for m, (cov, size) in result.items()
    ]
    coverage = {m: np.array([[r[m][0] for r in results]]) for m in methods}
    lengths = {m: np.array([[r[m][1] for r in results]]) for m in methods}
    return MetricsTable(_records_frame(rows), coverage, lengths, level)
