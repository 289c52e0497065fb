"""Tests for the method catalogue: scores, weights and the predictor factory."""

import numpy as np
import pytest

from conformal_kit.calib_core import (build_prediction_region, calibrate,
                                      conformal_p_value)
from conformal_kit.common import CalibrationSet, Level
from conformal_kit.errors import ConfigurationError, UnsupportedError
from conformal_kit.estimators import (ConditionalCdf, MeanModel,
                                      fit_mean_model, linear_basis)
from conformal_kit.kernels import KernelSpec
from conformal_kit.methods import (CalibrationMode, FittedComponents, Method,
                                   PredictorSpec, ScoreKind, ScoreSpec,
                                   WeightKind, WeightSpec, localized_rank,
                                   make_predictor, oracle_conditional_quantile_gap)
from conformal_kit.simulate import (CoverageConfig, DgpSpec, build_predictors,
                                    density_ratio, fit_components, generate_dgp)


def _data(seed, n=80, d=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = x.sum(axis=1) + (0.5 + np.abs(x[:, 0])) * rng.normal(size=n)
    return x, y


def _components(x, y, **extra):
    return FittedComponents(mean_model=fit_mean_model(x, y), level=Level(0.1), **extra)


def test_make_predictor_rejects_unknown_method():
    """Test method name validation."""
    x, y = _data(0)
    with pytest.raises(ConfigurationError, match="unknown method"):
        make_predictor("not-a-method", _components(x, y))


def test_make_predictor_requires_ingredients():
    """Test that shift and kernel methods need their ingredients."""
    x, y = _data(1)
    components = _components(x, y)
    with pytest.raises(ConfigurationError, match="density ratio"):
        make_predictor(Method.WCP, components)
    with pytest.raises(ConfigurationError, match="needs a kernel"):
        make_predictor(Method.LCP, components)


def test_make_predictor_labels_and_kinds():
    """Test the score and weight kinds behind a few method names."""
    x, y = _data(2)
    components = _components(x, y)
    ratio = density_ratio(DgpSpec(d=2, sigma_x=1.2))
    kernel = KernelSpec(bandwidth=1.0)

    scp = make_predictor("scp", components)
    wcp = make_predictor("wcp", components, density_ratio=ratio)
    rlcp = make_predictor("rlcp", components, kernel=kernel)
    lcp = make_predictor("lcp", components, kernel=kernel)

    assert scp.label == "scp"
    assert scp.score.kind is ScoreKind.RESIDUAL and scp.weight.kind is WeightKind.UNIFORM
    assert wcp.weight.kind is WeightKind.DENSITY_RATIO
    assert rlcp.weight.kind is WeightKind.RANDOMIZED_LOCAL and rlcp.weight.is_random
    assert lcp.score.kind is ScoreKind.LCP_RANK


def test_base_lcp_weights_are_centred_on_the_test_point():
    """Test the deterministic-centre diagnostic variant of RLCP."""
    x, y = _data(17)
    kernel = KernelSpec(bandwidth=0.5)
    predictor = make_predictor("rlcp", _components(x, y), kernel=kernel, base_lcp=True)
    assert predictor.weight.kind is WeightKind.LOCAL and not predictor.weight.is_random

    x_test = np.array([0.3, -0.2])
    draw = predictor.weight.draw(x, x_test)
    assert draw.infinite_weight == 1.0
    assert draw.weights == pytest.approx(np.exp(-np.sum((x - x_test) ** 2, axis=1) / (2 * 0.25)))


def test_exact_mode_falls_back_for_data_free_scores():
    """Test that exact calibration of a residual score uses the fast path."""
    x, y = _data(3)
    predictor = make_predictor("scp", _components(x, y), calibration_mode=CalibrationMode.EXACT)
    assert predictor.calibration_mode is CalibrationMode.FAST

    with pytest.raises(ConfigurationError, match="no exact mode"):
        PredictorSpec(predictor.score, calibration_mode=CalibrationMode.EXACT)


def test_weight_spec_validation():
    """Test weight ingredient checks."""
    with pytest.raises(ConfigurationError, match="density ratio"):
        WeightSpec(WeightKind.DENSITY_RATIO)
    with pytest.raises(ConfigurationError, match="kernel"):
        WeightSpec(WeightKind.RANDOMIZED_LOCAL)
    with pytest.raises(ConfigurationError, match="rng"):
        WeightSpec(WeightKind.RANDOMIZED_LOCAL, kernel=KernelSpec()).draw(np.zeros((3, 1)), [0.0])


def test_score_spec_requires_components():
    """Test that a score kind without its fitted parts is rejected."""
    with pytest.raises(ConfigurationError, match="needs mean_model"):
        ScoreSpec(ScoreKind.RESIDUAL)


def test_rlcp_with_flat_kernel_matches_scp():
    """Test that an infinite bandwidth turns RLCP into SCP."""
    x, y = _data(4)
    calib = CalibrationSet(*_data(5))
    components = _components(x, y)
    scp = make_predictor("scp", components)
    rlcp = make_predictor("rlcp", components, kernel=KernelSpec(bandwidth=np.inf))
    rng = np.random.default_rng(0)
    for x_test in np.random.default_rng(6).normal(size=(5, 2)):
        expected = build_prediction_region(scp, calib, x_test, 0.1)
        assert build_prediction_region(rlcp, calib, x_test, 0.1, rng=rng) == expected


def test_dcp_region_is_cdf_band():
    """Test that the DCP region keeps F(y | x) within 1/2 +- t."""
    x, y = _data(7, n=200)
    cdf = ConditionalCdf(KernelSpec(bandwidth=1.0), x, y)
    predictor = make_predictor("dcp", FittedComponents(response_cdf=cdf))
    calib = CalibrationSet(*_data(8, n=100))
    x_test = np.array([0.2, -0.4])

    region = build_prediction_region(predictor, calib, x_test, 0.3)
    threshold = calibrate(predictor, calib, x_test, 0.3).threshold

    assert 0 < threshold < 0.5
    assert len(region.intervals) == 1
    lower, upper = region.intervals[0]
    inside = np.linspace(lower, upper, 50)[1:-1]
    values = cdf.evaluate(inside, x_test)
    assert np.all(np.abs(values - 0.5) <= threshold + 1e-12)


def test_lcp_analytic_region_matches_grid():
    """Test the closed-form localized-rank inversion against a grid scan."""
    x, y = _data(9)
    components = _components(x, y)
    predictor = make_predictor("lcp", components, kernel=KernelSpec(bandwidth=0.8))
    calib = CalibrationSet(*_data(10, n=60))
    grid = np.linspace(-10.0, 10.0, 401)
    for x_test in np.random.default_rng(11).normal(size=(4, 2)):
        analytic = build_prediction_region(predictor, calib, x_test, 0.1)
        scanned = build_prediction_region(predictor, calib, x_test, 0.1, y_domain=(-10.0, 10.0),
                                          resolution=401, analytic=False)
        agreement = np.mean(analytic.contains(grid) == scanned.contains(grid))
        assert agreement >= 0.99


def test_lcp_exact_mode_covers_fast_region_center():
    """Test that exact-mode LCP accepts the mean prediction."""
    x, y = _data(12)
    components = _components(x, y)
    predictor = make_predictor("lcp", components, kernel=KernelSpec(bandwidth=1.0),
                               calibration_mode=CalibrationMode.EXACT)
    calib = CalibrationSet(*_data(13, n=40))
    x_test = np.array([0.1, 0.1])
    center = float(components.mean_model.predict(x_test.reshape(1, -1))[0])

    region = build_prediction_region(predictor, calib, x_test, 0.1, y_domain=(center - 8.0, center + 8.0),
                                     resolution=65)

    assert predictor.calibration_mode is CalibrationMode.EXACT
    assert region.contains(center)


def test_cc_residual_fraction():
    """Test that the fitted CC centre leaves about 1 - alpha of the scores at or below zero."""
    x, y = _data(14, n=500)
    components = FittedComponents(mean_model=MeanModel(linear_basis(2), np.array([0.0, 1.0, 1.0])),
                                  level=Level(0.1), cc_lambda=0.0)
    predictor = make_predictor("cc", components)
    bound = predictor.score.bind(CalibrationSet(x, y))
    fraction = np.mean(bound.calibration_scores <= 1e-9)
    d0 = 3
    assert abs(fraction - 0.9) <= (d0 + 1) / 500 + 0.02


def test_wcp_p_value_uses_density_ratio():
    """Test that the weighted p-value normalizes by the ratio weights."""
    x, y = _data(15, n=10)
    components = _components(x, y)
    ratio = density_ratio(DgpSpec(d=2, sigma_x=1.5))
    predictor = make_predictor("wcp", components, density_ratio=ratio)
    calib = CalibrationSet(x, y)
    x_test = np.array([0.5, 0.5])
    bound = predictor.score.bind(calib)
    test_score = float(bound.test_scores(x_test, [3.0])[0])
    weights = ratio(x)
    expected = weights[bound.calibration_scores > test_score].sum() / (weights.sum() + ratio(x_test)[0])

    assert conformal_p_value(predictor, calib, x_test, 3.0) == pytest.approx(expected)


def test_oracle_gap():
    """Test the oracle conditional-mismatch diagnostic."""
    x, y = _data(16)
    dgp = DgpSpec(dgp=1, d=2)
    components = _components(x, y, response_cdf=ConditionalCdf(KernelSpec(), x, y))
    scp = make_predictor("scp", components)
    dcp = make_predictor("dcp", components)
    lcp = make_predictor("lcp", components, kernel=KernelSpec())

    gap = oracle_conditional_quantile_gap(scp, dgp, [1.0, -1.0], 0.1, n_mc=20_000)
    assert gap >= 0.0
    assert oracle_conditional_quantile_gap(dcp, dgp, [1.0, -1.0], 0.1) == 0.0
    with pytest.raises(UnsupportedError):
        oracle_conditional_quantile_gap(lcp, dgp, [1.0, -1.0], 0.1)


def test_lcp_with_training_reference_is_pretrained():
    """Test that an lcp score ranked against a reference sample uses the localized rank with a unit self weight."""
    x, y = _data(18)
    reference = CalibrationSet(*_data(19, n=50))
    kernel = KernelSpec(bandwidth=0.8)
    components = _components(x, y, lcp_reference=reference)
    predictor = make_predictor("lcp", components, kernel=kernel, calibration_mode=CalibrationMode.EXACT)
    assert predictor.calibration_mode is CalibrationMode.FAST
    assert not predictor.score.supports_exact

    calib = CalibrationSet(*_data(20, n=40))
    model = components.mean_model
    ref_v = np.abs(reference.y - model.predict(reference.x))
    bound = predictor.score.bind(calib)
    expected = localized_rank(kernel, calib.x, np.abs(calib.y - model.predict(calib.x)), reference.x, ref_v)
    assert bound.calibration_scores == pytest.approx(expected)

    x_test = np.array([0.4, -0.3])
    ys = np.array([-2.0, 0.0, 1.5])
    v_test = np.abs(ys - model.predict(np.tile(x_test, (3, 1))))
    assert bound.test_scores(x_test, ys) == pytest.approx(
        localized_rank(kernel, np.tile(x_test, (3, 1)), v_test, reference.x, ref_v))


def test_lcp_reference_region_matches_grid():
    """Test the closed-form inversion of the reference-ranked lcp score against a grid scan."""
    x, y = _data(21)
    components = _components(x, y, lcp_reference=CalibrationSet(*_data(22, n=60)))
    predictor = make_predictor("lcp", components, kernel=KernelSpec(bandwidth=0.8))
    calib = CalibrationSet(*_data(23, n=60))
    grid = np.linspace(-10.0, 10.0, 401)
    for x_test in np.random.default_rng(24).normal(size=(4, 2)):
        analytic = build_prediction_region(predictor, calib, x_test, 0.1)
        scanned = build_prediction_region(predictor, calib, x_test, 0.1, y_domain=(-10.0, 10.0),
                                          resolution=401, analytic=False)
        assert np.mean(analytic.contains(grid) == scanned.contains(grid)) >= 0.99


def _zero_mean_components(seed, n=120):
    x, y = _data(seed, n=n)
    zero = MeanModel(linear_basis(2), np.zeros(3))
    kernel = KernelSpec(bandwidth=1.0)
    return FittedComponents(
        mean_model=zero,
        level=Level(0.2),
        score_cdf=ConditionalCdf(kernel, x, np.abs(y)),
        response_cdf=ConditionalCdf(kernel, x, y),
    ), kernel


@pytest.mark.parametrize("method", ["lcp", "glcp", "dcp"])
def test_step_score_regions_are_open_at_jumps(method):
    """Test that every finite endpoint is accepted and its outward neighbour, the jump itself, is rejected."""
    components, kernel = _zero_mean_components(25)
    predictor = make_predictor(method, components, kernel=kernel)
    calib = CalibrationSet(*_data(26, n=80))
    alpha = 0.2
    for x_test in np.random.default_rng(27).normal(size=(5, 2)):
        region = build_prediction_region(predictor, calib, x_test, alpha)
        assert not region.is_empty
        for lower, upper in region.intervals:
            for end, outward in ((lower, -np.inf), (upper, np.inf)):
                if np.isinf(end):
                    continue
                beyond = np.nextafter(end, outward)
                assert region.contains(end) and not region.contains(beyond)
                assert conformal_p_value(predictor, calib, x_test, end, inclusive=True) > alpha
                assert conformal_p_value(predictor, calib, x_test, beyond, inclusive=True) <= alpha


ALL_METHODS = tuple(m.value for m in Method)


def _catalogue(seed, n=60):
    config = CoverageConfig(dgp=1, d=2, n=n, n_te=1, sigma=1.2, methods=ALL_METHODS, neff_target=20.0)
    draw = generate_dgp(config.dgp_spec, np.random.default_rng(seed))
    fit = fit_components(draw, config, config.methods)
    return build_predictors(fit, config, config.methods), draw.calibration, draw.test_x[0]


def test_regions_grow_with_the_coverage_level():
    """Test that, for a fixed bound score and weight draw, a smaller alpha never shrinks the region."""
    grid = np.linspace(-12.0, 12.0, 961)
    for seed in range(3):
        predictors, calib, x_test = _catalogue(seed)
        rng = np.random.default_rng(100 + seed)
        for name, predictor in predictors.items():
            draw = predictor.weight.draw(calib.x, x_test, rng)
            bound = predictor.score.bind(calib)
            previous = None
            for alpha in (0.4, 0.2, 0.1, 0.05):
                region = build_prediction_region(predictor, calib, x_test, alpha, draw=draw, bound=bound)
                inside = region.contains(grid)
                if previous is not None:
                    assert np.all(inside[previous]), (name, alpha)
                previous = inside


@pytest.mark.slow
def test_inclusive_p_value_is_dual_to_region_for_every_method():
    """Test that inclusive p > alpha exactly on the region, for every method over 50 seeds."""
    alpha = 0.1
    for seed in range(50):
        predictors, calib, x_test = _catalogue(seed)
        rng = np.random.default_rng(1000 + seed)
        trials = rng.uniform(-8.0, 8.0, size=20)
        for name, predictor in predictors.items():
            draw = predictor.weight.draw(calib.x, x_test, rng)
            bound = predictor.score.bind(calib)
            region = build_prediction_region(predictor, calib, x_test, alpha, draw=draw, bound=bound)
            for y_trial in trials:
                p = conformal_p_value(predictor, calib, x_test, y_trial, draw=draw, inclusive=True, bound=bound)
                assert (p > alpha) == region.contains(y_trial), (name, seed, y_trial)
