"""Tests for the synthetic DGPs, metrics and experiment drivers."""

import pickle

import numpy as np
import pandas as pd
import pytest

from conformal_kit.calib_core import build_prediction_region
from conformal_kit.common import Level, PredictionRegion
from conformal_kit.errors import ConfigurationError, ExperimentError
from conformal_kit.estimators import NamedFeature, fit_mean_model
from conformal_kit.methods import FittedComponents, WeightDraw, make_predictor
from conformal_kit.simulate import (SELECTION_RULES, CoverageConfig, DgpSpec,
                                    GraphExperimentConfig, MetricsTable,
                                    SbmSpec, analytic_conditional_coverage,
                                    density_ratio, fit_components,
                                    generate_dgp, max_weight_share,
                                    normal_interval_coverage, rate_bandwidth,
                                    run_coverage_experiment, run_decompose,
                                    run_graph_experiment,
                                    run_pvalue_experiment, run_rate_experiment,
                                    run_selection_experiment)

SMALL = dict(d=2, n=40, n_te=5, reps=3, seed=11, neff_target=20.0)


def test_dgp_mean_and_sd_examples():
    """Test the closed-form mean and noise scale at fixed covariates."""
    dgp3 = DgpSpec(dgp=3, d=1)
    assert dgp3.mean([[1.0]])[0] == pytest.approx(2.0)
    assert dgp3.noise_sd([[1.0]])[0] == pytest.approx(1.0)
    dgp1 = DgpSpec(dgp=1, d=1)
    assert dgp1.noise_sd([[np.sqrt(2 / np.pi)]])[0] == pytest.approx(0.0, abs=1e-12)
    dgp2 = DgpSpec(dgp=2, d=4)
    assert dgp2.noise_sd(np.zeros((1, 4)))[0] == pytest.approx(4 / 2)


def test_dgp_response_moments():
    """Test sampled responses at a fixed covariate against the model moments."""
    rng = np.random.default_rng(0)
    for dgp in (1, 2, 3):
        spec = DgpSpec(dgp=dgp, d=3)
        x = np.tile([[0.3, -1.2, 0.8]], (20_000, 1))
        y = spec.sample_response(x, rng)
        mean, sd = spec.mean(x[:1])[0], spec.noise_sd(x[:1])[0]
        assert abs(y.mean() - mean) <= 4 * sd / np.sqrt(y.size)
        assert y.std() == pytest.approx(sd, rel=0.03)


def test_dgp_validation():
    """Test DGP field checks."""
    with pytest.raises(ConfigurationError, match="dgp must be"):
        DgpSpec(dgp=4)
    with pytest.raises(ConfigurationError, match="sigma_x"):
        DgpSpec(sigma_x=0.0)


def test_density_ratio_examples():
    """Test the Gaussian covariate-shift ratio at known points."""
    assert density_ratio(DgpSpec(d=3, sigma_x=1.0))(np.ones((2, 3))) == pytest.approx([1.0, 1.0])
    assert density_ratio(DgpSpec(d=1, sigma_x=2.0))([[0.0]])[0] == pytest.approx(0.5)


def test_density_ratio_integrates_to_one():
    """Test that the ratio averages to one under the training covariates."""
    rng = np.random.default_rng(1)
    ratio = density_ratio(DgpSpec(d=2, sigma_x=1.2))
    assert ratio(rng.standard_normal((200_000, 2))).mean() == pytest.approx(1.0, abs=0.01)


def test_normal_interval_coverage():
    """Test the analytic coverage of intervals under a normal response."""
    assert normal_interval_coverage(PredictionRegion.whole_line(), 0.0, 2.0) == 1.0
    assert normal_interval_coverage(PredictionRegion.empty(), 0.0, 2.0) == 0.0
    band = PredictionRegion.interval(1.0 - 1.6449 * 2.0, 1.0 + 1.6449 * 2.0)
    assert normal_interval_coverage(band, 1.0, 2.0) == pytest.approx(0.9, abs=1e-4)
    assert normal_interval_coverage(PredictionRegion.interval(0.0, 1.0), 0.5, 0.0) == 1.0
    assert normal_interval_coverage(PredictionRegion.interval(0.0, 1.0), 2.0, 0.0) == 0.0


def test_generate_dgp_shapes():
    """Test the sizes of the training, calibration and test draws."""
    spec = DgpSpec(d=3, n=20, n_tr=40, n_te=7)
    draw = generate_dgp(spec, np.random.default_rng(2))
    first, second = draw.split_train()
    assert draw.train.x.shape == (40, 3)
    assert draw.calibration.n == 20
    assert draw.test_x.shape == (7, 3)
    assert first.n == second.n == 20


def test_rate_bandwidth():
    """Test the shrinking bandwidth schedule."""
    assert rate_bandwidth(16, 2) == pytest.approx(0.5)
    assert rate_bandwidth(16, 2, scale=3.0) == pytest.approx(1.5)


def test_coverage_config_validation():
    """Test experiment settings checks."""
    with pytest.raises(ConfigurationError, match="unknown method"):
        CoverageConfig(methods=("scp", "nope"))
    with pytest.raises(ConfigurationError, match="reps"):
        CoverageConfig(reps=0)
    with pytest.raises(ConfigurationError, match="alpha"):
        CoverageConfig(alpha=1.0)
    with pytest.raises(ConfigurationError, match="unknown config keys: colour"):
        CoverageConfig.from_dict({"colour": "blue"})
    assert CoverageConfig.from_dict({"methods": "scp, cqr"}).methods == ("scp", "cqr")


def test_metrics_table_summary():
    """Test that the summary averages repetitions before comparing to the target."""
    records = pd.DataFrame({
        "method": ["a", "a"], "rep": [0, 1], "marginal": [0.9, 0.9],
        "cond_miscov": [0.1, 0.1], "mean_length": [2.0, 4.0],
    })
    coverage = {"a": np.array([[1.0, 0.8], [0.8, 1.0]])}
    lengths = {"a": np.array([[2.0, 2.0], [4.0, 4.0]])}
    table = MetricsTable(records, coverage, lengths, Level(0.1))
    summary = table.method_summary("a")
    assert summary["marginal"] == pytest.approx(0.9)
    assert summary["cond_miscov"] == pytest.approx(0.0)
    assert summary["mean_length"] == pytest.approx(3.0)
    with pytest.raises(KeyError):
        table.method_summary("b")


def test_experiment_error_survives_pickling():
    """Test that worker errors keep their repetition index across processes."""
    error = pickle.loads(pickle.dumps(ExperimentError("singular design", 4)))
    assert error.repetition == 4
    assert str(error) == "repetition 4: singular design"


def test_coverage_experiment_is_deterministic():
    """Test that a seed fixes every output, independent of the worker count."""
    config = CoverageConfig(methods=("scp", "cqr", "rlcp"), **SMALL)
    first = run_coverage_experiment(config)
    second = run_coverage_experiment(config)
    parallel = run_coverage_experiment(CoverageConfig(methods=("scp", "cqr", "rlcp"), n_jobs=2, **SMALL))

    assert first.coverage["scp"].shape == (3, 5)
    assert first.methods == ["scp", "cqr", "rlcp"]
    pd.testing.assert_frame_equal(first.records, second.records)
    pd.testing.assert_frame_equal(first.records, parallel.records)
    pd.testing.assert_frame_equal(first.auxiliary, parallel.auxiliary)
    assert set(first.auxiliary["method"]) == {"rlcp"}


def test_rate_experiment_labels():
    """Test the per-size method labels."""
    config = CoverageConfig(methods=("rlcp",), **{**SMALL, "reps": 2})
    table = run_rate_experiment(config, sizes=(30, 60))
    assert table.methods == ["rlcp@30", "rlcp@60"]
    assert set(table.coverage) == {"rlcp@30", "rlcp@60"}


def test_pvalue_rejection_rate():
    """Test that p-values at most alpha occur at most about alpha of the time."""
    config = CoverageConfig(d=2, n=200, methods=("scp",), reps=300, seed=3)
    table = run_pvalue_experiment(config)
    rate = table.extras["rejection_rate"]["scp"]
    p = table.records["p_value"]
    assert p.between(0.0, 1.0).all()
    assert rate <= 0.1 + 3 * np.sqrt(0.1 * 0.9 / config.reps) + (1 / (config.n + 1))


def test_decompose_mismatch():
    """Test the oracle mismatch column per score kind."""
    config = CoverageConfig(methods=("scp", "cqr", "dcp", "lcp"), **SMALL)
    table = run_decompose(config, n_points=3, n_mc=2000)
    mismatch = table.records.set_index("method")["mismatch"]
    assert mismatch["scp"] >= 0.0
    assert mismatch["cqr"] == 0.0
    assert mismatch["dcp"] == 0.0
    assert np.isnan(mismatch["lcp"])


def test_selection_experiment_records_choices():
    """Test that every rule picks one of the pool's candidates."""
    config = CoverageConfig(dgp=3, d=2, n=60, n_te=5, reps=2, seed=5, methods=("cqr",))
    table = run_selection_experiment(config, targets=(10.0, 20.0))
    candidates = {"cqr_intercept", "cqr_linear", "cqr_sq_norm", "cqr_sd_feature"}
    rules = table.records[table.records["method"].isin(SELECTION_RULES)]
    assert len(rules) == 2 * len(SELECTION_RULES)
    assert set(rules["chosen"]) <= candidates
    for rule in SELECTION_RULES:
        assert sum(table.extras["selection_frequency"][rule].values()) == pytest.approx(1.0)


def test_graph_experiment_shapes():
    """Test the per-community coverage matrix of a small graph experiment."""
    config = GraphExperimentConfig(sbm=SbmSpec(blocks=(30, 30), p_in=0.4, p_out=0.01), reps=2, tests_per_block=2,
                                   detect=True)
    table = run_graph_experiment(config)
    assert table.methods == ["graphcp", "stdcp"]
    assert table.coverage["graphcp"].shape == (2, 2)
    assert "misclustering" in table.records.columns
    assert len(table.extras["community_coverage"]["graphcp"]) == 2


@pytest.mark.slow
def test_wcp_without_shift_is_calibrated():
    """Test that weighting by a unit ratio keeps marginal coverage at 1 - alpha."""
    config = CoverageConfig(dgp=1, d=10, n=500, n_te=500, sigma=1.0, methods=("wcp",), reps=20, seed=0)
    summary = run_coverage_experiment(config).method_summary("wcp")
    assert summary["marginal"] == pytest.approx(0.9, abs=0.02)


@pytest.mark.slow
def test_shift_weights_restore_coverage():
    """Test that density-ratio weights fix CQR under a widened test distribution."""
    config = CoverageConfig(dgp=1, d=10, n=500, n_te=500, sigma=1.2, methods=("cqr", "cqr_shift"), reps=20, seed=0)
    table = run_coverage_experiment(config)
    plain = table.method_summary("cqr")["marginal"]
    shifted = table.method_summary("cqr_shift")["marginal"]
    assert shifted >= 0.88
    assert plain < shifted


def test_aggregate_dgp1_noise():
    """Test that the aggregate noise form vanishes on the whole hypersurface, unlike the per-coordinate form."""
    c = np.sqrt(2 / np.pi)
    x = np.array([[c + 0.5, c - 0.5], [c, c]])
    aggregate = DgpSpec(dgp=1, d=2, dgp1_noise="aggregate")
    per_coordinate = DgpSpec(dgp=1, d=2)
    assert aggregate.noise_sd(x) == pytest.approx([0.0, 0.0], abs=1e-12)
    assert per_coordinate.noise_sd(x) == pytest.approx([1.0 / np.sqrt(2), 0.0], abs=1e-12)
    far = np.array([[2.0, 3.0]])
    assert aggregate.noise_sd(far)[0] == pytest.approx(per_coordinate.noise_sd(far)[0])
    with pytest.raises(ConfigurationError, match="dgp1_noise"):
        DgpSpec(dgp1_noise="pooled")
    assert CoverageConfig(dgp1_noise="aggregate").dgp_spec.dgp1_noise == "aggregate"


def test_lcp_reference_option():
    """Test that the training reference attaches the second training half to the components."""
    with pytest.raises(ConfigurationError, match="lcp_reference"):
        CoverageConfig(lcp_reference="test")
    config = CoverageConfig(d=2, n=30, n_te=3, methods=("scp", "lcp"), neff_target=10.0, lcp_reference="training")
    draw = generate_dgp(config.dgp_spec, np.random.default_rng(6))
    fit = fit_components(draw, config, config.methods)
    _, second = draw.split_train()
    assert np.array_equal(fit.components.lcp_reference.x, second.x)
    plain = fit_components(draw, CoverageConfig(d=2, n=30, n_te=3, methods=("scp", "lcp"), neff_target=10.0),
                           ("scp", "lcp"))
    assert plain.components.lcp_reference is None


def test_max_weight_share():
    """Test the largest normalized weight of uniform, ratio and empty draws."""
    assert max_weight_share(WeightDraw(np.ones(9), 1.0)) == pytest.approx(0.1)
    assert max_weight_share(WeightDraw(np.array([1.0, 3.0]), 2.0)) == pytest.approx(0.5)
    assert max_weight_share(WeightDraw(np.zeros(3), 0.0)) == 1.0


def test_coverage_records_carry_weight_diagnostics():
    """Test the finite-length, unbounded-share and weight-share columns."""
    config = CoverageConfig(methods=("scp", "rlcp"), **SMALL)
    table = run_coverage_experiment(config)
    records = table.records.set_index("method")
    for column in ("finite_length", "infinite_share", "max_weight_share"):
        assert column in table.records.columns
    assert records.loc["scp", "max_weight_share"].tolist() == pytest.approx([1 / 41] * 3)
    assert (records.loc["rlcp", "max_weight_share"] >= 1 / 41).all()
    assert "max_weight_share" in table.summary().columns


def test_resampled_test_covariates():
    """Test that fresh test covariates per repetition change the coverage matrix but keep its shape."""
    fixed = run_coverage_experiment(CoverageConfig(methods=("scp",), **SMALL))
    fresh = run_coverage_experiment(CoverageConfig(methods=("scp",), resample_test=True, **SMALL))
    assert fresh.coverage["scp"].shape == fixed.coverage["scp"].shape
    assert not np.allclose(fresh.coverage["scp"], fixed.coverage["scp"])


@pytest.mark.slow
def test_shift_table_weighted_split_conformal():
    """Test WCP at sigma = 1 under dgp 1 with aggregate noise: marginal 0.907 and conditional miscoverage 0.104."""
    config = CoverageConfig(dgp=1, d=10, n=500, n_te=500, sigma=1.0, methods=("wcp",), reps=50, seed=0,
                            dgp1_noise="aggregate")
    summary = run_coverage_experiment(config).method_summary("wcp")
    assert summary["marginal"] == pytest.approx(0.907, abs=0.02)
    assert summary["cond_miscov"] == pytest.approx(0.104, abs=0.02)


@pytest.mark.slow
def test_shift_table_quantile_regression_under_shift():
    """Test CQR against its density-ratio-weighted version at sigma = 1.2, and undercoverage of unweighted methods."""
    unweighted = ("scp", "cqr", "glcp", "lcp")
    config = CoverageConfig(dgp=1, d=10, n=500, n_te=500, sigma=1.2, methods=unweighted + ("cqr_shift",), reps=50,
                            seed=0, dgp1_noise="aggregate")
    table = run_coverage_experiment(config)
    assert table.method_summary("cqr")["marginal"] == pytest.approx(0.824, abs=0.03)
    assert table.method_summary("cqr_shift")["marginal"] == pytest.approx(0.904, abs=0.02)
    for method in unweighted:
        assert table.method_summary(method)["marginal"] < 0.88, method


@pytest.mark.slow
def test_shift_table_localized_rank_dgp3():
    """Test LCP ranked against the training half under dgp 3: conditional miscoverage 0.032 and marginal 0.902."""
    config = CoverageConfig(dgp=3, d=10, n=500, n_te=500, sigma=1.0, methods=("lcp",), reps=50, seed=0,
                            lcp_reference="training")
    summary = run_coverage_experiment(config).method_summary("lcp")
    assert summary["cond_miscov"] == pytest.approx(0.032, abs=0.015)
    assert summary["marginal"] == pytest.approx(0.902, abs=0.02)


@pytest.mark.slow
def test_marginal_coverage_band_without_shift():
    """Test every method's marginal coverage within [1 - alpha - 3 sd, 1 - alpha + 1/(n+1) + 3 sd] over 1000 draws."""
    methods = ("scp", "cqr", "dcp", "lcp", "rlcp", "cc", "batchgcp")
    reps, n = 1000, 200
    config = CoverageConfig(dgp=1, d=2, n=n, n_te=20, sigma=1.0, methods=methods, reps=reps, seed=0,
                            neff_target=100.0, lcp_reference="training", resample_test=True, n_jobs=4)
    table = run_coverage_experiment(config)
    sd = np.sqrt(0.1 * 0.9 / reps)
    for method in methods:
        marginal = table.method_summary(method)["marginal"]
        assert 0.9 - 3 * sd <= marginal <= 0.9 + 1 / (n + 1) + 3 * sd, method


@pytest.mark.slow
def test_randomized_localization_weighted_upper_bound():
    """Test RLCP in ten dimensions against 1 - alpha plus its mean largest normalized weight."""
    reps = 200
    config = CoverageConfig(dgp=1, d=10, n=500, n_te=20, methods=("rlcp",), reps=reps, seed=1, resample_test=True)
    summary = run_coverage_experiment(config).method_summary("rlcp")
    sd = np.sqrt(0.1 * 0.9 / reps)
    assert 0.9 - 3 * sd <= summary["marginal"] <= 0.9 + summary["max_weight_share"] + 3 * sd
    assert summary["max_weight_share"] > 1 / 501


@pytest.mark.slow
def test_localized_conditional_miscoverage_shrinks_with_n():
    """Test that RLCP and LCP conditional miscoverage does not grow along n with h = n^(-1/(d+2))."""
    sizes = (250, 500, 1000, 2000)
    config = CoverageConfig(dgp=1, d=2, n_te=100, methods=("rlcp", "lcp"), reps=30, seed=2)
    table = run_rate_experiment(config, sizes=sizes)
    for method in ("rlcp", "lcp"):
        cond = [table.method_summary(f"{method}@{n}")["cond_miscov"] for n in sizes]
        assert all(later <= earlier + 0.005 for earlier, later in zip(cond, cond[1:])), (method, cond)
        assert cond[-1] < cond[0], (method, cond)


def _far_first_coordinate(x):
    return np.abs(x[:, 0]) > 1.0


def _positive_second_coordinate(x):
    return x[:, 1] > 0.0


@pytest.mark.slow
def test_batchgcp_group_coverage():
    """Test that BatchGCP covers each overlapping group within alpha +- 0.03 under dgp 3."""
    spec = DgpSpec(dgp=3, d=2, n=400, n_tr=400, n_te=200)
    groups = (NamedFeature("|x0|>1", _far_first_coordinate), NamedFeature("x1>0", _positive_second_coordinate))
    masks = {g.name: [] for g in groups}
    masks["all"] = []
    covered = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        draw = generate_dgp(spec, rng)
        first, _ = draw.split_train()
        components = FittedComponents(mean_model=fit_mean_model(first.x, first.y), groups=groups, level=Level(0.1))
        predictor = make_predictor("batchgcp", components)
        bound = predictor.score.bind(draw.calibration)
        for x in draw.test_x:
            region = build_prediction_region(predictor, draw.calibration, x, 0.1, bound=bound)
            covered.append(analytic_conditional_coverage(region, x, spec))
        for g in groups:
            masks[g.name].append(g(draw.test_x) > 0)
        masks["all"].append(np.ones(spec.n_te, dtype=bool))
    covered = np.asarray(covered)
    for name, parts in masks.items():
        members = np.concatenate(parts)
        complement = covered[~members] if name != "all" else covered
        assert covered[members].mean() == pytest.approx(0.9, abs=0.03), name
        assert complement.mean() == pytest.approx(0.9, abs=0.03), name
