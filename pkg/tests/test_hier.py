"""Tests for two-layer hierarchical calibration."""

import numpy as np
import pytest

from conformal_kit.errors import ConfigurationError
from conformal_kit.hier import (BranchScoreKind, HierConfig, HierData,
                                fit_branch_scores, hierarchical_region)
from conformal_kit.kernels import KernelSpec
from conformal_kit.simulate import (HierExperimentConfig, HierSpec,
                                    generate_hierarchical,
                                    run_hier_experiment)


def _identical_branches():
    """Two branches with y = 1, 2, 3 at a single covariate value."""
    x = np.zeros((2, 3))
    y = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, np.nan]])
    return HierData(x, y)


def test_single_branch_rejected():
    """Test that K = 1 is not a hierarchical layout."""
    with pytest.raises(ConfigurationError, match="at least 2 branches"):
        HierData(np.zeros((1, 3)), np.zeros((1, 3)))


def test_layout_shapes():
    """Test the branch layout accessors."""
    data = _identical_branches()
    assert (data.n_branches, data.branch_size, data.d) == (2, 3, 1)
    assert data.fit_rows(0) == 3 and data.fit_rows(1) == 2
    assert data.x_test.tolist() == [0.0]


def test_enumerated_threshold():
    """Test the pooled threshold against a hand enumeration for K = 2, N = 3."""
    data = _identical_branches()
    specs = fit_branch_scores(data, BranchScoreKind.DCP_BRANCH, 0.5)
    first = specs[0].pretrained(data.x[0], data.y[0])
    second = specs[1].pretrained(data.x[1, :2], data.y[1, :2])
    assert first == pytest.approx([1 / 6, 1 / 6, 0.5])
    assert second == pytest.approx([0.0, 0.5])

    # pooled scores 0, 1/6, 1/6, 1/2, 1/2 plus +inf; the 3rd of 6 atoms is 1/6
    # F(y) = 1/2 on [1, 2) and jumps to 1 at y = 2
    region = hierarchical_region(data, BranchScoreKind.DCP_BRANCH, 0.5)
    assert region.intervals == ((1.0, np.nextafter(2.0, -np.inf)),)
    assert region.contains(1.0) and not region.contains(2.0)


def test_own_branch_calibration():
    """Test calibration on the test branch alone."""
    data = _identical_branches()
    region = hierarchical_region(data, BranchScoreKind.DCP_BRANCH, 0.5, pooled=False)
    assert region.length == float("inf")


def test_grid_region_matches_analytic():
    """Test grid evaluation against closed-form inversion."""
    data, _ = generate_hierarchical(HierSpec(n_branches=10, branch_size=15), np.random.default_rng(0))
    config = HierConfig(kernel=KernelSpec(bandwidth=0.7))
    grid = np.linspace(-10.0, 10.0, 401)
    analytic = hierarchical_region(data, "dcp_branch", 0.1, config=config)
    scanned = hierarchical_region(data, "dcp_branch", 0.1, y_grid=grid, config=config)
    assert np.mean(analytic.contains(grid) == scanned.contains(grid)) >= 0.99


def test_cqr_branch_region():
    """Test the two-sided quantile branch score."""
    data, _ = generate_hierarchical(HierSpec(n_branches=8, branch_size=30), np.random.default_rng(1))
    region = hierarchical_region(data, BranchScoreKind.CQR_BRANCH, 0.2)
    assert len(region.intervals) == 1
    assert np.isfinite(region.length) and region.length > 0


def test_cqr_branch_too_small():
    """Test that branches smaller than the quantile basis are rejected."""
    data = HierData(np.zeros((3, 2)), np.ones((3, 2)))
    with pytest.raises(ConfigurationError, match="cqr_branch needs"):
        fit_branch_scores(data, BranchScoreKind.CQR_BRANCH, 0.1)


def test_hier_experiment_shapes():
    """Test the repetition table of a small hierarchical experiment."""
    config = HierExperimentConfig(hier=HierSpec(n_branches=5, branch_size=6), reps=3, compare_own_branch=True)
    table = run_hier_experiment(config)
    assert table.methods == ["hier_pooled", "hier_own"]
    assert table.coverage["hier_pooled"].shape == (1, 3)
    assert len(table.records) == 6


@pytest.mark.slow
def test_branch_conditional_coverage():
    """Test coverage given the test branch's noise scale and covariate."""
    config = HierExperimentConfig(hier=HierSpec(n_branches=50, branch_size=20), reps=100, seed=3)
    table = run_hier_experiment(config)
    summary = table.method_summary("hier_pooled")
    assert summary["marginal"] == pytest.approx(0.9, abs=0.05)


@pytest.mark.slow
def test_pooled_marginal_bound_and_benefit_over_own_branch():
    """Test pooled coverage within its finite-sample band and shorter regions than own-branch calibration."""
    reps = 300
    spec = HierSpec(n_branches=50, branch_size=20)
    config = HierExperimentConfig(hier=spec, reps=reps, seed=5, compare_own_branch=True)
    table = run_hier_experiment(config)
    pooled = table.method_summary("hier_pooled")
    own = table.method_summary("hier_own")

    sigma = np.sqrt(0.1 * 0.9 / reps)
    upper = 0.9 + 1 / (spec.n_branches * spec.branch_size) + 3 * sigma
    assert 0.9 - 3 * sigma <= pooled["marginal"] <= upper
    assert pooled["mean_length"] < own["mean_length"]
