"""
Community-conditional conformal prediction on graphs.

Nodes are grouped into communities (detected by label propagation or imported),
each node's base score is replaced by its empirical rank within its community,
and the test node's rank is calibrated against the ranks of every other node.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import networkx as nx
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.optimize import linear_sum_assignment

from .calib_core import DEFAULT_RESOLUTION, MIN_RESOLUTION, weighted_quantile
from .common import Level, PredictionRegion, WeightedScoreSample, default_y_domain
from .errors import ConfigurationError, DomainError
from .methods import CalibrationMode, ScoreSpec

logger = logging.getLogger(__name__)

DEFAULT_MIN_COMMUNITY = 10


class CommunitySource(Enum):
    DETECTED = "detected"
    IMPORTED = "imported"
    PLANTED = "planted"


@dataclass(frozen=True)
class GraphData:
    """
    Undirected graph with node covariates and responses.

    Attributes:
        adjacency: Symmetric boolean sparse matrix with zero diagonal.
        covariates: (n_nodes, d) matrix.
        responses: One response per node; the test node's entry is ignored.
        test_index: Node whose response is unobserved.
    """

    adjacency: sparse.csr_matrix
    covariates: np.ndarray
    responses: np.ndarray
    test_index: int

    def __post_init__(self):
        adjacency = sparse.csr_matrix(self.adjacency, dtype=bool)
        n = adjacency.shape[0]
        if adjacency.shape != (n, n):
            raise DomainError("adjacency must be square")
        if (adjacency != adjacency.T).nnz:
            raise DomainError("adjacency must be symmetric")
        if adjacency.diagonal().any():
            raise DomainError("adjacency must have a zero diagonal")
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.ravel(np.asarray(self.responses, dtype=float))
        if x.shape[0] != n or y.size != n:
            raise DomainError(f"need one covariate row and one response per node ({n})")
        if not 0 <= int(self.test_index) < n:
            raise DomainError(f"test_index {self.test_index} outside [0, {n})")
        observed = np.delete(y, int(self.test_index))
        if not np.all(np.isfinite(observed)):
            raise DomainError("observed responses must be finite")
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "test_index", int(self.test_index))

    @property
    def n_nodes(self) -> int:
        return int(self.adjacency.shape[0])

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of nodes with an observed response."""
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.test_index] = False
        return mask

    def with_test(self, index: int) -> "GraphData":
        return GraphData(self.adjacency, self.covariates, self.responses, index)

    def permuted(self, order: Sequence[int]) -> "GraphData":
        """Relabel nodes so that new node k is old node order[k]."""
        order = np.asarray(order, dtype=int)
        inverse = np.argsort(order)
        adjacency = self.adjacency[order][:, order]
        return GraphData(adjacency, self.covariates[order], self.responses[order], int(inverse[self.test_index]))


@dataclass(frozen=True)
class CommunityAssignment:
    """Community id in [0, n_communities) for every node; every id is used."""

    labels: np.ndarray
    source: CommunitySource = CommunitySource.DETECTED

    def __post_init__(self):
        labels = np.ravel(np.asarray(self.labels))
        if labels.size == 0:
            raise DomainError("community labels are empty")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DomainError("community labels must be integers")
            labels = labels.astype(int)
        present = np.unique(labels)
        if present[0] != 0 or present[-1] != present.size - 1:
            raise DomainError("community ids must be 0..k-1 with every community nonempty")
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source", CommunitySource(self.source))

    @classmethod
    def from_labels(cls, raw: Sequence, source=CommunitySource.IMPORTED) -> "CommunityAssignment":
        """Relabel arbitrary hashable ids to 0..k-1 in order of first appearance."""
        mapping = {}
        labels = [mapping.setdefault(v, len(mapping)) for v in list(raw)]
        return cls(np.asarray(labels, dtype=int), source)

    @property
    def n_communities(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_communities)

    def members(self, community: int) -> np.ndarray:
        return np.flatnonzero(self.labels == community)


# ---------------------------------------------------------------------------
# Community detection
# ---------------------------------------------------------------------------


def _merge_small(groups: Sequence[Sequence[int]], n_nodes: int, min_size: int) -> np.ndarray:
    large = [g for g in groups if len(g) >= min_size]
    small = [v for g in groups if len(g) < min_size for v in g]
    labels = np.empty(n_nodes, dtype=int)
    for k, group in enumerate(large):
        labels[list(group)] = k
    if small:
        logger.warning("merging %d nodes from communities smaller than %d", len(small), min_size)
        labels[small] = len(large)
    return labels


def detect_communities(
    graph: GraphData,
    rng: np.random.Generator,
    min_size: int = DEFAULT_MIN_COMMUNITY,
) -> CommunityAssignment:
    """
    Seeded asynchronous label propagation; communities smaller than
    min_size are merged into one outlier community.

    Community ids are ordered by each community's smallest node index.
    """
    if min_size < 1:
        raise ConfigurationError("min_size must be at least 1")
    n = graph.n_nodes
    g = nx.from_scipy_sparse_array(graph.adjacency)
    if g.number_of_edges() == 0:
        logger.warning("graph has no edges; every node is its own community")
        groups = [[v] for v in range(n)]
    else:
        seed = int(rng.integers(2**32))
        groups = [sorted(c) for c in nx.community.asyn_lpa_communities(g, seed=seed)]
    groups.sort(key=lambda c: c[0])
    labels = _merge_small(groups, n, min_size)
    assignment = CommunityAssignment.from_labels(labels, CommunitySource.DETECTED)
    logger.info("detected %d communities over %d nodes", assignment.n_communities, n)
    return assignment


def misclustering_rate(labels: Sequence[int], planted: Sequence[int]) -> float:
    """Fraction of nodes misassigned under the best matching of detected to planted ids."""
    labels = np.asarray(labels, dtype=int)
    planted = np.asarray(planted, dtype=int)
    if labels.shape != planted.shape:
        raise DomainError("label vectors differ in length")
    confusion = np.zeros((labels.max() + 1, planted.max() + 1))
    np.add.at(confusion, (labels, planted), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(1.0 - confusion[rows, cols].sum() / labels.size)


# ---------------------------------------------------------------------------
# Rank scores and regions
# ---------------------------------------------------------------------------


def community_rank_scores(base_scores, assignment: CommunityAssignment) -> np.ndarray:
    """sum_j 1{c_j = c_i, v_j <= v_i} / sum_j 1{c_j = c_i} for every node i."""
    v = np.ravel(np.asarray(base_scores, dtype=float))
    if v.size != assignment.labels.size:
        raise DomainError("need one base score per node")
    ranks = np.empty(v.size)
    for k in range(assignment.n_communities):
        idx = assignment.members(k)
        sorted_v = np.sort(v[idx])
        ranks[idx] = np.searchsorted(sorted_v, v[idx], side="right") / idx.size
    return ranks


def community_rank_score(base_scores, assignment: CommunityAssignment, i: int) -> float:
    v = np.ravel(np.asarray(base_scores, dtype=float))
    if not 0 <= i < v.size:
        raise DomainError(f"node {i} out of range")
    same = assignment.labels == assignment.labels[i]
    return float(np.sum(same & (v <= v[i])) / np.sum(same))


def _graph_grid(graph: GraphData, y_grid, resolution: int) -> np.ndarray:
    if y_grid is not None:
        return np.ravel(np.asarray(y_grid, dtype=float))
    if resolution < MIN_RESOLUTION:
        raise ConfigurationError(f"resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    lo, hi = default_y_domain(graph.responses[graph.observed])
    return np.linspace(lo, hi, resolution)


@lru_cache(maxsize=None)
def _warn_fast_ranks(m: int) -> None:
    """Warn once per community size."""
    logger.warning("fast GraphCP: peer ranks in a community of %d shift by at most 1/%d", m, m)


def graphcp_region(
    graph: GraphData,
    assignment: CommunityAssignment,
    score: ScoreSpec,
    level,
    y_grid=None,
    mode: CalibrationMode = CalibrationMode.FAST,
    resolution: int = DEFAULT_RESOLUTION,
) -> PredictionRegion:
    """
    Community-conditional region for the test node.

    Args:
        graph: Graph with the test node marked.
        assignment: Communities for every node.
        score: Pre-trained base score (no calibration-data dependence).
        level: Miscoverage level.
        y_grid: Trial responses; defaults to the observed range padded by 4 IQR.
        mode: EXACT re-ranks the test node's whole community at every trial y;
            FAST ranks the other nodes once without the test node.
        resolution: Grid size when y_grid is not given.
    """
    level = level if isinstance(level, Level) else Level(level)
    mode = CalibrationMode(mode)
    if assignment.labels.size != graph.n_nodes:
        raise DomainError("assignment does not cover every node")
    grid = _graph_grid(graph, y_grid, resolution)
    t = graph.test_index
    observed = graph.observed
    x = graph.covariates
    base = np.zeros(graph.n_nodes)
    base[observed] = score.pretrained(x[observed], graph.responses[observed])
    x_test = x[t]
    v_test = score.pretrained(np.tile(x_test, (grid.size, 1)), grid)

    community = assignment.labels == assignment.labels[t]
    peers = community & observed
    m = int(community.sum())

    if mode is CalibrationMode.FAST:
        _warn_fast_ranks(m)
        ranks = np.zeros(graph.n_nodes)
        others = CommunityAssignment.from_labels(assignment.labels[observed], assignment.source)
        ranks[observed] = community_rank_scores(base[observed], others)
        q = weighted_quantile(WeightedScoreSample.uniform(ranks[observed]), level)
        peer_sorted = np.sort(base[peers])
        test_ranks = (np.searchsorted(peer_sorted, v_test, side="right") + 1.0) / m
        return PredictionRegion.from_mask(grid, test_ranks <= q)

    fixed = community_rank_scores(np.where(observed, base, 0.0), assignment)[observed & ~community]
    peer_v = base[peers]
    accepted = np.empty(grid.size, dtype=bool)
    for k, value in enumerate(v_test):
        members = np.append(peer_v, value)
        member_ranks = np.searchsorted(np.sort(members), members, side="right") / m
        calibration = np.concatenate([fixed, member_ranks[:-1]])
        q = weighted_quantile(WeightedScoreSample.uniform(calibration), level)
        accepted[k] = member_ranks[-1] <= q
    return PredictionRegion.from_mask(grid, accepted)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_graph(
    edge_path: Union[str, Path],
    node_csv: Union[str, Path],
    test_index: Optional[int] = None,
) -> GraphData:
    """
    Read a whitespace-separated 0-indexed edge list and a node table.

    The node CSV has a `y` column and one column per covariate. When
    test_index is None the single row with a missing `y` is the test node.
    """
    nodes = pd.read_csv(node_csv)
    if "y" not in nodes.columns:
        raise DomainError(f"{node_csv} has no 'y' column")
    y = nodes["y"].to_numpy(dtype=float)
    x = nodes.drop(columns=["y"]).to_numpy(dtype=float)
    n = len(nodes)
    if test_index is None:
        missing = np.flatnonzero(np.isnan(y))
        if missing.size != 1:
            raise DomainError("need test_index or exactly one node with a missing response")
        test_index = int(missing[0])

    edges = pd.read_csv(edge_path, sep=r"\s+", header=None, comment="#", names=["u", "v"], dtype=int)
    u, v = edges["u"].to_numpy(), edges["v"].to_numpy()
    if edges.size and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= n):
        raise DomainError(f"edge endpoints must lie in [0, {n})")
    keep = u != v
    u, v = u[keep], v[keep]
    adjacency = sparse.coo_matrix(
        (np.ones(2 * u.size, dtype=bool), (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n)
    ).tocsr()
    logger.info("loaded graph with %d nodes and %d edges", n, int(adjacency.nnz // 2))
    return GraphData(adjacency, x, y, test_index)


def load_communities(csv_path: Union[str, Path]) -> CommunityAssignment:
    """Single-column CSV of community ids, one row per node; a header row is optional."""
    frame = pd.read_csv(csv_path, header=None)
    labels = pd.to_numeric(frame.iloc[:, 0], errors="coerce").dropna().astype(int)
    return CommunityAssignment.from_labels(labels.tolist(), CommunitySource.IMPORTED)


def planted_assignment(blocks: Sequence[int]) -> CommunityAssignment:
    """Consecutive nodes grouped into blocks of the given sizes."""
    return CommunityAssignment(np.repeat(np.arange(len(blocks)), blocks), CommunitySource.PLANTED)
